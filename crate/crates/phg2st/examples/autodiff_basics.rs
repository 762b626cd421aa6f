//! Tour of the tape-based autodiff engine: build a tiny computation, run
//! the backward pass, and confirm the gradients against finite differences.
//!
//! ```text
//! cargo run --release --example autodiff_basics
//! ```

use phg2st::gradcheck::{check_against, finite_diff};
use phg2st::rng::{seeded, streams};
use phg2st::tensor::{Tape, TensorData};
use phg2st::Result;
use rand::Rng;

fn main() -> Result<()> {
    // A two-layer perceptron with layer norm, reduced to a scalar loss.
    let mut rng = seeded(1, streams::PARAM_INIT);
    let mut rand_t = |shape: &[usize]| TensorData {
        shape: shape.to_vec(),
        data: (0..shape.iter().product())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect(),
    };
    let x0 = rand_t(&[4, 3]);
    let w1_0 = rand_t(&[3, 5]);
    let b1_0 = rand_t(&[5]);
    let gain0 = rand_t(&[5]);
    let bias0 = rand_t(&[5]);
    let w2_0 = rand_t(&[5, 2]);
    let target0 = rand_t(&[4, 2]);

    let build = |w1_vals: &[f64]| {
        let mut tape = Tape::new();
        let x = tape.constant(&x0);
        let mut w1_t = w1_0.clone();
        w1_t.data.copy_from_slice(w1_vals);
        let w1 = tape.param(&w1_t);
        let b1 = tape.param(&b1_0);
        let gain = tape.param(&gain0);
        let bias = tape.param(&bias0);
        let w2 = tape.param(&w2_0);
        let target = tape.constant(&target0);

        let h = tape.linear(x, w1, b1)?;
        let h = tape.gelu(h);
        let h = tape.layer_norm(h, gain, bias, 1e-5)?;
        let pred = tape.matmul(h, w2)?;
        let loss = tape.mse(pred, target)?;
        Ok::<_, phg2st::Error>((tape, w1, loss))
    };

    let (mut tape, w1, loss) = build(&w1_0.data)?;
    println!("forward: {} tape nodes, loss {:.6}", tape.len(), tape.data(loss)[0]);

    tape.backward(loss)?;
    let analytic = tape.grad(w1).expect("w1 participates in the loss").to_vec();
    println!("dL/dW1 (first row): {:?}", &analytic[..5]);

    // The independent oracle: central finite differences over W1.
    let numeric = finite_diff(
        |vals| {
            let (tape, _, loss) = build(vals).unwrap();
            tape.data(loss)[0]
        },
        &w1_0.data,
        1e-5,
    );
    check_against(&analytic, &numeric, 1e-6)?;
    println!("analytic gradient matches finite differences (tol 1e-6)");

    // Backward is idempotent: grads are overwritten, not accumulated.
    let before = analytic.clone();
    tape.backward(loss)?;
    assert_eq!(before, tape.grad(w1).unwrap());
    println!("repeated backward reproduces identical gradients");
    Ok(())
}
