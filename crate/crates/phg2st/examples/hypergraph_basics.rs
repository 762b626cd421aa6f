//! Builds the K-NN hypergraph of a small slide from feature and position
//! affinities, inspects its structure, and runs one convolution.
//!
//! ```text
//! cargo run --release --example hypergraph_basics
//! ```

use phg2st::data::synth::{generate_synthetic_slide, SynthConfig};
use phg2st::hypergraph::{
    build_incidence, hypergraph_conv, pairwise_feature_distance, pairwise_position_distance,
    NormMode, WeightMode,
};
use phg2st::rng::{seeded, streams};
use phg2st::tensor::{Tape, TensorData};
use phg2st::Result;
use rand::Rng;

fn main() -> Result<()> {
    let cfg = SynthConfig {
        n_rows: 4,
        n_cols: 4,
        d: 8,
        m: 10,
        latent_dim: 3,
        noise_sigma: 0.1,
    };
    let bundle = generate_synthetic_slide(&cfg, 3)?;

    // Each spot grows one hyperedge over itself plus its K nearest
    // neighbors under the combined (normalized) affinity.
    let sim = pairwise_feature_distance(&bundle.spot_features)?;
    let pos = pairwise_position_distance(&bundle.coords)?;
    let hg = build_incidence(&sim, &pos, 3, WeightMode::Affinity, NormMode::Minmax)?;
    println!("{} nodes, {} hyperedges", hg.n_nodes, hg.n_edges());
    for (e, edge) in hg.edges.iter().take(4).enumerate() {
        println!("  edge {e}: members {:?}, weight {:.4}", edge.members, edge.weight);
    }
    let degrees: Vec<usize> = (0..hg.n_nodes).map(|i| hg.node_degree(i)).collect();
    println!("node degrees: min {}, max {}",
        degrees.iter().min().unwrap(), degrees.iter().max().unwrap());

    // The propagation operator is symmetric and fixed per graph.
    let prop = hg.propagation();
    let asym = (0..hg.n_nodes)
        .flat_map(|i| (0..hg.n_nodes).map(move |j| (i, j)))
        .map(|(i, j)| (prop.get(i, j) - prop.get(j, i)).abs())
        .fold(0.0f64, f64::max);
    println!("propagation asymmetry: {asym:.2e}");

    // One differentiable convolution: X' = P X Theta.
    let mut rng = seeded(4, streams::PARAM_INIT);
    let theta = TensorData {
        shape: vec![cfg.d, 6],
        data: (0..cfg.d * 6).map(|_| rng.random_range(-0.5..0.5)).collect(),
    };
    let mut tape = Tape::new();
    let x = tape.constant(&bundle.spot_features);
    let th = tape.param(&theta);
    let out = hypergraph_conv(&mut tape, x, &hg, th)?;
    println!("conv output shape {:?}", tape.shape(out));
    let loss = tape.mean_all(out);
    tape.backward(loss)?;
    let grad_norm: f64 = tape.grad(th).unwrap().iter().map(|g| g * g).sum::<f64>().sqrt();
    println!("|dL/dTheta| = {grad_norm:.6}");
    Ok(())
}
