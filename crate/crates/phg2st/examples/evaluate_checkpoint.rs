//! Trains briefly, saves a checkpoint, reloads it bit-exactly, and runs
//! the standard evaluation plus a prompt-ratio sweep.
//!
//! ```text
//! cargo run --release --example evaluate_checkpoint
//! ```

use phg2st::checkpoint::{load_checkpoint, save_checkpoint};
use phg2st::data::preprocess::{select_hvg, HvgCriterion};
use phg2st::data::synth::{generate_cohort, SynthConfig};
use phg2st::eval::{evaluate_slides, prompt_ratio_sweep};
use phg2st::model::ModelConfig;
use phg2st::pipeline::{prepare_slides, GraphConfig};
use phg2st::rng::{seeded, streams};
use phg2st::train::{fit, FitOptions, TrainConfig};
use phg2st::Result;

fn main() -> Result<()> {
    let seed = 11;
    let synth = SynthConfig {
        n_rows: 6,
        n_cols: 6,
        d: 8,
        m: 10,
        latent_dim: 3,
        noise_sigma: 0.3,
    };
    let cohort = generate_cohort(&synth, 2, 1, seed)?;
    let genes = select_hvg(&cohort, 8, HvgCriterion::Lognorm)?;
    let slides = prepare_slides(&cohort, &genes, &GraphConfig::default())?;
    let model = ModelConfig {
        d_feat: cohort[0].feature_dim(),
        n_genes: genes.len(),
        d_model: 16,
        d_prompt: 16,
        d_attn: 16,
        heads: 2,
        blocks: 1,
        mlp_ratio: 2,
        ..ModelConfig::default()
    };
    let result = fit(&FitOptions {
        model: &model,
        train: &TrainConfig { epochs: 30, lr: 3e-3, patience: 30, ..TrainConfig::default() },
        train_slides: &slides[..1],
        val_slides: &slides[1..],
        seed,
        history_path: None,
    })?;

    let path = std::env::temp_dir().join("phg2st_examples/model.phgc");
    std::fs::create_dir_all(path.parent().unwrap()).expect("create output dir");
    save_checkpoint(
        &path,
        &result.params,
        &slides[0].gene_names,
        result.epochs_run,
        result.best_val_pcc,
    )?;
    let ck = load_checkpoint(&path)?;
    println!(
        "checkpoint {} ({} params, {} epochs, best val PCC {:.4})",
        path.display(),
        ck.params.n_parameters(),
        ck.epochs_completed,
        ck.best_val_pcc
    );

    // Reload is bit-exact: same predictions, same metrics.
    let mut rng = seeded(seed, streams::EVAL_MASK);
    let live = evaluate_slides(&result.params, &slides[1..], 0.1, &mut rng)?;
    let mut rng = seeded(seed, streams::EVAL_MASK);
    let loaded = evaluate_slides(&ck.params, &slides[1..], 0.1, &mut rng)?;
    assert_eq!(live.mean_masked.pcc.to_bits(), loaded.mean_masked.pcc.to_bits());
    println!(
        "held-out slide: masked MAE {:.4} PCC {:.4} CCC {:.4} (bit-identical after reload)",
        loaded.mean_masked.mae, loaded.mean_masked.pcc, loaded.mean_masked.ccc
    );

    for p in prompt_ratio_sweep(&ck.params, &slides[1..], &[0.0, 0.3, 0.6, 0.9], seed)? {
        println!(
            "  ratio {:.1}: PCC {:.4} (unprompted spots only: {:.4})",
            p.ratio, p.all.pcc, p.masked.pcc
        );
    }
    Ok(())
}
