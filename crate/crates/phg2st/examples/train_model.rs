//! Trains the full model on a synthetic cohort and reports how well it
//! fits the training slides and generalizes to a held-out patient.
//!
//! ```text
//! cargo run --release --example train_model
//! ```

use phg2st::data::preprocess::{select_hvg, HvgCriterion};
use phg2st::data::synth::{generate_cohort, SynthConfig};
use phg2st::eval::evaluate_slides;
use phg2st::model::ModelConfig;
use phg2st::pipeline::{prepare_slides, GraphConfig};
use phg2st::rng::{seeded, streams};
use phg2st::train::{fit, FitOptions, TrainConfig};
use phg2st::Result;
use std::time::Instant;

fn main() -> Result<()> {
    let seed = 0;
    let synth = SynthConfig::default(); // 10x10 grid, 16 features, 20 genes
    let cohort = generate_cohort(&synth, 4, 1, seed)?;
    println!(
        "cohort: {} slides of {} spots, {} genes each",
        cohort.len(),
        cohort[0].n,
        cohort[0].m_raw
    );

    // Hold out the last patient; train on the rest.
    let (train_bundles, test_bundles): (Vec<_>, Vec<_>) =
        cohort.into_iter().partition(|b| b.patient_id != "P03");
    let genes = select_hvg(&train_bundles, 20, HvgCriterion::Lognorm)?;
    let graph = GraphConfig::default();
    let train_slides = prepare_slides(&train_bundles, &genes, &graph)?;
    let test_slides = prepare_slides(&test_bundles, &genes, &graph)?;

    let model = ModelConfig {
        d_feat: train_bundles[0].feature_dim(),
        n_genes: genes.len(),
        d_model: 32,
        d_prompt: 32,
        d_attn: 32,
        heads: 4,
        blocks: 1,
        mlp_ratio: 2,
        ..ModelConfig::default()
    };
    let train_cfg = TrainConfig {
        epochs: 60,
        lr: 3e-3,
        patience: 60,
        ..TrainConfig::default()
    };

    let started = Instant::now();
    let result = fit(&FitOptions {
        model: &model,
        train: &train_cfg,
        train_slides: &train_slides,
        val_slides: &test_slides,
        seed,
        history_path: None,
    })?;
    println!(
        "trained {} epochs in {:.1?}; best epoch {} (val PCC {:.4})",
        result.epochs_run,
        started.elapsed(),
        result.best_epoch,
        result.best_val_pcc
    );
    for stats in result.history.iter().step_by(10) {
        println!(
            "  epoch {:>3}: train loss {:.4}, val PCC {:.4}",
            stats.epoch, stats.train_loss, stats.val_pcc
        );
    }

    // Fitting capacity: score the training slides without any prompt.
    let mut rng = seeded(seed, streams::EVAL_MASK);
    let on_train = evaluate_slides(&result.params, &train_slides, 0.0, &mut rng)?;
    println!(
        "train slides (no prompt): MAE {:.4} PCC {:.4} CCC {:.4}",
        on_train.mean_all.mae, on_train.mean_all.pcc, on_train.mean_all.ccc
    );

    // Generalization: held-out patient at increasing prompt ratios.
    for ratio in [0.0, 0.1, 0.5] {
        let mut rng = seeded(seed, streams::EVAL_MASK);
        let on_test = evaluate_slides(&result.params, &test_slides, ratio, &mut rng)?;
        println!(
            "held-out patient ({:>3.0}% prompts): MAE {:.4} PCC {:.4} CCC {:.4}",
            ratio * 100.0,
            on_test.mean_all.mae,
            on_test.mean_all.pcc,
            on_test.mean_all.ccc
        );
    }
    Ok(())
}
