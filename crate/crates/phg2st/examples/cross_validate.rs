//! Leave-one-patient-out cross-validation on a small synthetic cohort.
//! Every fold holds out all slides of one patient, trains on the rest,
//! and the summary aggregates the per-fold test metrics.
//!
//! ```text
//! cargo run --release --example cross_validate
//! ```

use phg2st::data::preprocess::HvgCriterion;
use phg2st::data::synth::{generate_cohort, SynthConfig};
use phg2st::eval::{cross_validate, write_cv_summary, CvOptions};
use phg2st::model::ModelConfig;
use phg2st::pipeline::GraphConfig;
use phg2st::train::TrainConfig;
use phg2st::Result;

fn main() -> Result<()> {
    let synth = SynthConfig {
        n_rows: 6,
        n_cols: 6,
        d: 8,
        m: 10,
        latent_dim: 3,
        noise_sigma: 0.3,
    };
    let cohort = generate_cohort(&synth, 3, 2, 21)?;
    let opts = CvOptions {
        hvg_k: 8,
        hvg_criterion: HvgCriterion::Lognorm,
        graph: GraphConfig::default(),
        model: ModelConfig {
            d_model: 16,
            d_prompt: 16,
            d_attn: 16,
            heads: 2,
            blocks: 1,
            mlp_ratio: 2,
            ..ModelConfig::default()
        },
        train: TrainConfig { epochs: 20, lr: 3e-3, patience: 20, ..TrainConfig::default() },
        seed: 21,
        jobs: 1,
    };
    let summary = cross_validate(&cohort, &opts)?;
    for fold in &summary.folds {
        println!(
            "fold {}: test patient {}, val patient {}, best epoch {}, \
             test masked PCC {:.4} (all spots {:.4})",
            fold.fold,
            fold.test_patient,
            fold.val_patient,
            fold.best_epoch,
            fold.test.mean_masked.pcc,
            fold.test.mean_all.pcc
        );
    }
    println!(
        "mean over {} folds: masked MAE {:.4} PCC {:.4} CCC {:.4}",
        summary.folds.len(),
        summary.mean_test_masked.mae,
        summary.mean_test_masked.pcc,
        summary.mean_test_masked.ccc
    );

    let path = std::env::temp_dir().join("phg2st_examples/cv_summary.json");
    std::fs::create_dir_all(path.parent().unwrap()).expect("create output dir");
    write_cv_summary(&summary, &path)?;
    println!("summary JSON: {}", path.display());
    Ok(())
}
