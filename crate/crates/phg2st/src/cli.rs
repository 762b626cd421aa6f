//! Command-line pipeline: `synth`, `train`, `eval`, `cv`, and `sweep`, all
//! driven by one TOML configuration plus a seed (flag, `PHG2ST_SEED`, or
//! config, in that precedence order).

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{load_run_config, RunConfig};
use crate::data::formats::{load_cohort, save_slide_bundle};
use crate::data::heatmap::write_heatmap;
use crate::data::preprocess::{normalize_counts, select_hvg};
use crate::data::synth::generate_cohort;
use crate::data::SlideBundle;
use crate::error::{Error, Result};
use crate::eval::{
    cross_validate, evaluate_slides, prompt_ratio_sweep, write_cv_summary, write_sweep_csv,
    CvOptions, EvalReport,
};
use crate::model::forward;
use crate::pipeline::prepare_slides;
use crate::rng::{seeded, streams};
use crate::tensor::TensorData;
use crate::train::{fit, fit_resumed, FitOptions};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

/// Genes rendered by `--heatmaps` (the first panel genes, to bound output).
const HEATMAP_GENES: usize = 4;

#[derive(Parser)]
#[command(
    name = "phg2st",
    version,
    about = "Spatial gene expression prediction from histology via \
             prompt-guided hypergraph learning"
)]
struct Cli {
    /// TOML run configuration (reference defaults when omitted).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base seed; overrides PHG2ST_SEED and the config file.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort of slide bundles.
    Synth {
        /// Cohort root to write (default: paths.data).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also render a log-CPM heatmap of the first gene per slide.
        #[arg(long)]
        heatmaps: bool,
    },
    /// Train a model; writes model.phgc and history.csv.
    Train {
        /// Cohort root (default: paths.data).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory (default: paths.out).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint (its architecture and gene panel
        /// replace the [model] and [hvg] config sections).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a cohort; writes eval.json.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Prompt ratio (default: train.eval_prompt_ratio).
        #[arg(long)]
        ratio: Option<f64>,
        /// Render predicted/true spatial heatmaps for the first genes.
        #[arg(long)]
        heatmaps: bool,
    },
    /// Leave-one-patient-out cross-validation; writes cv_summary.json.
    Cv {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker threads for folds (results are order-merged, so any
        /// value reproduces the single-threaded output).
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Evaluate a checkpoint across prompt ratios; writes sweep.csv.
    Sweep {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated prompt ratios (default 0,0.1,0.3,0.5,0.7,0.9).
        #[arg(long, value_delimiter = ',')]
        ratios: Vec<f64>,
    },
}

/// Runs the CLI on `args` (program name excluded) and returns the process
/// exit code: 0 success, 1 numerical failure, 3 unusable checkpoint,
/// 2 anything else.
pub fn run<I: IntoIterator<Item = String>>(args: I) -> i32 {
    let full_args = std::iter::once("phg2st".to_string()).chain(args);
    let cli = match Cli::try_parse_from(full_args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => load_run_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = resolve_seed(cli.seed)? {
        cfg.seed = seed;
    }
    cfg.validate()?;
    let echo = toml::to_string(&cfg)
        .map_err(|e| Error::Config(format!("serializing resolved config: {e}")))?;
    println!("# resolved configuration\n{echo}");

    match cli.command {
        Command::Synth { out, heatmaps } => cmd_synth(&cfg, out.as_deref(), heatmaps),
        Command::Train { data, out, resume } => {
            cmd_train(&cfg, data.as_deref(), out.as_deref(), resume.as_deref())
        }
        Command::Eval { checkpoint, data, out, ratio, heatmaps } => {
            cmd_eval(&cfg, &checkpoint, data.as_deref(), out.as_deref(), ratio, heatmaps)
        }
        Command::Cv { data, out, jobs } => cmd_cv(&cfg, data.as_deref(), out.as_deref(), jobs),
        Command::Sweep { checkpoint, data, out, ratios } => {
            cmd_sweep(&cfg, &checkpoint, data.as_deref(), out.as_deref(), &ratios)
        }
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<Option<u64>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("PHG2ST_SEED") {
        Ok(text) => text.trim().parse::<u64>().map(Some).map_err(|_| {
            Error::Config(format!("PHG2ST_SEED must be an unsigned integer, got {text:?}"))
        }),
        Err(_) => Ok(None),
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// The shared raw gene panel of a cohort (every bundle must agree).
fn cohort_panel(cohort: &[SlideBundle]) -> Result<Vec<String>> {
    let panel = cohort[0].gene_names.clone();
    for b in &cohort[1..] {
        if b.gene_names != panel {
            return Err(Error::Validation(format!(
                "slide {} has a different gene panel than {}",
                b.slide_id, cohort[0].slide_id
            )));
        }
    }
    Ok(panel)
}

fn names_to_indices(panel: &[String], names: &[String]) -> Result<Vec<usize>> {
    names
        .iter()
        .map(|name| {
            panel.iter().position(|g| g == name).ok_or_else(|| {
                Error::Validation(format!("gene {name} is not in the cohort panel"))
            })
        })
        .collect()
}

/// Splits a cohort into training and validation bundles. With a single
/// patient the same slides serve both roles.
fn split_by_patient(
    cohort: Vec<SlideBundle>,
    requested: Option<&str>,
) -> Result<(Vec<SlideBundle>, Vec<SlideBundle>, String)> {
    let patients: BTreeSet<String> = cohort.iter().map(|b| b.patient_id.clone()).collect();
    let val_patient = match requested {
        Some(p) => {
            if !patients.contains(p) {
                return Err(Error::Validation(format!(
                    "val_patient {p} not in cohort (patients: {})",
                    patients.iter().cloned().collect::<Vec<_>>().join(", ")
                )));
            }
            p.to_string()
        }
        None => patients.iter().next_back().expect("non-empty cohort").clone(),
    };
    let (val, mut train): (Vec<_>, Vec<_>) =
        cohort.into_iter().partition(|b| b.patient_id == val_patient);
    if train.is_empty() {
        train = val.clone();
    }
    Ok((train, val, val_patient))
}

fn cmd_synth(cfg: &RunConfig, out: Option<&Path>, heatmaps: bool) -> Result<()> {
    let root = out.unwrap_or(&cfg.paths.data);
    ensure_dir(root)?;
    let bundles = generate_cohort(
        &cfg.synth.slide(),
        cfg.synth.n_patients,
        cfg.synth.slides_per_patient,
        cfg.seed,
    )?;
    for bundle in &bundles {
        let dir = root.join(&bundle.slide_id);
        save_slide_bundle(bundle, &dir)?;
        if heatmaps {
            let expr = normalize_counts(bundle, &[0])?;
            let column: Vec<f64> = (0..bundle.n).map(|i| expr.values.get(i, 0)).collect();
            write_heatmap(
                &column,
                &bundle.grid,
                &dir.join(format!("{}_lognorm.pgm", expr.gene_names[0])),
            )?;
        }
        println!(
            "wrote {} (patient {}, {} spots, {} genes) -> {}",
            bundle.slide_id,
            bundle.patient_id,
            bundle.n,
            bundle.m_raw,
            dir.display()
        );
    }
    println!("cohort of {} slides under {}", bundles.len(), root.display());
    Ok(())
}

fn cmd_train(
    cfg: &RunConfig,
    data: Option<&Path>,
    out: Option<&Path>,
    resume: Option<&Path>,
) -> Result<()> {
    let data_dir = data.unwrap_or(&cfg.paths.data);
    let out_dir = out.unwrap_or(&cfg.paths.out);
    ensure_dir(out_dir)?;
    let cohort = load_cohort(data_dir)?;
    let panel = cohort_panel(&cohort)?;
    let (train_bundles, val_bundles, val_patient) =
        split_by_patient(cohort, cfg.val_patient.as_deref())?;
    println!(
        "training on {} slide(s), validating on {} slide(s) of patient {val_patient}",
        train_bundles.len(),
        val_bundles.len()
    );

    let (resumed_params, start_epoch, genes, model_cfg) = match resume {
        Some(ck_path) => {
            let ck = load_checkpoint(ck_path)?;
            let genes = names_to_indices(&panel, &ck.genes)?;
            let model_cfg = ck.params.config.clone();
            println!(
                "resuming from {} at epoch {} (best val PCC so far {:.4})",
                ck_path.display(),
                ck.epochs_completed,
                ck.best_val_pcc
            );
            (Some(ck.params), ck.epochs_completed, genes, model_cfg)
        }
        None => {
            let genes = select_hvg(&train_bundles, cfg.hvg.k, cfg.hvg.criterion)?;
            let mut model_cfg = cfg.model.clone();
            model_cfg.d_feat = train_bundles[0].feature_dim();
            model_cfg.n_genes = genes.len();
            (None, 0, genes, model_cfg)
        }
    };

    let train_slides = prepare_slides(&train_bundles, &genes, &cfg.graph)?;
    let val_slides = prepare_slides(&val_bundles, &genes, &cfg.graph)?;
    let history_path = out_dir.join("history.csv");
    let opts = FitOptions {
        model: &model_cfg,
        train: &cfg.train,
        train_slides: &train_slides,
        val_slides: &val_slides,
        seed: cfg.seed,
        history_path: Some(&history_path),
    };
    let result = match resumed_params {
        Some(params) => fit_resumed(params, start_epoch, &opts)?,
        None => fit(&opts)?,
    };

    let ck_path = out_dir.join("model.phgc");
    save_checkpoint(
        &ck_path,
        &result.params,
        &train_slides[0].gene_names,
        start_epoch + result.epochs_run,
        result.best_val_pcc,
    )?;
    println!(
        "ran {} epoch(s); best epoch {} with val PCC {:.4}",
        result.epochs_run, result.best_epoch, result.best_val_pcc
    );
    println!("checkpoint: {}", ck_path.display());
    println!("history: {}", history_path.display());
    Ok(())
}

fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: Option<&Path>,
    out: Option<&Path>,
    ratio: Option<f64>,
    heatmaps: bool,
) -> Result<()> {
    let data_dir = data.unwrap_or(&cfg.paths.data);
    let out_dir = out.unwrap_or(&cfg.paths.out);
    ensure_dir(out_dir)?;
    let ck = load_checkpoint(checkpoint)?;
    let cohort = load_cohort(data_dir)?;
    let panel = cohort_panel(&cohort)?;
    let genes = names_to_indices(&panel, &ck.genes)?;
    let prepared = prepare_slides(&cohort, &genes, &cfg.graph)?;
    let ratio = ratio.unwrap_or(cfg.train.eval_prompt_ratio);

    let mut rng = seeded(cfg.seed, streams::EVAL_MASK);
    let results = evaluate_slides(&ck.params, &prepared, ratio, &mut rng)?;
    for s in &results.per_slide {
        println!(
            "{}: masked MAE {:.4} PCC {:.4} CCC {:.4} ({} of {} spots prompted)",
            s.slide_id, s.masked.mae, s.masked.pcc, s.masked.ccc, s.n_prompted, s.n_spots
        );
    }
    println!(
        "mean over {} slide(s): masked MAE {:.4} PCC {:.4} CCC {:.4}",
        results.per_slide.len(),
        results.mean_masked.mae,
        results.mean_masked.pcc,
        results.mean_masked.ccc
    );

    let report = EvalReport {
        checkpoint: checkpoint.display().to_string(),
        prompt_ratio: ratio,
        seed: cfg.seed,
        genes: ck.genes.clone(),
        results,
    };
    let json_path = out_dir.join("eval.json");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Validation(format!("serializing report: {e}")))?;
    std::fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
    println!("report: {}", json_path.display());

    if heatmaps {
        let hm_dir = out_dir.join("heatmaps");
        ensure_dir(&hm_dir)?;
        // Replay the evaluation masks so figures match the reported metrics.
        let mut rng = seeded(cfg.seed, streams::EVAL_MASK);
        for (bundle, slide) in cohort.iter().zip(&prepared) {
            let (outputs, _) = forward(
                &ck.params,
                &slide.features,
                &slide.neighbors,
                &slide.slide_graph,
                &slide.neighbor_graphs,
                &slide.expr,
                ratio,
                false,
                &mut rng,
            )?;
            let n = slide.n_spots();
            let m = ck.genes.len();
            let column = |t: &TensorData, g: usize| -> Vec<f64> {
                (0..n).map(|i| t.data[i * m + g]).collect()
            };
            for (g, gene) in ck.genes.iter().enumerate().take(HEATMAP_GENES) {
                write_heatmap(
                    &column(&outputs.p_fused, g),
                    &bundle.grid,
                    &hm_dir.join(format!("{}_{}_pred.pgm", slide.slide_id, gene)),
                )?;
                write_heatmap(
                    &column(&slide.expr, g),
                    &bundle.grid,
                    &hm_dir.join(format!("{}_{}_true.pgm", slide.slide_id, gene)),
                )?;
            }
        }
        println!("heatmaps: {}", hm_dir.display());
    }
    Ok(())
}

fn cmd_cv(cfg: &RunConfig, data: Option<&Path>, out: Option<&Path>, jobs: usize) -> Result<()> {
    let data_dir = data.unwrap_or(&cfg.paths.data);
    let out_dir = out.unwrap_or(&cfg.paths.out);
    ensure_dir(out_dir)?;
    let cohort = load_cohort(data_dir)?;
    let opts = CvOptions {
        hvg_k: cfg.hvg.k,
        hvg_criterion: cfg.hvg.criterion,
        graph: cfg.graph,
        model: cfg.model.clone(),
        train: cfg.train.clone(),
        seed: cfg.seed,
        jobs,
    };
    let summary = cross_validate(&cohort, &opts)?;
    for fold in &summary.folds {
        println!(
            "fold {} (test {}): masked MAE {:.4} PCC {:.4} CCC {:.4} after {} epoch(s)",
            fold.fold,
            fold.test_patient,
            fold.test.mean_masked.mae,
            fold.test.mean_masked.pcc,
            fold.test.mean_masked.ccc,
            fold.epochs_run
        );
    }
    println!(
        "mean over {} folds: masked MAE {:.4} PCC {:.4} CCC {:.4}",
        summary.folds.len(),
        summary.mean_test_masked.mae,
        summary.mean_test_masked.pcc,
        summary.mean_test_masked.ccc
    );
    let path = out_dir.join("cv_summary.json");
    write_cv_summary(&summary, &path)?;
    println!("summary: {}", path.display());
    Ok(())
}

fn cmd_sweep(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: Option<&Path>,
    out: Option<&Path>,
    ratios: &[f64],
) -> Result<()> {
    let data_dir = data.unwrap_or(&cfg.paths.data);
    let out_dir = out.unwrap_or(&cfg.paths.out);
    ensure_dir(out_dir)?;
    let ck = load_checkpoint(checkpoint)?;
    let cohort = load_cohort(data_dir)?;
    let panel = cohort_panel(&cohort)?;
    let genes = names_to_indices(&panel, &ck.genes)?;
    let prepared = prepare_slides(&cohort, &genes, &cfg.graph)?;
    let default_ratios = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9];
    let ratios: &[f64] = if ratios.is_empty() { &default_ratios } else { ratios };
    let points = prompt_ratio_sweep(&ck.params, &prepared, ratios, cfg.seed)?;
    for p in &points {
        println!(
            "ratio {:.2}: MAE {:.4} PCC {:.4} CCC {:.4} (unprompted-only PCC {:.4})",
            p.ratio, p.all.mae, p.all.pcc, p.all.ccc, p.masked.pcc
        );
    }
    let path = out_dir.join("sweep.csv");
    write_sweep_csv(&points, &path)?;
    println!("sweep: {}", path.display());
    Ok(())
}
