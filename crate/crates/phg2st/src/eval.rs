//! Prediction quality metrics (MAE, Pearson, concordance), slide- and
//! cohort-level evaluation, prompt-ratio sweeps, and leave-one-patient-out
//! cross-validation.

use crate::data::preprocess::{select_hvg, HvgCriterion};
use crate::data::SlideBundle;
use crate::error::{Error, Result};
use crate::model::{forward, ModelConfig, ModelParams};
use crate::pipeline::{prepare_slides, GraphConfig, PreparedSlide};
use crate::rng::{seeded, streams};
use crate::tensor::TensorData;
use crate::train::{fit, FitOptions, TrainConfig};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

fn check_pair(name: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.is_empty() {
        return Err(Error::Param { name, details: "empty input".into() });
    }
    if a.len() != b.len() {
        return Err(Error::Dim {
            op: name,
            details: format!("{} vs {} values", a.len(), b.len()),
        });
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numerical(format!("{name}: non-finite input value")));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_pair("mae", pred, target)?;
    let n = pred.len() as f64;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / n)
}

fn centered_moments(a: &[f64], b: &[f64]) -> (f64, f64, f64, f64, f64) {
    // Two-pass population moments: means first, then centered products.
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    (ma, mb, cov / n, va / n, vb / n)
}

/// Pearson correlation over population moments. Either side constant
/// (zero variance) maps to 0 by convention.
pub fn pcc(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair("pcc", a, b)?;
    let (_, _, cov, va, vb) = centered_moments(a, b);
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// Lin's concordance correlation, `2 cov / (var_a + var_b + (mean gap)^2)`
/// with population moments. A zero denominator means two identical
/// constants, which are in perfect agreement: 1 by convention.
pub fn ccc(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair("ccc", a, b)?;
    let (ma, mb, cov, va, vb) = centered_moments(a, b);
    let gap = ma - mb;
    let denom = va + vb + gap * gap;
    if denom == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * cov / denom)
}

/// One evaluation's worth of metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub mae: f64,
    pub pcc: f64,
    pub ccc: f64,
}

impl MetricTriple {
    fn mean(items: impl Iterator<Item = MetricTriple> + Clone, count: usize) -> MetricTriple {
        let n = count as f64;
        MetricTriple {
            mae: items.clone().map(|m| m.mae).sum::<f64>() / n,
            pcc: items.clone().map(|m| m.pcc).sum::<f64>() / n,
            ccc: items.map(|m| m.ccc).sum::<f64>() / n,
        }
    }
}

/// Panel metrics over the rows where `rows` is true: MAE across all
/// included cells, PCC/CCC per gene (across included spots) averaged over
/// genes.
pub fn gene_panel_metrics(
    pred: &TensorData,
    target: &TensorData,
    rows: &[bool],
) -> Result<MetricTriple> {
    if pred.shape != target.shape || pred.shape.len() != 2 {
        return Err(Error::Dim {
            op: "gene_panel_metrics",
            details: format!("prediction {:?} vs target {:?}", pred.shape, target.shape),
        });
    }
    let (n, m) = (pred.shape[0], pred.shape[1]);
    if rows.len() != n {
        return Err(Error::Dim {
            op: "gene_panel_metrics",
            details: format!("{} row flags for {n} rows", rows.len()),
        });
    }
    let included: Vec<usize> = (0..n).filter(|i| rows[*i]).collect();
    if included.is_empty() {
        return Err(Error::Param { name: "rows", details: "no rows included".into() });
    }
    let mut flat_pred = Vec::with_capacity(included.len() * m);
    let mut flat_target = Vec::with_capacity(included.len() * m);
    for &i in &included {
        flat_pred.extend_from_slice(&pred.data[i * m..(i + 1) * m]);
        flat_target.extend_from_slice(&target.data[i * m..(i + 1) * m]);
    }
    let mae = mae(&flat_pred, &flat_target)?;
    let mut pcc_sum = 0.0;
    let mut ccc_sum = 0.0;
    let mut col_p = Vec::with_capacity(included.len());
    let mut col_t = Vec::with_capacity(included.len());
    for g in 0..m {
        col_p.clear();
        col_t.clear();
        for &i in &included {
            col_p.push(pred.data[i * m + g]);
            col_t.push(target.data[i * m + g]);
        }
        pcc_sum += pcc(&col_p, &col_t)?;
        ccc_sum += ccc(&col_p, &col_t)?;
    }
    Ok(MetricTriple { mae, pcc: pcc_sum / m as f64, ccc: ccc_sum / m as f64 })
}

/// Metrics for one slide at one prompt ratio. `masked` covers the spots
/// that received no prompt (the prediction targets); `all` covers every
/// spot. When every spot is prompted, `masked` falls back to `all`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SlideEval {
    pub slide_id: String,
    pub n_spots: usize,
    pub n_prompted: usize,
    pub masked: MetricTriple,
    pub all: MetricTriple,
}

/// Cohort metrics: per-slide evaluations plus unweighted means.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CohortEval {
    pub per_slide: Vec<SlideEval>,
    pub mean_masked: MetricTriple,
    pub mean_all: MetricTriple,
}

/// Evaluates the fused prediction of `params` on one slide. The prompt mask
/// is drawn from `rng`; inference mode (no dropout).
pub fn evaluate_slide(
    params: &ModelParams,
    slide: &PreparedSlide,
    prompt_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<SlideEval> {
    let (out, prompted) = forward(
        params,
        &slide.features,
        &slide.neighbors,
        &slide.slide_graph,
        &slide.neighbor_graphs,
        &slide.expr,
        prompt_ratio,
        false,
        rng,
    )?;
    let n = slide.n_spots();
    let all_rows = vec![true; n];
    let all = gene_panel_metrics(&out.p_fused, &slide.expr, &all_rows)?;
    let unprompted: Vec<bool> = prompted.iter().map(|p| !p).collect();
    let masked = if unprompted.iter().any(|u| *u) {
        gene_panel_metrics(&out.p_fused, &slide.expr, &unprompted)?
    } else {
        all
    };
    Ok(SlideEval {
        slide_id: slide.slide_id.clone(),
        n_spots: n,
        n_prompted: prompted.iter().filter(|p| **p).count(),
        masked,
        all,
    })
}

/// Evaluates a set of slides with one RNG (masks drawn in slide order).
pub fn evaluate_slides(
    params: &ModelParams,
    slides: &[PreparedSlide],
    prompt_ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<CohortEval> {
    if slides.is_empty() {
        return Err(Error::Param { name: "slides", details: "nothing to evaluate".into() });
    }
    let per_slide: Vec<SlideEval> = slides
        .iter()
        .map(|s| evaluate_slide(params, s, prompt_ratio, rng))
        .collect::<Result<_>>()?;
    let mean_masked = MetricTriple::mean(per_slide.iter().map(|s| s.masked), per_slide.len());
    let mean_all = MetricTriple::mean(per_slide.iter().map(|s| s.all), per_slide.len());
    Ok(CohortEval { per_slide, mean_masked, mean_all })
}

/// One point of a prompt-ratio sweep. `all` scores the whole slide at the
/// given ratio (prompted spots included, as when trading prompt coverage
/// for accuracy); `masked` restricts to unprompted spots.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepPoint {
    pub ratio: f64,
    pub all: MetricTriple,
    pub masked: MetricTriple,
}

/// Evaluates `params` at each prompt ratio. Every ratio reseeds the mask
/// stream identically, so kept sets are nested across ratios and the
/// comparison isolates the effect of prompt quantity.
pub fn prompt_ratio_sweep(
    params: &ModelParams,
    slides: &[PreparedSlide],
    ratios: &[f64],
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    if ratios.is_empty() {
        return Err(Error::Param { name: "ratios", details: "empty sweep".into() });
    }
    ratios
        .iter()
        .map(|&ratio| {
            let mut rng = seeded(seed, streams::EVAL_MASK);
            let cohort = evaluate_slides(params, slides, ratio, &mut rng)?;
            Ok(SweepPoint { ratio, all: cohort.mean_all, masked: cohort.mean_masked })
        })
        .collect()
}

/// Writes sweep results as `ratio,mae,pcc,ccc` CSV (whole-slide metrics).
pub fn write_sweep_csv(points: &[SweepPoint], path: &Path) -> Result<()> {
    let mut out = String::from("ratio,mae,pcc,ccc\n");
    for p in points {
        out.push_str(&format!("{},{},{},{}\n", p.ratio, p.all.mae, p.all.pcc, p.all.ccc));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A standalone evaluation run, as written to `eval.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: String,
    pub prompt_ratio: f64,
    pub seed: u64,
    pub genes: Vec<String>,
    pub results: CohortEval,
}

/// Cross-validation settings. The model config's `d_feat`/`n_genes` are
/// overridden per fold from the data and the selected gene panel.
#[derive(Clone, Debug)]
pub struct CvOptions {
    pub hvg_k: usize,
    pub hvg_criterion: HvgCriterion,
    pub graph: GraphConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub seed: u64,
    /// Worker threads for fold-level parallelism (folds are independent;
    /// results are merged in fold order, so the output is identical for
    /// any thread count).
    pub jobs: usize,
}

/// One leave-one-patient-out fold.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub test_patient: String,
    pub val_patient: String,
    pub gene_names: Vec<String>,
    pub best_epoch: usize,
    pub best_val_pcc: f64,
    pub epochs_run: usize,
    pub test: CohortEval,
}

/// Full cross-validation result.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CvSummary {
    pub seed: u64,
    pub n_patients: usize,
    pub folds: Vec<FoldReport>,
    pub mean_test_masked: MetricTriple,
    pub mean_test_all: MetricTriple,
}

/// Leave-one-patient-out cross-validation. Patients are sorted by id; fold
/// `i` tests patient `i` and uses patient `(i+1) mod P` for early-stopping
/// validation. With only two patients the validation patient coincides
/// with the single training patient. Gene selection runs on the training
/// bundles of each fold only.
pub fn cross_validate(cohort: &[SlideBundle], opts: &CvOptions) -> Result<CvSummary> {
    opts.graph.validate()?;
    opts.train.validate()?;
    let patients: Vec<String> = cohort
        .iter()
        .map(|b| b.patient_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let p = patients.len();
    if p < 2 {
        return Err(Error::Validation(format!(
            "cross-validation needs at least 2 patients, found {p}"
        )));
    }
    let fold_ids: Vec<usize> = (0..p).collect();
    let jobs = opts.jobs.max(1).min(p);
    let mut folds: Vec<Option<FoldReport>> = vec![None; p];
    if jobs == 1 {
        for &i in &fold_ids {
            folds[i] = Some(run_fold(cohort, &patients, i, opts)?);
        }
    } else {
        let patients_ref: &[String] = &patients;
        let results = std::thread::scope(|scope| {
            let handles: Vec<_> = fold_ids
                .chunks(p.div_ceil(jobs))
                .map(|chunk| {
                    scope.spawn(move || {
                        chunk
                            .iter()
                            .map(|&i| run_fold(cohort, patients_ref, i, opts).map(|f| (i, f)))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("fold worker panicked"))
                .collect::<Result<Vec<_>>>()
        })?;
        for (i, fold) in results.into_iter().flatten() {
            folds[i] = Some(fold);
        }
    }
    let folds: Vec<FoldReport> = folds.into_iter().map(|f| f.expect("fold computed")).collect();
    let mean_test_masked =
        MetricTriple::mean(folds.iter().map(|f| f.test.mean_masked), folds.len());
    let mean_test_all = MetricTriple::mean(folds.iter().map(|f| f.test.mean_all), folds.len());
    Ok(CvSummary {
        seed: opts.seed,
        n_patients: p,
        folds,
        mean_test_masked,
        mean_test_all,
    })
}

fn run_fold(
    cohort: &[SlideBundle],
    patients: &[String],
    fold: usize,
    opts: &CvOptions,
) -> Result<FoldReport> {
    let p = patients.len();
    let test_patient = &patients[fold];
    let val_patient = &patients[(fold + 1) % p];
    let is_train = |b: &&SlideBundle| {
        if p == 2 {
            b.patient_id != *test_patient
        } else {
            b.patient_id != *test_patient && b.patient_id != *val_patient
        }
    };
    let train_bundles: Vec<&SlideBundle> = cohort.iter().filter(is_train).collect();
    let val_bundles: Vec<&SlideBundle> =
        cohort.iter().filter(|b| b.patient_id == *val_patient).collect();
    let test_bundles: Vec<&SlideBundle> =
        cohort.iter().filter(|b| b.patient_id == *test_patient).collect();
    if train_bundles.is_empty() || val_bundles.is_empty() || test_bundles.is_empty() {
        return Err(Error::Validation(format!(
            "fold {fold}: empty train/val/test split"
        )));
    }

    let owned_train: Vec<SlideBundle> = train_bundles.iter().map(|b| (*b).clone()).collect();
    let genes = select_hvg(&owned_train, opts.hvg_k, opts.hvg_criterion)?;
    let mut model_cfg = opts.model.clone();
    model_cfg.d_feat = owned_train[0].feature_dim();
    model_cfg.n_genes = genes.len();

    let prep = |bundles: &[&SlideBundle]| -> Result<Vec<PreparedSlide>> {
        let owned: Vec<SlideBundle> = bundles.iter().map(|b| (*b).clone()).collect();
        prepare_slides(&owned, &genes, &opts.graph)
    };
    let train_slides = prep(&train_bundles)?;
    let val_slides = prep(&val_bundles)?;
    let test_slides = prep(&test_bundles)?;
    let gene_names = train_slides[0].gene_names.clone();

    let fold_seed = opts.seed.wrapping_add(fold as u64);
    let result = fit(&FitOptions {
        model: &model_cfg,
        train: &opts.train,
        train_slides: &train_slides,
        val_slides: &val_slides,
        seed: fold_seed,
        history_path: None,
    })?;

    let mut eval_rng = seeded(fold_seed, streams::EVAL_MASK);
    let test = evaluate_slides(
        &result.params,
        &test_slides,
        opts.train.eval_prompt_ratio,
        &mut eval_rng,
    )?;
    Ok(FoldReport {
        fold,
        test_patient: test_patient.clone(),
        val_patient: val_patient.clone(),
        gene_names,
        best_epoch: result.best_epoch,
        best_val_pcc: result.best_val_pcc,
        epochs_run: result.epochs_run,
        test,
    })
}

/// Serializes a cross-validation summary deterministically (stable field
/// order and float formatting, so identical runs yield identical bytes).
pub fn write_cv_summary(summary: &CvSummary, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(summary)
        .map_err(|e| Error::Validation(format!("serializing summary: {e}")))?;
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(json.as_bytes()).map_err(|e| Error::io(path, e))?;
    file.write_all(b"\n").map_err(|e| Error::io(path, e))
}
