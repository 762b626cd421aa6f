//! Training: Adam with bias correction, a step-decay learning-rate
//! schedule computed in exact decimal arithmetic, and the epoch loop with
//! validation-PCC early stopping.

use crate::error::{Error, Result};
use crate::eval::evaluate_slides;
use crate::model::{
    forward_on_tape, loss_on_tape, mask_expression, ModelConfig, ModelParams, SlideInputs,
};
use crate::pipeline::PreparedSlide;
use crate::rng::{seeded, streams, train_stream};
use crate::tensor::Tape;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Optimization schedule and objective settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Epoch budget (an epoch visits every training slide once).
    pub epochs: usize,
    /// Base learning rate.
    pub lr: f64,
    /// Epochs between learning-rate decays.
    pub lr_decay_every: usize,
    /// Multiplicative decay factor.
    pub lr_decay: f64,
    /// Epochs without validation-PCC improvement before stopping.
    pub patience: usize,
    /// Prompt-term weight of the composite objective. Accepted over
    /// `[0, 1]`; see [`crate::model::compute_loss`] for why the value
    /// cannot change the loss.
    pub lambda: f64,
    /// Fraction of spots revealed as prompts during training.
    pub prompt_ratio: f64,
    /// Fraction of spots revealed as prompts during validation/testing.
    pub eval_prompt_ratio: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 1e-4,
            lr_decay_every: 50,
            lr_decay: 0.9,
            patience: 20,
            lambda: 0.3,
            prompt_ratio: 0.3,
            eval_prompt_ratio: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Param { name: "epochs", details: "must be positive".into() });
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::Param { name: "lr", details: format!("{} must be positive", self.lr) });
        }
        if self.lr_decay_every == 0 {
            return Err(Error::Param {
                name: "lr_decay_every",
                details: "must be positive".into(),
            });
        }
        if !self.lr_decay.is_finite() || self.lr_decay <= 0.0 || self.lr_decay > 1.0 {
            return Err(Error::Param {
                name: "lr_decay",
                details: format!("{} outside (0, 1]", self.lr_decay),
            });
        }
        for (name, v) in [
            ("lambda", self.lambda),
            ("prompt_ratio", self.prompt_ratio),
            ("eval_prompt_ratio", self.eval_prompt_ratio),
        ] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::Param { name, details: format!("{v} outside [0, 1]") });
            }
        }
        Ok(())
    }
}

const TWO_POW_53: f64 = 9007199254740992.0;

/// Writes `x` as `d / 10^p` with both parts exactly representable, if such
/// a short decimal exists.
fn decompose_decimal(x: f64) -> Option<(f64, u32)> {
    for p in 0..=12u32 {
        let scale = 10f64.powi(p as i32);
        let d = (x * scale).round();
        if d >= 0.0 && d < TWO_POW_53 && d / scale == x {
            return Some((d, p));
        }
    }
    None
}

/// Learning rate at `epoch`: `lr * decay^(epoch / every)`. When `lr` and
/// the decay factor are short decimals the power is evaluated as one exact
/// rational with a single final division, so the schedule lands on the
/// exact decimal literals (1e-4 -> 9e-5 -> 8.1e-5 -> ...) rather than on
/// drifting repeated products.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    let k = (epoch / cfg.lr_decay_every) as i32;
    if k == 0 {
        return cfg.lr;
    }
    if let (Some((ln, lp)), Some((dn, dp))) =
        (decompose_decimal(cfg.lr), decompose_decimal(cfg.lr_decay))
    {
        let pow = dn.powi(k);
        let num = ln * pow;
        let den_pow = lp + dp * k as u32;
        // 10^22 is the largest exactly representable power of ten.
        if pow < TWO_POW_53 && num < TWO_POW_53 && den_pow <= 22 {
            return num / 10f64.powi(den_pow as i32);
        }
    }
    cfg.lr * cfg.lr_decay.powi(k)
}

/// In-place Adam update for one tensor. `t` is the 1-based step count.
fn adam_update(p: &mut [f64], m: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, t: u64) {
    let bc1 = 1.0 - BETA1.powi(t as i32);
    let bc2 = 1.0 - BETA2.powi(t as i32);
    for i in 0..p.len() {
        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Adam moment buffers, aligned with [`ModelParams::visit`] order.
#[derive(Clone, Debug)]
pub struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let shapes: Vec<usize> = params.visit().iter().map(|(_, t)| t.numel()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
        }
    }

    /// One optimizer step. `grads` must align with the visit order; any
    /// non-finite gradient aborts with a numerical error.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Vec<f64>], lr: f64) -> Result<()> {
        let mut entries = params.visit_mut();
        if grads.len() != entries.len() {
            return Err(Error::Dim {
                op: "adam_step",
                details: format!("{} gradients for {} tensors", grads.len(), entries.len()),
            });
        }
        for ((name, tensor), g) in entries.iter().zip(grads) {
            if g.len() != tensor.data.len() {
                return Err(Error::Dim {
                    op: "adam_step",
                    details: format!("{name}: {} gradient values for {}", g.len(), tensor.data.len()),
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!("non-finite gradient in {name}")));
            }
        }
        self.t += 1;
        for (i, (_, tensor)) in entries.iter_mut().enumerate() {
            adam_update(&mut tensor.data, &mut self.m[i], &mut self.v[i], &grads[i], lr, self.t);
        }
        Ok(())
    }
}

/// Per-epoch training record.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub lr: f64,
    pub val_pcc: f64,
    pub val_ccc: f64,
    pub val_mae: f64,
}

/// Training inputs. Validation drives early stopping; pass the training
/// slides again when no held-out slides exist.
pub struct FitOptions<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub train_slides: &'a [PreparedSlide],
    pub val_slides: &'a [PreparedSlide],
    pub seed: u64,
    /// Optional CSV sink for per-epoch stats.
    pub history_path: Option<&'a Path>,
}

/// Outcome of a fit: the best-validation snapshot plus the full history.
#[derive(Clone, Debug)]
pub struct FitResult {
    pub params: ModelParams,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_pcc: f64,
    pub epochs_run: usize,
}

/// Sets each prediction head's bias to the per-gene mean of the training
/// expression, so optimization starts from the base rates instead of
/// spending steps recovering the global offset.
fn center_output_heads(params: &mut ModelParams, slides: &[PreparedSlide]) {
    let m = params.config.n_genes;
    let mut sums = vec![0.0; m];
    let mut count = 0usize;
    for slide in slides {
        let n = slide.expr.shape[0];
        for i in 0..n {
            for g in 0..m {
                sums[g] += slide.expr.data[i * m + g];
            }
        }
        count += n;
    }
    if count == 0 {
        return;
    }
    for s in &mut sums {
        *s /= count as f64;
    }
    params.head_spot.b.data.copy_from_slice(&sums);
    params.head_neighbor.b.data.copy_from_slice(&sums);
    params.head_fused.b.data.copy_from_slice(&sums);
}

/// Trains a freshly initialized model (seeded parameter init, head biases
/// centered on the training means).
pub fn fit(opts: &FitOptions) -> Result<FitResult> {
    let mut params = ModelParams::init(opts.model, opts.seed)?;
    center_output_heads(&mut params, opts.train_slides);
    fit_from(params, 0, opts)
}

/// Continues training existing parameters from `start_epoch` up to the
/// configured epoch budget. The optimizer state starts fresh; the
/// learning-rate schedule and per-step RNG streams resume at
/// `start_epoch`, so epoch numbering stays globally consistent.
pub fn fit_resumed(params: ModelParams, start_epoch: usize, opts: &FitOptions) -> Result<FitResult> {
    if params.config != *opts.model {
        return Err(Error::Config(
            "resumed parameters were built for a different model configuration".into(),
        ));
    }
    fit_from(params, start_epoch, opts)
}

fn fit_from(mut params: ModelParams, start_epoch: usize, opts: &FitOptions) -> Result<FitResult> {
    opts.model.validate()?;
    opts.train.validate()?;
    if opts.train_slides.is_empty() {
        return Err(Error::Param { name: "train_slides", details: "no training slides".into() });
    }
    if opts.val_slides.is_empty() {
        return Err(Error::Param { name: "val_slides", details: "no validation slides".into() });
    }
    let cfg = opts.train;
    let mut writer = match opts.history_path {
        Some(path) => {
            let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            f.write_all(b"epoch,train_loss,lr,val_pcc,val_ccc,val_mae\n")
                .map_err(|e| Error::io(path, e))?;
            Some((f, path))
        }
        None => None,
    };

    let mut adam = AdamState::new(&params);
    let mut history = Vec::new();
    let mut best_params = params.clone();
    let mut best_pcc = f64::NEG_INFINITY;
    let mut best_epoch = start_epoch;
    let mut since_best = 0usize;
    let mut epochs_run = 0usize;

    for epoch in start_epoch..cfg.epochs {
        let lr = lr_at(cfg, epoch);
        let mut loss_sum = 0.0;
        for (slide_idx, slide) in opts.train_slides.iter().enumerate() {
            loss_sum += train_step(&mut params, &mut adam, slide, slide_idx, epoch, lr, opts)?;
        }
        let train_loss = loss_sum / opts.train_slides.len() as f64;

        // A fixed eval stream per fit keeps the validation mask constant
        // across epochs, so PCC comparisons see only parameter changes.
        let mut eval_rng = seeded(opts.seed, streams::EVAL_MASK);
        let val = evaluate_slides(&params, opts.val_slides, cfg.eval_prompt_ratio, &mut eval_rng)?;
        let stats = EpochStats {
            epoch,
            train_loss,
            lr,
            val_pcc: val.mean_masked.pcc,
            val_ccc: val.mean_masked.ccc,
            val_mae: val.mean_masked.mae,
        };
        if let Some((f, path)) = writer.as_mut() {
            writeln!(
                f,
                "{},{},{},{},{},{}",
                stats.epoch, stats.train_loss, stats.lr, stats.val_pcc, stats.val_ccc, stats.val_mae
            )
            .map_err(|e| Error::io(path, e))?;
        }
        history.push(stats);
        epochs_run += 1;

        if stats.val_pcc > best_pcc {
            best_pcc = stats.val_pcc;
            best_params = params.clone();
            best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience.max(1) {
                break;
            }
        }
    }

    if epochs_run == 0 {
        // Epoch budget already exhausted: report the provided parameters.
        let mut eval_rng = seeded(opts.seed, streams::EVAL_MASK);
        let val = evaluate_slides(&params, opts.val_slides, cfg.eval_prompt_ratio, &mut eval_rng)?;
        best_pcc = val.mean_masked.pcc;
        best_params = params;
    }

    Ok(FitResult {
        params: best_params,
        history,
        best_epoch,
        best_val_pcc: best_pcc,
        epochs_run,
    })
}

fn train_step(
    params: &mut ModelParams,
    adam: &mut AdamState,
    slide: &PreparedSlide,
    slide_idx: usize,
    epoch: usize,
    lr: f64,
    opts: &FitOptions,
) -> Result<f64> {
    let mut rng = seeded(opts.seed, train_stream(epoch, slide_idx));
    let (y_masked, _) = mask_expression(&slide.expr, opts.train.prompt_ratio, &mut rng)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let inputs = SlideInputs {
        spot_features: &slide.features,
        neighbors: &slide.neighbors,
        slide_graph: &slide.slide_graph,
        neighbor_graphs: &slide.neighbor_graphs,
        y_masked: &y_masked,
    };
    let vars = forward_on_tape(&mut tape, &bound, opts.model, &inputs, true, &mut rng)?;
    let y = tape.constant(&slide.expr);
    let loss = loss_on_tape(&mut tape, &vars, y, opts.train.lambda)?;
    let loss_val = tape.data(loss)[0];
    if !loss_val.is_finite() {
        return Err(Error::Numerical(format!(
            "non-finite training loss at epoch {epoch} on slide {}",
            slide.slide_id
        )));
    }
    tape.backward(loss)?;
    let grads: Vec<Vec<f64>> = bound
        .flat
        .iter()
        .map(|v| match tape.grad(*v) {
            Some(g) => g.to_vec(),
            None => vec![0.0; tape.data(*v).len()],
        })
        .collect();
    adam.step(params, &grads, lr)?;
    Ok(loss_val)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic_slide, SynthConfig};
    use crate::pipeline::{prepare_slide, GraphConfig};

    #[test]
    fn lr_schedule_hits_exact_decimal_literals() {
        let cfg = TrainConfig::default();
        let expect: [(usize, f64); 7] = [
            (0, 1e-4),
            (1, 1e-4),
            (49, 1e-4),
            (50, 9e-5),
            (100, 8.1e-5),
            (150, 7.29e-5),
            (200, 6.561e-5),
        ];
        for (epoch, want) in expect {
            let got = lr_at(&cfg, epoch);
            assert_eq!(
                got.to_bits(),
                want.to_bits(),
                "epoch {epoch}: got {got:e}, want {want:e}"
            );
        }
    }

    #[test]
    fn lr_schedule_general_decays_are_monotone() {
        let cfg = TrainConfig {
            lr: 3.7e-3,
            lr_decay: 0.77,
            lr_decay_every: 10,
            ..TrainConfig::default()
        };
        let mut prev = f64::INFINITY;
        for epoch in (0..200).step_by(10) {
            let lr = lr_at(&cfg, epoch);
            assert!(lr > 0.0 && lr < prev + 1e-18);
            prev = lr;
        }
        // Binary-exact decay stays on the fallback path and is still exact.
        let half = TrainConfig { lr: 1.0, lr_decay: 0.5, lr_decay_every: 1, ..cfg };
        assert_eq!(lr_at(&half, 3), 0.125);
    }

    #[test]
    fn adam_first_step_moves_by_signed_lr() {
        let mut p = vec![1.0, -2.0];
        let mut m = vec![0.0; 2];
        let mut v = vec![0.0; 2];
        let g = vec![3.0, -0.5];
        adam_update(&mut p, &mut m, &mut v, &g, 0.01, 1);
        // First step: m_hat = g, v_hat = g^2, so the move is
        // -lr * g / (|g| + eps), essentially -lr * sign(g).
        assert!((p[0] - (1.0 - 0.01)).abs() < 1e-9);
        assert!((p[1] - (-2.0 + 0.01)).abs() < 1e-9);
    }

    #[test]
    fn adam_zero_gradient_changes_nothing() {
        let cfg = ModelConfig {
            d_feat: 3,
            n_genes: 2,
            d_model: 4,
            d_prompt: 4,
            d_attn: 4,
            heads: 2,
            blocks: 1,
            mlp_ratio: 2,
            ..ModelConfig::default()
        };
        let mut params = ModelParams::init(&cfg, 1).unwrap();
        let before: Vec<Vec<f64>> =
            params.visit().iter().map(|(_, t)| t.data.clone()).collect();
        let zero_grads: Vec<Vec<f64>> =
            params.visit().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let mut adam = AdamState::new(&params);
        adam.step(&mut params, &zero_grads, 0.1).unwrap();
        for ((_, t), b) in params.visit().iter().zip(&before) {
            assert_eq!(&t.data, b);
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradients_and_misaligned_shapes() {
        let cfg = ModelConfig {
            d_feat: 3,
            n_genes: 2,
            d_model: 4,
            d_prompt: 4,
            d_attn: 4,
            heads: 2,
            blocks: 1,
            mlp_ratio: 2,
            ..ModelConfig::default()
        };
        let mut params = ModelParams::init(&cfg, 1).unwrap();
        let mut adam = AdamState::new(&params);
        let mut grads: Vec<Vec<f64>> =
            params.visit().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        grads[0][0] = f64::NAN;
        let err = adam.step(&mut params, &grads, 0.1).unwrap_err();
        assert_eq!(err.exit_code(), 1);

        let short = vec![vec![0.0]];
        assert!(adam.step(&mut params, &short, 0.1).is_err());
    }

    #[test]
    fn adam_converges_on_a_quadratic() {
        // Minimize (x - 3)^2 from 0 by feeding the analytic gradient.
        let mut p = vec![0.0];
        let mut m = vec![0.0];
        let mut v = vec![0.0];
        for t in 1..=3000u64 {
            let g = vec![2.0 * (p[0] - 3.0)];
            adam_update(&mut p, &mut m, &mut v, &g, 0.01, t);
        }
        assert!((p[0] - 3.0).abs() < 1e-2, "converged to {}", p[0]);
    }

    fn tiny_fit_setup() -> (Vec<PreparedSlide>, ModelConfig) {
        let synth = SynthConfig {
            n_rows: 3,
            n_cols: 3,
            d: 4,
            m: 5,
            latent_dim: 2,
            noise_sigma: 0.05,
        };
        let bundle = generate_synthetic_slide(&synth, 55).unwrap();
        let slide = prepare_slide(
            &bundle,
            &[0, 1, 2, 3, 4],
            &GraphConfig { k: 3, ..Default::default() },
        )
        .unwrap();
        let model = ModelConfig {
            d_feat: 4,
            n_genes: 5,
            d_model: 8,
            d_prompt: 6,
            d_attn: 6,
            heads: 2,
            blocks: 1,
            mlp_ratio: 2,
            ..ModelConfig::default()
        };
        (vec![slide], model)
    }

    #[test]
    fn fit_reduces_training_loss_and_reproduces_bitwise() {
        let (slides, model) = tiny_fit_setup();
        let train = TrainConfig { epochs: 8, lr: 1e-2, patience: 50, ..TrainConfig::default() };
        let run = || {
            fit(&FitOptions {
                model: &model,
                train: &train,
                train_slides: &slides,
                val_slides: &slides,
                seed: 7,
                history_path: None,
            })
            .unwrap()
        };
        let a = run();
        assert_eq!(a.history.len(), 8);
        assert!(
            a.history.last().unwrap().train_loss < a.history[0].train_loss,
            "loss did not decrease: {} -> {}",
            a.history[0].train_loss,
            a.history.last().unwrap().train_loss
        );
        let b = run();
        for ((_, ta), (_, tb)) in a.params.visit().iter().zip(b.params.visit().iter()) {
            assert_eq!(ta.data, tb.data);
        }
        for (sa, sb) in a.history.iter().zip(&b.history) {
            assert_eq!(sa.train_loss.to_bits(), sb.train_loss.to_bits());
            assert_eq!(sa.val_pcc.to_bits(), sb.val_pcc.to_bits());
        }
    }

    #[test]
    fn head_centering_starts_predictions_at_gene_means() {
        let (slides, model) = tiny_fit_setup();
        let mut params = ModelParams::init(&model, 3).unwrap();
        center_output_heads(&mut params, &slides);
        let m = model.n_genes;
        let n = slides[0].expr.shape[0];
        for g in 0..m {
            let mean: f64 =
                (0..n).map(|i| slides[0].expr.data[i * m + g]).sum::<f64>() / n as f64;
            assert!((params.head_fused.b.data[g] - mean).abs() < 1e-12);
            assert!((params.head_spot.b.data[g] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn frozen_learning_stops_after_patience() {
        // lr so small the validation PCC cannot strictly improve after the
        // first epoch: training halts at patience.
        let (slides, model) = tiny_fit_setup();
        let train = TrainConfig {
            epochs: 50,
            lr: 1e-300,
            patience: 2,
            ..TrainConfig::default()
        };
        let result = fit(&FitOptions {
            model: &model,
            train: &train,
            train_slides: &slides,
            val_slides: &slides,
            seed: 9,
            history_path: None,
        })
        .unwrap();
        assert_eq!(result.epochs_run, 3); // epoch 0 best, epochs 1-2 flat
        assert_eq!(result.best_epoch, 0);
    }

    #[test]
    fn resume_continues_epoch_numbering_and_schedule() {
        let (slides, model) = tiny_fit_setup();
        let dir = tempfile::tempdir().unwrap();
        let first_csv = dir.path().join("first.csv");
        let train2 = TrainConfig { epochs: 2, patience: 50, ..TrainConfig::default() };
        let first = fit(&FitOptions {
            model: &model,
            train: &train2,
            train_slides: &slides,
            val_slides: &slides,
            seed: 5,
            history_path: Some(&first_csv),
        })
        .unwrap();
        assert_eq!(first.epochs_run, 2);
        let text = std::fs::read_to_string(&first_csv).unwrap();
        assert!(text.starts_with("epoch,train_loss,lr,val_pcc,val_ccc,val_mae\n"));
        assert_eq!(text.lines().count(), 3);

        let train4 = TrainConfig { epochs: 4, patience: 50, ..TrainConfig::default() };
        let resumed_csv = dir.path().join("resumed.csv");
        let resumed = fit_resumed(
            first.params.clone(),
            2,
            &FitOptions {
                model: &model,
                train: &train4,
                train_slides: &slides,
                val_slides: &slides,
                seed: 5,
                history_path: Some(&resumed_csv),
            },
        )
        .unwrap();
        assert_eq!(resumed.epochs_run, 2);
        let epochs: Vec<usize> = resumed.history.iter().map(|s| s.epoch).collect();
        assert_eq!(epochs, vec![2, 3]);
        let text = std::fs::read_to_string(&resumed_csv).unwrap();
        assert!(text.lines().nth(1).unwrap().starts_with("2,"));

        // Budget already exhausted: nothing runs, parameters pass through.
        let done = fit_resumed(
            first.params.clone(),
            4,
            &FitOptions {
                model: &model,
                train: &train4,
                train_slides: &slides,
                val_slides: &slides,
                seed: 5,
                history_path: None,
            },
        )
        .unwrap();
        assert_eq!(done.epochs_run, 0);
        for ((_, ta), (_, tb)) in done.params.visit().iter().zip(first.params.visit().iter()) {
            assert_eq!(ta.data, tb.data);
        }
    }

    #[test]
    fn exploding_targets_raise_a_numerical_error() {
        let (mut slides, model) = tiny_fit_setup();
        for v in &mut slides[0].expr.data {
            *v = 1e200;
        }
        let train = TrainConfig { epochs: 1, ..TrainConfig::default() };
        let err = fit(&FitOptions {
            model: &model,
            train: &train,
            train_slides: &slides,
            val_slides: &slides,
            seed: 1,
            history_path: None,
        })
        .unwrap_err();
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn resume_rejects_mismatched_configs() {
        let (slides, model) = tiny_fit_setup();
        let params = ModelParams::init(&model, 1).unwrap();
        let other = ModelConfig { d_model: 16, d_attn: 16, d_prompt: 16, ..model.clone() };
        let train = TrainConfig::default();
        let err = fit_resumed(
            params,
            0,
            &FitOptions {
                model: &other,
                train: &train,
                train_slides: &slides,
                val_slides: &slides,
                seed: 1,
                history_path: None,
            },
        )
        .unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
