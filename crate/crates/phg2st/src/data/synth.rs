//! Synthetic slide generator.
//!
//! Spots sit on a full rectangular grid. A smooth latent tissue field (a
//! small mixture of low-frequency cosines per latent channel) drives both
//! the per-spot feature vectors and the expression targets through fixed
//! linear maps, so expression is recoverable from features up to the
//! configured noise. The linear maps are derived from `map_seed` and shared
//! across a cohort, while each slide draws its own latent field, mimicking
//! shared biology across patients with per-slide tissue morphology.
//!
//! Counts are constructed to make the standard CPM log transform exact: the
//! target log-expression `t` is converted to a count `round((e^t - 1) * 1e9)`
//! and a final padding gene tops every spot up to a total of `1e15`, so that
//! `count * 1e6 / total = count / 1e9` and the normalized value recovers `t`
//! to within `5e-10` of rounding error.

use super::SlideBundle;
use crate::error::{Error, Result};
use crate::rng::{seeded, streams};
use crate::tensor::TensorData;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Deserialize;

/// Count scale: one unit of `e^t - 1` becomes this many counts.
const COUNT_SCALE: f64 = 1e9;
/// Fixed per-spot count total (`1e6 * COUNT_SCALE`), exact in f64.
const SPOT_TOTAL: u64 = 1_000_000_000_000_000;
/// Log-expression targets are clamped into `[0, T_MAX]`.
const T_MAX: f64 = 8.0;
/// Nominal spot pitch in pixels (224 px image patches).
const SPOT_PITCH: f64 = 224.0;

#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_rows: usize,
    pub n_cols: usize,
    /// Feature dimension per spot.
    pub d: usize,
    /// Number of signal genes (a padding gene is appended on top).
    pub m: usize,
    /// Latent tissue field channels.
    pub latent_dim: usize,
    /// Standard deviation of Gaussian noise added to features and to the
    /// log-expression targets.
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig { n_rows: 10, n_cols: 10, d: 16, m: 20, latent_dim: 6, noise_sigma: 0.1 }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_rows == 0 || self.n_cols == 0 || self.n_rows * self.n_cols < 2 {
            return Err(Error::Param {
                name: "n_rows/n_cols",
                details: format!("grid {}x{} has fewer than 2 spots", self.n_rows, self.n_cols),
            });
        }
        if self.d == 0 || self.m == 0 || self.latent_dim == 0 {
            return Err(Error::Param {
                name: "d/m/latent_dim",
                details: "dimensions must be positive".into(),
            });
        }
        // Keeps total signal counts under the fixed spot total (e^8 per gene).
        if self.m > 300 {
            return Err(Error::Param {
                name: "m",
                details: format!("at most 300 signal genes supported, got {}", self.m),
            });
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Param {
                name: "noise_sigma",
                details: format!("must be finite and >= 0, got {}", self.noise_sigma),
            });
        }
        Ok(())
    }
}

/// One slide with `map_seed == field_seed == seed`.
pub fn generate_synthetic_slide(cfg: &SynthConfig, seed: u64) -> Result<SlideBundle> {
    generate_slide_with_maps(cfg, seed, seed, 0).map(|(b, _)| b)
}

/// Like [`generate_synthetic_slide`], also returning the `[n, latent_dim]`
/// latent field (used by tests and diagnostics to verify linearity).
pub fn generate_synthetic_slide_with_latent(
    cfg: &SynthConfig,
    seed: u64,
) -> Result<(SlideBundle, TensorData)> {
    generate_slide_with_maps(cfg, seed, seed, 0)
}

/// A multi-patient cohort sharing one set of generative maps. Slide
/// `s` of patient `p` gets ids `P{p:02}` / `P{p:02}_S{s:02}`.
pub fn generate_cohort(
    cfg: &SynthConfig,
    n_patients: usize,
    slides_per_patient: usize,
    base_seed: u64,
) -> Result<Vec<SlideBundle>> {
    if n_patients == 0 || slides_per_patient == 0 {
        return Err(Error::Param {
            name: "n_patients/slides_per_patient",
            details: "must be positive".into(),
        });
    }
    let mut out = Vec::with_capacity(n_patients * slides_per_patient);
    for p in 0..n_patients {
        for s in 0..slides_per_patient {
            let idx = (p * slides_per_patient + s) as u64;
            let (mut bundle, _) = generate_slide_with_maps(cfg, base_seed, base_seed, idx)?;
            bundle.patient_id = format!("P{p:02}");
            bundle.slide_id = format!("P{p:02}_S{s:02}");
            out.push(bundle);
        }
    }
    Ok(out)
}

fn generate_slide_with_maps(
    cfg: &SynthConfig,
    map_seed: u64,
    field_seed: u64,
    slide_idx: u64,
) -> Result<(SlideBundle, TensorData)> {
    cfg.validate()?;
    let n = cfg.n_rows * cfg.n_cols;
    let l = cfg.latent_dim;

    // Cohort-level maps: latent -> features and latent -> log-expression.
    let mut map_rng = seeded(map_seed, streams::SYNTH_MAPS);
    let feat_map = uniform_map(l, cfg.d, &mut map_rng);
    let expr_map = uniform_map(l, cfg.m, &mut map_rng);

    // Slide-level field and noise.
    let mut rng = seeded(field_seed, streams::SYNTH_FIELD | slide_idx);
    let latent = latent_field(cfg, &mut rng);

    let mut spot_features = latent.matmul(&feat_map)?;
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).unwrap();
        for v in &mut spot_features.data {
            *v += normal.sample(&mut rng);
        }
    }

    // Log-expression targets, then exact-total counts.
    let mut targets = latent.matmul(&expr_map)?;
    if cfg.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_sigma).unwrap();
        for v in &mut targets.data {
            *v += normal.sample(&mut rng);
        }
    }
    for v in &mut targets.data {
        *v = (*v + 0.5 * T_MAX - 0.5).clamp(0.0, T_MAX);
    }

    let m_raw = cfg.m + 1;
    let mut counts = vec![0u64; n * m_raw];
    for i in 0..n {
        let mut total = 0u64;
        for g in 0..cfg.m {
            let t = targets.get(i, g);
            let c = (t.exp_m1() * COUNT_SCALE).round() as u64;
            counts[i * m_raw + g] = c;
            total += c;
        }
        debug_assert!(total < SPOT_TOTAL);
        counts[i * m_raw + cfg.m] = SPOT_TOTAL - total;
    }

    let mut gene_names: Vec<String> = (0..cfg.m).map(|g| format!("G{g:04}")).collect();
    gene_names.push("PADDING".to_string());

    let mut coords = Vec::with_capacity(n);
    let mut grid = Vec::with_capacity(n);
    for r in 0..cfg.n_rows {
        for c in 0..cfg.n_cols {
            coords.push([
                c as f64 * SPOT_PITCH + SPOT_PITCH / 2.0,
                r as f64 * SPOT_PITCH + SPOT_PITCH / 2.0,
            ]);
            grid.push([r as i64, c as i64]);
        }
    }

    let bundle = SlideBundle {
        slide_id: format!("S{field_seed}_{slide_idx}"),
        patient_id: format!("P{field_seed}"),
        n,
        coords,
        grid,
        spot_features,
        counts,
        m_raw,
        gene_names,
    };
    bundle.validate()?;
    Ok((bundle, latent))
}

/// `[rows, cols]` matrix with entries `U(-1, 1) / sqrt(rows)`, so that a
/// latent vector with entries in `[-1, 1]` maps to roughly unit range.
fn uniform_map(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> TensorData {
    let scale = 1.0 / (rows as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
    TensorData { shape: vec![rows, cols], data }
}

/// Smooth per-channel cosine mixtures over the grid, each channel rescaled
/// to zero mean and unit max-absolute value.
fn latent_field(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> TensorData {
    let n = cfg.n_rows * cfg.n_cols;
    let mut latent = TensorData::zeros(&[n, cfg.latent_dim]);
    for ch in 0..cfg.latent_dim {
        // Three low-frequency components per channel.
        let mut comps = Vec::with_capacity(3);
        for _ in 0..3 {
            let (mut fr, mut fc) = (0u32, 0u32);
            while fr == 0 && fc == 0 {
                fr = rng.random_range(0..=2);
                fc = rng.random_range(0..=2);
            }
            let amp: f64 = rng.random_range(0.5..1.0);
            let phase: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            comps.push((fr as f64, fc as f64, amp, phase));
        }
        let mut col = vec![0.0; n];
        for r in 0..cfg.n_rows {
            for c in 0..cfg.n_cols {
                let mut v = 0.0;
                for &(fr, fc, amp, phase) in &comps {
                    let arg = std::f64::consts::TAU
                        * (fr * r as f64 / cfg.n_rows as f64 + fc * c as f64 / cfg.n_cols as f64)
                        + phase;
                    v += amp * arg.cos();
                }
                col[r * cfg.n_cols + c] = v;
            }
        }
        let mean = col.iter().sum::<f64>() / n as f64;
        for v in &mut col {
            *v -= mean;
        }
        let max_abs = col.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if max_abs > 1e-12 {
            for v in &mut col {
                *v /= max_abs;
            }
        }
        for i in 0..n {
            latent.set(i, ch, col[i]);
        }
    }
    latent
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::preprocess::normalize_counts;

    fn cfg() -> SynthConfig {
        SynthConfig { n_rows: 6, n_cols: 7, d: 5, m: 8, latent_dim: 3, noise_sigma: 0.1 }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_synthetic_slide(&cfg(), 42).unwrap();
        let b = generate_synthetic_slide(&cfg(), 42).unwrap();
        assert_eq!(a.counts, b.counts);
        assert_eq!(a.spot_features.data, b.spot_features.data);
        assert_eq!(a.coords, b.coords);
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_synthetic_slide(&cfg(), 1).unwrap();
        let b = generate_synthetic_slide(&cfg(), 2).unwrap();
        assert_ne!(a.counts, b.counts);
    }

    #[test]
    fn shapes_and_totals() {
        let c = cfg();
        let b = generate_synthetic_slide(&c, 7).unwrap();
        assert_eq!(b.n, 42);
        assert_eq!(b.spot_features.shape, vec![42, 5]);
        assert_eq!(b.m_raw, 9, "signal genes plus the padding gene");
        for i in 0..b.n {
            let total: u64 = (0..b.m_raw).map(|g| b.count(i, g)).sum();
            assert_eq!(total, SPOT_TOTAL, "spot {i} total");
        }
    }

    #[test]
    fn grid_covers_full_rectangle_with_224px_pitch() {
        let b = generate_synthetic_slide(&cfg(), 9).unwrap();
        assert_eq!(b.grid[0], [0, 0]);
        assert_eq!(b.grid[b.n - 1], [5, 6]);
        assert_eq!(b.coords[1][0] - b.coords[0][0], 224.0);
    }

    /// Solve `X beta = y` by normal equations; returns fitted values.
    fn least_squares_fit(x: &[Vec<f64>], y: &[f64]) -> Vec<f64> {
        let n = x.len();
        let p = x[0].len();
        let mut xtx = vec![vec![0.0; p]; p];
        let mut xty = vec![0.0; p];
        for i in 0..n {
            for a in 0..p {
                xty[a] += x[i][a] * y[i];
                for b in 0..p {
                    xtx[a][b] += x[i][a] * x[i][b];
                }
            }
        }
        // Gaussian elimination with partial pivoting.
        let mut aug: Vec<Vec<f64>> = xtx
            .iter()
            .zip(&xty)
            .map(|(row, rhs)| row.iter().copied().chain([*rhs]).collect())
            .collect();
        for col in 0..p {
            let piv = (col..p)
                .max_by(|&a, &b| aug[a][col].abs().partial_cmp(&aug[b][col].abs()).unwrap())
                .unwrap();
            aug.swap(col, piv);
            let pivot = aug[col][col];
            assert!(pivot.abs() > 1e-12, "singular design matrix");
            for r in 0..p {
                if r != col {
                    let f = aug[r][col] / pivot;
                    for c in col..=p {
                        aug[r][c] -= f * aug[col][c];
                    }
                }
            }
        }
        let beta: Vec<f64> = (0..p).map(|i| aug[i][p] / aug[i][i]).collect();
        x.iter().map(|row| row.iter().zip(&beta).map(|(a, b)| a * b).sum()).collect()
    }

    #[test]
    fn noiseless_expression_is_linear_in_the_latent_field() {
        let c = SynthConfig { noise_sigma: 0.0, ..cfg() };
        let (bundle, latent) = generate_synthetic_slide_with_latent(&c, 13).unwrap();
        let expr = normalize_counts(&bundle, &(0..c.m).collect::<Vec<_>>()).unwrap();

        // Design matrix: latent channels plus intercept.
        let x: Vec<Vec<f64>> = (0..bundle.n)
            .map(|i| {
                (0..c.latent_dim)
                    .map(|ch| latent.get(i, ch))
                    .chain([1.0])
                    .collect()
            })
            .collect();
        for g in 0..c.m {
            let y: Vec<f64> = (0..bundle.n).map(|i| expr.values.get(i, g)).collect();
            let fitted = least_squares_fit(&x, &y);
            let worst = y
                .iter()
                .zip(&fitted)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(worst < 1e-8, "gene {g}: least-squares residual {worst:.3e}");
        }
    }

    #[test]
    fn cohort_shares_maps_but_not_fields() {
        let c = cfg();
        let cohort = generate_cohort(&c, 2, 2, 99).unwrap();
        assert_eq!(cohort.len(), 4);
        let ids: Vec<&str> = cohort.iter().map(|b| b.slide_id.as_str()).collect();
        assert_eq!(ids, ["P00_S00", "P00_S01", "P01_S00", "P01_S01"]);
        assert_eq!(cohort[0].patient_id, "P00");
        assert_eq!(cohort[3].patient_id, "P01");
        // Different slides get different tissue.
        assert_ne!(cohort[0].counts, cohort[1].counts);
        assert_ne!(cohort[0].spot_features.data, cohort[2].spot_features.data);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = cfg();
        c.n_rows = 0;
        assert!(generate_synthetic_slide(&c, 1).is_err());
        let mut c = cfg();
        c.m = 500;
        assert!(generate_synthetic_slide(&c, 1).is_err());
        let mut c = cfg();
        c.noise_sigma = -1.0;
        assert!(generate_synthetic_slide(&c, 1).is_err());
        let mut c = cfg();
        c.noise_sigma = f64::NAN;
        assert!(generate_synthetic_slide(&c, 1).is_err());
    }
}
