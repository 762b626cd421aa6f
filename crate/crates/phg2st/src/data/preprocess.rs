//! Count normalization, highly-variable gene selection, and neighborhood
//! feature assembly.

use super::{ExpressionMatrix, NeighborTensor, SlideBundle};
use crate::error::{Error, Result};
use crate::tensor::TensorData;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// How gene variability is scored during selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HvgCriterion {
    /// Variance of log-CPM-normalized values (default).
    Lognorm,
    /// Variance of raw counts.
    Rawcount,
}

/// Library-size normalization followed by natural log:
/// `value = ln(1 + count * 1e6 / total_i)`, where `total_i` sums **all**
/// genes of spot `i` (not only the selected panel). A spot with zero total
/// becomes a zero row.
pub fn normalize_counts(bundle: &SlideBundle, selected: &[usize]) -> Result<ExpressionMatrix> {
    for &g in selected {
        if g >= bundle.m_raw {
            return Err(Error::Param {
                name: "selected",
                details: format!("gene index {g} out of {} columns", bundle.m_raw),
            });
        }
    }
    let m = selected.len();
    if m == 0 {
        return Err(Error::Param { name: "selected", details: "empty gene selection".into() });
    }
    let mut values = TensorData::zeros(&[bundle.n, m]);
    for i in 0..bundle.n {
        let total: u64 = (0..bundle.m_raw).map(|g| bundle.count(i, g)).sum();
        if total == 0 {
            continue;
        }
        let scale = 1e6 / total as f64;
        for (j, &g) in selected.iter().enumerate() {
            values.set(i, j, (bundle.count(i, g) as f64 * scale).ln_1p());
        }
    }
    Ok(ExpressionMatrix {
        values,
        gene_indices: selected.to_vec(),
        gene_names: selected.iter().map(|&g| bundle.gene_names[g].clone()).collect(),
    })
}

/// Indices of the `k` most variable genes, pooled over all spots of all
/// given bundles. Ties break toward the lexicographically smaller gene name.
/// `k` larger than the panel selects the whole panel. Returned indices are
/// ascending, so downstream column order matches the raw panel order.
pub fn select_hvg(
    bundles: &[SlideBundle],
    k: usize,
    criterion: HvgCriterion,
) -> Result<Vec<usize>> {
    if bundles.is_empty() {
        return Err(Error::Param { name: "bundles", details: "no slides given".into() });
    }
    if k == 0 {
        return Err(Error::Param { name: "k", details: "must select at least one gene".into() });
    }
    let panel = &bundles[0].gene_names;
    for b in bundles {
        if &b.gene_names != panel {
            return Err(Error::Validation(format!(
                "slide {} has a different gene panel than slide {}",
                b.slide_id, bundles[0].slide_id
            )));
        }
    }
    let m_raw = panel.len();
    let all: Vec<usize> = (0..m_raw).collect();

    // Pooled per-gene mean and variance via one streaming pass.
    let mut sum = vec![0.0; m_raw];
    let mut sumsq = vec![0.0; m_raw];
    let mut n_total = 0usize;
    for b in bundles {
        match criterion {
            HvgCriterion::Lognorm => {
                let expr = normalize_counts(b, &all)?;
                for i in 0..b.n {
                    for g in 0..m_raw {
                        let v = expr.values.get(i, g);
                        sum[g] += v;
                        sumsq[g] += v * v;
                    }
                }
            }
            HvgCriterion::Rawcount => {
                for i in 0..b.n {
                    for g in 0..m_raw {
                        let v = b.count(i, g) as f64;
                        sum[g] += v;
                        sumsq[g] += v * v;
                    }
                }
            }
        }
        n_total += b.n;
    }
    let nf = n_total as f64;
    let mut scored: Vec<(usize, f64)> = (0..m_raw)
        .map(|g| {
            let mean = sum[g] / nf;
            (g, (sumsq[g] / nf - mean * mean).max(0.0))
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap()
            .then_with(|| panel[a.0].cmp(&panel[b.0]))
    });
    let mut chosen: Vec<usize> = scored.into_iter().take(k.min(m_raw)).map(|(g, _)| g).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Build the `[n, 25, d]` neighborhood token tensor from grid positions.
pub fn assemble_neighbor_features(bundle: &SlideBundle) -> Result<NeighborTensor> {
    let d = bundle.feature_dim();
    let mut by_grid: HashMap<(i64, i64), usize> = HashMap::with_capacity(bundle.n);
    for (i, &[r, c]) in bundle.grid.iter().enumerate() {
        if by_grid.insert((r, c), i).is_some() {
            return Err(Error::Validation(format!(
                "slide {}: duplicate grid position ({r}, {c})",
                bundle.slide_id
            )));
        }
    }
    let slots = NeighborTensor::SLOTS;
    let mut values = vec![0.0; bundle.n * slots * d];
    let mut validity = vec![false; bundle.n * slots];
    for i in 0..bundle.n {
        let [r, c] = bundle.grid[i];
        for dr in -2i64..=2 {
            for dc in -2i64..=2 {
                let slot = ((dr + 2) * 5 + (dc + 2)) as usize;
                if let Some(&j) = by_grid.get(&(r + dr, c + dc)) {
                    let src = j * d;
                    let dst = (i * slots + slot) * d;
                    values[dst..dst + d]
                        .copy_from_slice(&bundle.spot_features.data[src..src + d]);
                    validity[i * slots + slot] = true;
                }
            }
        }
    }
    Ok(NeighborTensor::new(bundle.n, d, values, validity))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth::{generate_synthetic_slide, SynthConfig};
    use approx::assert_relative_eq;

    /// A tiny hand-built bundle: `counts` indexed `[spot][gene]`.
    fn bundle_from_counts(counts: Vec<Vec<u64>>, names: &[&str]) -> SlideBundle {
        let n = counts.len();
        let m_raw = names.len();
        SlideBundle {
            slide_id: "t".into(),
            patient_id: "p".into(),
            n,
            coords: (0..n).map(|i| [i as f64, 0.0]).collect(),
            grid: (0..n).map(|i| [0, i as i64]).collect(),
            spot_features: TensorData::zeros(&[n, 2]),
            counts: counts.into_iter().flatten().collect(),
            m_raw,
            gene_names: names.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn normalization_matches_hand_computed_log_cpm() {
        // One spot, two genes, total 1e6: CPM factor is exactly 1.
        let b = bundle_from_counts(vec![vec![100_000, 900_000]], &["a", "b"]);
        let e = normalize_counts(&b, &[0, 1]).unwrap();
        assert_relative_eq!(e.values.get(0, 0), 11.512935464920228, epsilon = 1e-9);
        assert_relative_eq!(e.values.get(0, 1), 13.710151153416942, epsilon = 1e-9);
    }

    #[test]
    fn normalization_is_scale_invariant() {
        let b1 = bundle_from_counts(vec![vec![3, 17, 80]], &["a", "b", "c"]);
        let b7 = bundle_from_counts(vec![vec![21, 119, 560]], &["a", "b", "c"]);
        let e1 = normalize_counts(&b1, &[0, 1, 2]).unwrap();
        let e7 = normalize_counts(&b7, &[0, 1, 2]).unwrap();
        for g in 0..3 {
            assert_relative_eq!(e1.values.get(0, g), e7.values.get(0, g), epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_total_spot_becomes_zero_row() {
        let b = bundle_from_counts(vec![vec![0, 0], vec![5, 5]], &["a", "b"]);
        let e = normalize_counts(&b, &[0, 1]).unwrap();
        assert_eq!(e.values.get(0, 0), 0.0);
        assert_eq!(e.values.get(0, 1), 0.0);
        assert!(e.values.get(1, 0) > 0.0);
    }

    #[test]
    fn totals_include_unselected_genes() {
        let b = bundle_from_counts(vec![vec![10, 990]], &["a", "b"]);
        let only_a = normalize_counts(&b, &[0]).unwrap();
        // Divisor is 1000 (both genes), not 10.
        assert_relative_eq!(
            only_a.values.get(0, 0),
            (1.0f64 + 10.0 * 1e6 / 1000.0).ln(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn out_of_range_selection_is_rejected() {
        let b = bundle_from_counts(vec![vec![1, 2]], &["a", "b"]);
        assert!(normalize_counts(&b, &[2]).is_err());
        assert!(normalize_counts(&b, &[]).is_err());
    }

    #[test]
    fn hvg_picks_most_variable_genes() {
        // Equal spot totals keep library-size effects out of the picture:
        // "flat" is then exactly constant after normalization, "wild" swings
        // hardest in log space, "mild" in between.
        let b = bundle_from_counts(
            vec![
                vec![50, 1, 149],
                vec![50, 100, 50],
                vec![50, 1, 149],
                vec![50, 120, 30],
            ],
            &["flat", "wild", "mild"],
        );
        let top1 = select_hvg(&[b.clone()], 1, HvgCriterion::Lognorm).unwrap();
        assert_eq!(top1, vec![1]);
        let top2 = select_hvg(&[b.clone()], 2, HvgCriterion::Lognorm).unwrap();
        assert_eq!(top2, vec![1, 2]);
        // Asking for more genes than exist selects the whole panel.
        let all = select_hvg(&[b], 10, HvgCriterion::Lognorm).unwrap();
        assert_eq!(all, vec![0, 1, 2]);
    }

    #[test]
    fn hvg_ties_break_by_gene_name() {
        // Every gene keeps a constant share of its spot total, so all three
        // tie at zero variance; the lexicographically smallest name wins.
        let b = bundle_from_counts(
            vec![vec![1, 10, 10], vec![9, 90, 90]],
            &["zz", "bb", "aa"],
        );
        let top = select_hvg(&[b], 1, HvgCriterion::Lognorm).unwrap();
        assert_eq!(top, vec![2], "all genes tie on variance; aa wins by name");
    }

    #[test]
    fn hvg_requires_matching_panels() {
        let a = bundle_from_counts(vec![vec![1, 2]], &["a", "b"]);
        let b = bundle_from_counts(vec![vec![1, 2]], &["a", "c"]);
        assert!(select_hvg(&[a, b], 1, HvgCriterion::Lognorm).is_err());
    }

    #[test]
    fn hvg_rawcount_criterion_scores_raw_variance() {
        // "big" has huge raw variance but a nearly constant log-CPM value;
        // "small" is the reverse. The two criteria disagree by design.
        let b = bundle_from_counts(
            vec![vec![1000, 1], vec![100_000, 3]],
            &["big", "small"],
        );
        let raw = select_hvg(&[b.clone()], 1, HvgCriterion::Rawcount).unwrap();
        assert_eq!(raw, vec![0]);
        let log = select_hvg(&[b], 1, HvgCriterion::Lognorm).unwrap();
        assert_eq!(log, vec![1]);
    }

    #[test]
    fn neighbor_tensor_validity_counts_follow_geometry() {
        let cfg = SynthConfig {
            n_rows: 10,
            n_cols: 10,
            d: 3,
            m: 4,
            latent_dim: 2,
            noise_sigma: 0.0,
        };
        let b = generate_synthetic_slide(&cfg, 1).unwrap();
        let nt = assemble_neighbor_features(&b).unwrap();

        let idx = |r: usize, c: usize| r * 10 + c;
        assert_eq!(nt.valid_count(idx(5, 5)), 25, "interior spot sees the full window");
        assert_eq!(nt.valid_count(idx(0, 0)), 9, "corner spot sees a 3x3 quadrant");
        assert_eq!(nt.valid_count(idx(0, 5)), 15, "edge spot sees a 3x5 strip");

        // Center slot holds the spot's own features.
        let i = idx(4, 7);
        assert_eq!(nt.token(i, NeighborTensor::CENTER), &b.spot_features.data[i * 3..i * 3 + 3]);
        assert!(nt.is_valid(i, NeighborTensor::CENTER));

        // Invalid slots are zero-filled.
        let corner = idx(0, 0);
        assert!(!nt.is_valid(corner, 0));
        assert_eq!(nt.token(corner, 0), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn neighbor_slots_map_grid_offsets() {
        let cfg = SynthConfig {
            n_rows: 5,
            n_cols: 5,
            d: 2,
            m: 4,
            latent_dim: 2,
            noise_sigma: 0.0,
        };
        let b = generate_synthetic_slide(&cfg, 2).unwrap();
        let nt = assemble_neighbor_features(&b).unwrap();
        let center = 2 * 5 + 2;
        // Slot 0 is offset (-2,-2): grid (0,0) -> spot 0.
        assert_eq!(nt.token(center, 0), &b.spot_features.data[0..2]);
        // Slot 24 is offset (+2,+2): grid (4,4) -> spot 24.
        assert_eq!(nt.token(center, 24), &b.spot_features.data[24 * 2..24 * 2 + 2]);
    }

    #[test]
    fn duplicate_grid_positions_are_rejected() {
        let mut b = bundle_from_counts(vec![vec![1], vec![2]], &["a"]);
        b.grid = vec![[0, 0], [0, 0]];
        assert!(assemble_neighbor_features(&b).is_err());
    }
}
