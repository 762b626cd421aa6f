//! Property tests for the invariants the rest of the system leans on.

use phg2st::data::preprocess::assemble_neighbor_features;
use phg2st::data::synth::{generate_synthetic_slide, SynthConfig};
use phg2st::data::NeighborTensor;
use phg2st::eval::{ccc, mae, pcc};
use phg2st::hypergraph::{normalize_affinity, AffinityMatrix, Edge, Hypergraph, NormMode};
use phg2st::model::mask_expression;
use phg2st::rng::{seeded, streams};
use phg2st::tensor::{Tape, TensorData};
use phg2st::train::{lr_at, TrainConfig};
use proptest::prelude::*;

fn vec_pair(max_len: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (2..=max_len).prop_flat_map(|n| {
        (
            proptest::collection::vec(-50.0..50.0f64, n),
            proptest::collection::vec(-50.0..50.0f64, n),
        )
    })
}

proptest! {
    #[test]
    fn metrics_stay_in_range((a, b) in vec_pair(64)) {
        let p = pcc(&a, &b).unwrap();
        let c = ccc(&a, &b).unwrap();
        let m = mae(&a, &b).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&p));
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c));
        prop_assert!(m >= 0.0);
        // Lin's concordance never exceeds correlation in magnitude.
        prop_assert!(c.abs() <= p.abs() + 1e-12);
    }

    #[test]
    fn pcc_is_invariant_under_positive_affine_maps(
        (a, b) in vec_pair(48),
        scale in 0.05..20.0f64,
        shift in -30.0..30.0f64,
    ) {
        let base = pcc(&a, &b).unwrap();
        let mapped: Vec<f64> = a.iter().map(|v| v * scale + shift).collect();
        let transformed = pcc(&mapped, &b).unwrap();
        prop_assert!((base - transformed).abs() < 1e-7,
            "pcc moved from {base} to {transformed}");
    }

    #[test]
    fn mae_is_translation_invariant((a, b) in vec_pair(48), shift in -30.0..30.0f64) {
        let base = mae(&a, &b).unwrap();
        let sa: Vec<f64> = a.iter().map(|v| v + shift).collect();
        let sb: Vec<f64> = b.iter().map(|v| v + shift).collect();
        prop_assert!((mae(&sa, &sb).unwrap() - base).abs() < 1e-9);
    }

    #[test]
    fn minmax_normalization_bounds_off_diagonal(
        n in 2..10usize,
        raw in proptest::collection::vec(0.0..100.0f64, 100),
    ) {
        let mut values = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                let v = raw[i * 10 + j % 10];
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        let a = AffinityMatrix {
            n,
            values,
            kind: phg2st::hypergraph::AffinityKind::Feature,
        };
        let normed = normalize_affinity(&a, NormMode::Minmax);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    let v = normed.values[i * n + j];
                    prop_assert!((0.0..=1.0).contains(&v), "off-diagonal {v} outside [0,1]");
                }
            }
        }
    }

    #[test]
    fn mask_keeps_exact_count_and_nests_across_ratios(
        n in 1..40usize,
        m in 1..6usize,
        seed in 0..500u64,
    ) {
        let expr = TensorData {
            shape: vec![n, m],
            data: (0..n * m).map(|v| v as f64 * 0.25 + 1.0).collect(),
        };
        let mut kept_sets = Vec::new();
        for ratio in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let mut rng = seeded(seed, streams::EVAL_MASK);
            let (masked, kept) = mask_expression(&expr, ratio, &mut rng).unwrap();
            let count = kept.iter().filter(|k| **k).count();
            prop_assert_eq!(count, (ratio * n as f64).floor() as usize);
            for i in 0..n {
                for j in 0..m {
                    let want = if kept[i] { expr.data[i * m + j] } else { 0.0 };
                    prop_assert_eq!(masked.data[i * m + j], want);
                }
            }
            kept_sets.push(kept);
        }
        // Reseeding per ratio shuffles identically, so kept sets nest.
        for pair in kept_sets.windows(2) {
            for i in 0..n {
                prop_assert!(!pair[0][i] || pair[1][i], "kept set not nested at spot {i}");
            }
        }
    }

    #[test]
    fn hypergraph_propagation_is_symmetric(
        n in 2..10usize,
        edge_picks in proptest::collection::vec((0..10usize, 0..10usize, 0.05..3.0f64), 1..6),
    ) {
        let mut edges: Vec<Edge> = edge_picks
            .iter()
            .map(|(a, b, w)| Edge { members: vec![a % n, b % n], weight: *w })
            .collect();
        for i in 0..n {
            edges.push(Edge { members: vec![i], weight: 1.0 });
        }
        let hg = Hypergraph::from_edges(n, edges).unwrap();
        let prop = hg.propagation();
        for i in 0..n {
            for j in 0..n {
                let a = prop.data[i * n + j];
                let b = prop.data[j * n + i];
                prop_assert!((a - b).abs() < 1e-12, "prop[{i},{j}]={a} vs prop[{j},{i}]={b}");
            }
        }
    }

    #[test]
    fn softmax_rows_are_probability_vectors(
        rows in 1..6usize,
        cols in 1..6usize,
        seedling in 0..1000u64,
    ) {
        let mut rng = seeded(seedling, streams::PARAM_INIT);
        use rand::Rng;
        let x = TensorData {
            shape: vec![rows, cols],
            data: (0..rows * cols).map(|_| rng.random_range(-30.0..30.0)).collect(),
        };
        let mut tape = Tape::new();
        let v = tape.constant(&x);
        let s = tape.softmax(v, 1).unwrap();
        let out = tape.data(s);
        for r in 0..rows {
            let row = &out[r * cols..(r + 1) * cols];
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row {r} sums to {sum}");
            prop_assert!(row.iter().all(|p| (0.0..=1.0).contains(p)));
        }
    }

    #[test]
    fn lr_schedule_is_monotone_nonincreasing(
        lr in 1e-6..1.0f64,
        decay in 0.05..1.0f64,
        every in 1..80usize,
    ) {
        let cfg = TrainConfig {
            lr,
            lr_decay: decay,
            lr_decay_every: every,
            ..TrainConfig::default()
        };
        let mut last = f64::INFINITY;
        for epoch in 0..240 {
            let now = lr_at(&cfg, epoch);
            prop_assert!(now > 0.0 && now.is_finite());
            prop_assert!(now <= last, "lr rose from {last} to {now} at epoch {epoch}");
            last = now;
        }
    }
}

#[test]
fn neighbor_tensor_validity_matches_grid_geometry() {
    let cfg = SynthConfig {
        n_rows: 6,
        n_cols: 5,
        d: 4,
        m: 5,
        latent_dim: 2,
        noise_sigma: 0.1,
    };
    let bundle = generate_synthetic_slide(&cfg, 5).unwrap();
    let neighbors = assemble_neighbor_features(&bundle).unwrap();
    for (i, rc) in bundle.grid.iter().enumerate() {
        assert!(neighbors.is_valid(i, NeighborTensor::CENTER));
        assert_eq!(
            neighbors.token(i, NeighborTensor::CENTER),
            &bundle.spot_features.data[i * bundle.feature_dim()..(i + 1) * bundle.feature_dim()],
            "center token must be the spot's own features"
        );
        // Count of in-bounds 5x5 window cells equals the valid slot count.
        let mut in_bounds = 0;
        for dr in -2i64..=2 {
            for dc in -2i64..=2 {
                let (r, c) = (rc[0] + dr, rc[1] + dc);
                if (0..cfg.n_rows as i64).contains(&r) && (0..cfg.n_cols as i64).contains(&c) {
                    in_bounds += 1;
                }
            }
        }
        assert_eq!(neighbors.valid_count(i), in_bounds, "spot {i} at {rc:?}");
    }
}
