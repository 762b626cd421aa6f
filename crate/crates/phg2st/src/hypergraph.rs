//! Hypergraph construction from spot affinities and spectral-style
//! hypergraph convolution.
//!
//! Each spot spawns one hyperedge containing itself and its `k` nearest
//! neighbors under a combined feature + position affinity. Convolution
//! applies the propagation operator
//! `D_v^{-1/2} M W D_e^{-1} M^T D_v^{-1/2}` (with `M` the boolean incidence
//! matrix, `W` the diagonal edge weights, `D_v` the weighted node degrees
//! and `D_e` the edge cardinalities) followed by a learned linear map.

use crate::data::NeighborTensor;
use crate::error::{Error, Result};
use crate::tensor::{Tape, TensorData, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Minimum hyperedge weight; keeps degenerate edges from zeroing degrees.
pub const MIN_EDGE_WEIGHT: f64 = 1e-3;

/// What a pairwise affinity matrix measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AffinityKind {
    Feature,
    Positional,
    Combined,
}

/// Symmetric pairwise distances with zero diagonal, row-major `[n, n]`.
#[derive(Clone, Debug)]
pub struct AffinityMatrix {
    pub n: usize,
    pub values: Vec<f64>,
    pub kind: AffinityKind,
}

impl AffinityMatrix {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }
}

/// How raw affinities are rescaled before being combined.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormMode {
    /// Min-max over off-diagonal entries to `[0, 1]` (default).
    Minmax,
    /// Z-score over off-diagonal entries.
    Zscore,
    /// Each row divided by its off-diagonal sum.
    Rowstochastic,
}

/// How hyperedge weights derive from combined affinities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMode {
    /// `1 - mean(combined distance to members)`, clamped to
    /// `[MIN_EDGE_WEIGHT, 1]` — closer neighborhoods couple harder (default).
    Affinity,
    /// The mean combined distance itself, clamped below at
    /// `MIN_EDGE_WEIGHT` — the literal "distance as weight" reading.
    Distance,
}

/// Euclidean distances between feature rows of an `[n, d]` matrix.
pub fn pairwise_feature_distance(features: &TensorData) -> Result<AffinityMatrix> {
    if features.shape.len() != 2 || features.shape[0] < 2 {
        return Err(Error::Param {
            name: "features",
            details: format!("need an [n>=2, d] matrix, got {:?}", features.shape),
        });
    }
    let (n, d) = (features.shape[0], features.shape[1]);
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut s = 0.0;
            for t in 0..d {
                let diff = features.data[i * d + t] - features.data[j * d + t];
                s += diff * diff;
            }
            let dist = s.sqrt();
            values[i * n + j] = dist;
            values[j * n + i] = dist;
        }
    }
    Ok(AffinityMatrix { n, values, kind: AffinityKind::Feature })
}

/// Euclidean distances between spot centers after per-axis min-max
/// normalization to `[0, 1]`; a degenerate axis (all equal) contributes 0.
pub fn pairwise_position_distance(coords: &[[f64; 2]]) -> Result<AffinityMatrix> {
    let n = coords.len();
    if n < 2 {
        return Err(Error::Param {
            name: "coords",
            details: format!("need at least 2 spots, got {n}"),
        });
    }
    let mut norm = vec![[0.0f64; 2]; n];
    for axis in 0..2 {
        let lo = coords.iter().map(|c| c[axis]).fold(f64::INFINITY, f64::min);
        let hi = coords.iter().map(|c| c[axis]).fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            for (dst, src) in norm.iter_mut().zip(coords) {
                dst[axis] = (src[axis] - lo) / (hi - lo);
            }
        }
    }
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = norm[i][0] - norm[j][0];
            let dy = norm[i][1] - norm[j][1];
            let dist = (dx * dx + dy * dy).sqrt();
            values[i * n + j] = dist;
            values[j * n + i] = dist;
        }
    }
    Ok(AffinityMatrix { n, values, kind: AffinityKind::Positional })
}

/// Rescale off-diagonal entries per `mode`; the diagonal stays zero.
pub fn normalize_affinity(a: &AffinityMatrix, mode: NormMode) -> AffinityMatrix {
    let n = a.n;
    let mut values = a.values.clone();
    match mode {
        NormMode::Minmax => {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        lo = lo.min(a.get(i, j));
                        hi = hi.max(a.get(i, j));
                    }
                }
            }
            for i in 0..n {
                for j in 0..n {
                    values[i * n + j] = if i == j || hi <= lo {
                        0.0
                    } else {
                        (a.get(i, j) - lo) / (hi - lo)
                    };
                }
            }
        }
        NormMode::Zscore => {
            let count = (n * n - n) as f64;
            let mut sum = 0.0;
            let mut sumsq = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        sum += a.get(i, j);
                        sumsq += a.get(i, j) * a.get(i, j);
                    }
                }
            }
            let mean = sum / count;
            let sd = (sumsq / count - mean * mean).max(0.0).sqrt();
            for i in 0..n {
                for j in 0..n {
                    values[i * n + j] = if i == j || sd == 0.0 {
                        0.0
                    } else {
                        (a.get(i, j) - mean) / sd
                    };
                }
            }
        }
        NormMode::Rowstochastic => {
            for i in 0..n {
                let row_sum: f64 = (0..n).filter(|&j| j != i).map(|j| a.get(i, j)).sum();
                for j in 0..n {
                    values[i * n + j] = if i == j || row_sum == 0.0 {
                        0.0
                    } else {
                        a.get(i, j) / row_sum
                    };
                }
            }
        }
    }
    AffinityMatrix { n, values, kind: AffinityKind::Combined }
}

/// One hyperedge: sorted member node indices plus a positive weight.
#[derive(Clone, Debug)]
pub struct Edge {
    pub members: Vec<usize>,
    pub weight: f64,
}

/// A hypergraph over `n_nodes` nodes with its precomputed propagation
/// operator.
#[derive(Clone, Debug)]
pub struct Hypergraph {
    pub n_nodes: usize,
    pub edges: Vec<Edge>,
    prop: TensorData,
}

impl Hypergraph {
    /// Build from an explicit edge list. Every node must appear in at least
    /// one edge; weights must be positive and finite. Members are sorted and
    /// deduplicated.
    pub fn from_edges(n_nodes: usize, mut edges: Vec<Edge>) -> Result<Self> {
        if n_nodes == 0 || edges.is_empty() {
            return Err(Error::Param {
                name: "edges",
                details: "need at least one node and one edge".into(),
            });
        }
        let mut covered = vec![false; n_nodes];
        for e in &mut edges {
            e.members.sort_unstable();
            e.members.dedup();
            if e.members.is_empty() {
                return Err(Error::Param { name: "edges", details: "empty hyperedge".into() });
            }
            if *e.members.last().unwrap() >= n_nodes {
                return Err(Error::Param {
                    name: "edges",
                    details: format!(
                        "member {} out of {n_nodes} nodes",
                        e.members.last().unwrap()
                    ),
                });
            }
            if !(e.weight > 0.0 && e.weight.is_finite()) {
                return Err(Error::Param {
                    name: "edges",
                    details: format!("weight {} must be positive and finite", e.weight),
                });
            }
            for &m in &e.members {
                covered[m] = true;
            }
        }
        if let Some(orphan) = covered.iter().position(|c| !c) {
            return Err(Error::Param {
                name: "edges",
                details: format!("node {orphan} belongs to no hyperedge"),
            });
        }
        let prop = propagation_matrix(n_nodes, &edges);
        Ok(Hypergraph { n_nodes, edges, prop })
    }

    pub fn n_edges(&self) -> usize {
        self.edges.len()
    }

    /// Number of hyperedges containing node `i` (unweighted count).
    pub fn node_degree(&self, i: usize) -> usize {
        self.edges.iter().filter(|e| e.members.binary_search(&i).is_ok()).count()
    }

    /// Number of nodes in edge `e`.
    pub fn edge_degree(&self, e: usize) -> usize {
        self.edges[e].members.len()
    }

    /// The `[n, n]` propagation operator.
    pub fn propagation(&self) -> &TensorData {
        &self.prop
    }
}

/// Assemble `D_v^{-1/2} M W D_e^{-1} M^T D_v^{-1/2}` entrywise:
/// `P[i][j] = sum_e 1[i in e] 1[j in e] w_e / (|e| sqrt(dv_i) sqrt(dv_j))`
/// with weighted node degrees `dv_i = sum_{e: i in e} w_e`.
fn propagation_matrix(n: usize, edges: &[Edge]) -> TensorData {
    let mut dv = vec![0.0; n];
    for e in edges {
        for &m in &e.members {
            dv[m] += e.weight;
        }
    }
    let inv_sqrt: Vec<f64> = dv.iter().map(|d| 1.0 / d.sqrt()).collect();
    let mut prop = TensorData::zeros(&[n, n]);
    for e in edges {
        let contrib = e.weight / e.members.len() as f64;
        for &i in &e.members {
            for &j in &e.members {
                prop.data[i * n + j] += contrib;
            }
        }
    }
    for i in 0..n {
        for j in 0..n {
            prop.data[i * n + j] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    prop
}

/// K-nearest-neighbor hyperedges from feature and position affinities.
/// Both inputs are normalized per `norm_mode`, summed, and each node grows
/// one edge over itself plus its `k` lowest-affinity partners (ties resolve
/// toward the lower index).
pub fn build_incidence(
    sim: &AffinityMatrix,
    pos: &AffinityMatrix,
    k: usize,
    weight_mode: WeightMode,
    norm_mode: NormMode,
) -> Result<Hypergraph> {
    if sim.n != pos.n {
        return Err(Error::Dim {
            op: "build_incidence",
            details: format!("feature affinity is {0}x{0}, position {1}x{1}", sim.n, pos.n),
        });
    }
    let n = sim.n;
    if k == 0 || k >= n {
        return Err(Error::Param {
            name: "k",
            details: format!("need 1 <= k <= n-1 (n = {n}), got {k}"),
        });
    }
    let sim_n = normalize_affinity(sim, norm_mode);
    let pos_n = normalize_affinity(pos, norm_mode);
    let combined: Vec<f64> =
        sim_n.values.iter().zip(&pos_n.values).map(|(a, b)| a + b).collect();

    let edges = (0..n)
        .map(|i| {
            let mut others: Vec<usize> = (0..n).filter(|&j| j != i).collect();
            others.sort_by(|&a, &b| {
                combined[i * n + a]
                    .partial_cmp(&combined[i * n + b])
                    .unwrap()
                    .then(a.cmp(&b))
            });
            let nearest = &others[..k];
            let mean_dist =
                nearest.iter().map(|&j| combined[i * n + j]).sum::<f64>() / k as f64;
            let weight = match weight_mode {
                WeightMode::Affinity => (1.0 - mean_dist).clamp(MIN_EDGE_WEIGHT, 1.0),
                WeightMode::Distance => mean_dist.max(MIN_EDGE_WEIGHT),
            };
            let mut members = vec![i];
            members.extend_from_slice(nearest);
            Edge { members, weight }
        })
        .collect();
    Hypergraph::from_edges(n, edges)
}

/// Build one 25-node hypergraph per spot over its neighborhood tokens.
/// Valid tokens connect to their `k` nearest valid peers (falling back to
/// however many exist); invalid (border-padding) tokens receive a self-only
/// edge at the minimum weight so that convolution passes zeros through
/// without coupling them to tissue.
pub fn build_neighbor_subhypergraphs(
    neighbors: &NeighborTensor,
    k: usize,
    weight_mode: WeightMode,
    norm_mode: NormMode,
) -> Result<Vec<Hypergraph>> {
    if k == 0 || k >= NeighborTensor::SLOTS {
        return Err(Error::Param {
            name: "k",
            details: format!("need 1 <= k <= 24, got {k}"),
        });
    }
    let slots = NeighborTensor::SLOTS;
    // Token positions on the fixed 5x5 offset grid.
    let grid_pos: Vec<[f64; 2]> =
        (0..slots).map(|s| [(s / 5) as f64, (s % 5) as f64]).collect();

    (0..neighbors.n)
        .map(|i| {
            let tokens = neighbors.tokens_of(i);
            let valid: Vec<usize> =
                (0..slots).filter(|&s| neighbors.is_valid(i, s)).collect();
            let sim = pairwise_feature_distance(&tokens)?;
            let pos = pairwise_position_distance(&grid_pos)?;
            let sim_n = normalize_affinity(&sim, norm_mode);
            let pos_n = normalize_affinity(&pos, norm_mode);
            let combined: Vec<f64> =
                sim_n.values.iter().zip(&pos_n.values).map(|(a, b)| a + b).collect();

            let edges = (0..slots)
                .map(|s| {
                    if !neighbors.is_valid(i, s) {
                        return Edge { members: vec![s], weight: MIN_EDGE_WEIGHT };
                    }
                    let mut peers: Vec<usize> =
                        valid.iter().copied().filter(|&j| j != s).collect();
                    peers.sort_by(|&a, &b| {
                        combined[s * slots + a]
                            .partial_cmp(&combined[s * slots + b])
                            .unwrap()
                            .then(a.cmp(&b))
                    });
                    let take = k.min(peers.len());
                    let nearest = &peers[..take];
                    let weight = if take == 0 {
                        MIN_EDGE_WEIGHT
                    } else {
                        let mean_dist = nearest
                            .iter()
                            .map(|&j| combined[s * slots + j])
                            .sum::<f64>()
                            / take as f64;
                        match weight_mode {
                            WeightMode::Affinity => {
                                (1.0 - mean_dist).clamp(MIN_EDGE_WEIGHT, 1.0)
                            }
                            WeightMode::Distance => mean_dist.max(MIN_EDGE_WEIGHT),
                        }
                    };
                    let mut members = vec![s];
                    members.extend_from_slice(nearest);
                    Edge { members, weight }
                })
                .collect();
            Hypergraph::from_edges(slots, edges)
        })
        .collect()
}

/// Hypergraph convolution: propagate `x` through the hypergraph operator and
/// apply the learned map `theta`.
pub fn hypergraph_conv(tape: &mut Tape, x: Var, hg: &Hypergraph, theta: Var) -> Result<Var> {
    if tape.shape(x).len() != 2 || tape.shape(x)[0] != hg.n_nodes {
        return Err(Error::Dim {
            op: "hypergraph_conv",
            details: format!(
                "input {:?} does not match {} hypergraph nodes",
                tape.shape(x),
                hg.n_nodes
            ),
        });
    }
    let xt = tape.matmul(x, theta)?;
    let p = tape.constant(hg.propagation());
    tape.matmul(p, xt)
}

/// Full convolution block: `Dropout(LayerNorm(ReLU(conv(x))))`.
#[allow(clippy::too_many_arguments)]
pub fn conv_block(
    tape: &mut Tape,
    x: Var,
    hg: &Hypergraph,
    theta: Var,
    ln_gain: Var,
    ln_bias: Var,
    ln_eps: f64,
    p_drop: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let conv = hypergraph_conv(tape, x, hg, theta)?;
    let act = tape.relu(conv);
    let normed = tape.layer_norm(act, ln_gain, ln_bias, ln_eps)?;
    tape.dropout(normed, p_drop, training, rng)
}
