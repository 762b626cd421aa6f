//! Glue from raw slide bundles to model-ready inputs: expression
//! normalization, affinity computation, and hypergraph construction.

use crate::data::preprocess::{assemble_neighbor_features, normalize_counts};
use crate::data::{NeighborTensor, SlideBundle};
use crate::error::Result;
use crate::hypergraph::{
    build_incidence, build_neighbor_subhypergraphs, pairwise_feature_distance,
    pairwise_position_distance, Hypergraph, NormMode, WeightMode,
};
use crate::tensor::TensorData;
use serde::{Deserialize, Serialize};

/// Hyperedge construction settings, shared by the slide-level hypergraph
/// and the per-spot neighborhood sub-hypergraphs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    /// Neighbors per hyperedge (each edge is a spot plus its `k` nearest
    /// peers under the combined affinity).
    pub k: usize,
    /// How combined affinities become edge weights.
    pub weight_mode: WeightMode,
    /// How the feature and position affinities are normalized before
    /// combination.
    pub norm_mode: NormMode,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self { k: 4, weight_mode: WeightMode::Affinity, norm_mode: NormMode::Minmax }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(crate::error::Error::Param {
                name: "k",
                details: "need at least one neighbor per hyperedge".into(),
            });
        }
        Ok(())
    }
}

/// A slide with everything the model consumes: normalized expression,
/// feature tensors, and both hypergraph levels.
#[derive(Clone, Debug)]
pub struct PreparedSlide {
    pub slide_id: String,
    pub patient_id: String,
    /// Spot features `[n, d_feat]`.
    pub features: TensorData,
    pub neighbors: NeighborTensor,
    pub slide_graph: Hypergraph,
    pub neighbor_graphs: Vec<Hypergraph>,
    /// Log-CPM expression `[n, n_genes]` over the selected panel.
    pub expr: TensorData,
    pub gene_names: Vec<String>,
}

impl PreparedSlide {
    pub fn n_spots(&self) -> usize {
        self.features.shape[0]
    }
}

/// Builds model inputs for one slide over the selected gene columns.
/// `k` is clamped to the available peer count on very small inputs (a slide
/// never links a spot to more peers than exist).
pub fn prepare_slide(
    bundle: &SlideBundle,
    gene_indices: &[usize],
    graph: &GraphConfig,
) -> Result<PreparedSlide> {
    graph.validate()?;
    bundle.validate()?;
    let expr_mat = normalize_counts(bundle, gene_indices)?;
    let sim = pairwise_feature_distance(&bundle.spot_features)?;
    let pos = pairwise_position_distance(&bundle.coords)?;
    let k_slide = graph.k.min(bundle.n.saturating_sub(1)).max(1);
    let slide_graph = build_incidence(&sim, &pos, k_slide, graph.weight_mode, graph.norm_mode)?;
    let neighbors = assemble_neighbor_features(bundle)?;
    let k_local = graph.k.min(NeighborTensor::SLOTS - 1).max(1);
    let neighbor_graphs =
        build_neighbor_subhypergraphs(&neighbors, k_local, graph.weight_mode, graph.norm_mode)?;
    Ok(PreparedSlide {
        slide_id: bundle.slide_id.clone(),
        patient_id: bundle.patient_id.clone(),
        features: bundle.spot_features.clone(),
        neighbors,
        slide_graph,
        neighbor_graphs,
        expr: expr_mat.values,
        gene_names: expr_mat.gene_names,
    })
}

/// Prepares every bundle against a shared gene panel.
pub fn prepare_slides(
    bundles: &[SlideBundle],
    gene_indices: &[usize],
    graph: &GraphConfig,
) -> Result<Vec<PreparedSlide>> {
    bundles
        .iter()
        .map(|b| prepare_slide(b, gene_indices, graph))
        .collect()
}
