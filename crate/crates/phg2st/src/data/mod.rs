//! Slide bundles: in-memory representation, disk formats, preprocessing,
//! the synthetic cohort generator, and heatmap rendering.

pub mod formats;
pub mod heatmap;
pub mod preprocess;
pub mod synth;

use crate::error::{Error, Result};
use crate::tensor::TensorData;

/// One tissue slide: spot geometry, per-spot histology feature vectors, and
/// the raw gene count matrix. Counts stay integral until normalization.
#[derive(Clone, Debug)]
pub struct SlideBundle {
    pub slide_id: String,
    pub patient_id: String,
    /// Number of spots.
    pub n: usize,
    /// Pixel-space spot centers, `[x, y]`.
    pub coords: Vec<[f64; 2]>,
    /// Array coordinates on the spot grid, `[row, col]`.
    pub grid: Vec<[i64; 2]>,
    /// `[n, d]` feature vectors extracted from the spot image patches.
    pub spot_features: TensorData,
    /// Raw counts, row-major `[n, m_raw]`.
    pub counts: Vec<u64>,
    pub m_raw: usize,
    /// Names of all `m_raw` genes, in count-column order.
    pub gene_names: Vec<String>,
}

impl SlideBundle {
    pub fn count(&self, spot: usize, gene: usize) -> u64 {
        self.counts[spot * self.m_raw + gene]
    }

    pub fn feature_dim(&self) -> usize {
        self.spot_features.shape[1]
    }

    /// Cross-field consistency checks shared by the loader and generator.
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Validation(format!("slide {}: no spots", self.slide_id)));
        }
        if self.coords.len() != self.n || self.grid.len() != self.n {
            return Err(Error::Validation(format!(
                "slide {}: {} spots but {} coords / {} grid entries",
                self.slide_id,
                self.n,
                self.coords.len(),
                self.grid.len()
            )));
        }
        if self.spot_features.shape.len() != 2 || self.spot_features.shape[0] != self.n {
            return Err(Error::Validation(format!(
                "slide {}: features shaped {:?} for {} spots",
                self.slide_id, self.spot_features.shape, self.n
            )));
        }
        if self.counts.len() != self.n * self.m_raw {
            return Err(Error::Validation(format!(
                "slide {}: counts length {} != {} x {}",
                self.slide_id,
                self.counts.len(),
                self.n,
                self.m_raw
            )));
        }
        if self.gene_names.len() != self.m_raw {
            return Err(Error::Validation(format!(
                "slide {}: {} gene names for {} count columns",
                self.slide_id,
                self.gene_names.len(),
                self.m_raw
            )));
        }
        if self.spot_features.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "slide {}: non-finite spot feature",
                self.slide_id
            )));
        }
        if self.coords.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Validation(format!("slide {}: non-finite coord", self.slide_id)));
        }
        Ok(())
    }
}

/// Log-normalized expression for a selected gene panel, `values` is `[n, m]`.
#[derive(Clone, Debug)]
pub struct ExpressionMatrix {
    pub values: TensorData,
    /// Column indices of the selected genes within the bundle's raw panel.
    pub gene_indices: Vec<usize>,
    /// Names of the selected genes, aligned with `values` columns.
    pub gene_names: Vec<String>,
}

impl ExpressionMatrix {
    pub fn n_spots(&self) -> usize {
        self.values.shape[0]
    }

    pub fn n_genes(&self) -> usize {
        self.values.shape[1]
    }
}

/// Per-spot 5x5 neighborhood feature tokens. Slot `(dr+2)*5 + (dc+2)` holds
/// the feature vector of the spot at grid offset `(dr, dc)`; slots that fall
/// outside the slide are zero-filled and flagged invalid. The center spot
/// always occupies slot [`NeighborTensor::CENTER`].
#[derive(Clone, Debug)]
pub struct NeighborTensor {
    pub n: usize,
    pub d: usize,
    values: Vec<f64>,
    validity: Vec<bool>,
}

impl NeighborTensor {
    /// Tokens per neighborhood (5x5 window).
    pub const SLOTS: usize = 25;
    /// Slot index of the center spot (offset (0, 0)).
    pub const CENTER: usize = 12;

    pub(crate) fn new(n: usize, d: usize, values: Vec<f64>, validity: Vec<bool>) -> Self {
        debug_assert_eq!(values.len(), n * Self::SLOTS * d);
        debug_assert_eq!(validity.len(), n * Self::SLOTS);
        NeighborTensor { n, d, values, validity }
    }

    /// Feature vector of token `slot` in spot `i`'s neighborhood.
    pub fn token(&self, i: usize, slot: usize) -> &[f64] {
        let base = (i * Self::SLOTS + slot) * self.d;
        &self.values[base..base + self.d]
    }

    pub fn is_valid(&self, i: usize, slot: usize) -> bool {
        self.validity[i * Self::SLOTS + slot]
    }

    pub fn valid_count(&self, i: usize) -> usize {
        (0..Self::SLOTS).filter(|&s| self.is_valid(i, s)).count()
    }

    /// The 25 tokens of spot `i` as a `[25, d]` tensor.
    pub fn tokens_of(&self, i: usize) -> TensorData {
        let base = i * Self::SLOTS * self.d;
        TensorData {
            shape: vec![Self::SLOTS, self.d],
            data: self.values[base..base + Self::SLOTS * self.d].to_vec(),
        }
    }
}
