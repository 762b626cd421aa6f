//! Seeded random number generation with stream-based domain separation.
//!
//! Every random decision in the crate flows through a [`ChaCha8Rng`] derived
//! from one user-visible seed plus a purpose-specific stream, so that adding
//! randomness to one stage (say, dropout) never shifts the draws of another
//! (say, prompt masking), and identical seeds reproduce runs bit-for-bit.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fixed stream namespaces. Composite streams pack identifying indices into
/// the low bits of the namespace.
pub mod streams {
    /// Model parameter initialization.
    pub const PARAM_INIT: u64 = 1 << 56;
    /// Per-iteration training randomness (prompt mask + dropout).
    pub const TRAIN_STEP: u64 = 2 << 56;
    /// Evaluation-time prompt masks.
    pub const EVAL_MASK: u64 = 3 << 56;
    /// Synthetic generative maps shared by a cohort.
    pub const SYNTH_MAPS: u64 = 4 << 56;
    /// Per-slide synthetic latent fields and noise.
    pub const SYNTH_FIELD: u64 = 5 << 56;
}

/// A generator seeded by `seed` on the given `stream`.
pub fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Stream for training iteration `epoch` on slide `slide_idx`.
pub fn train_stream(epoch: usize, slide_idx: usize) -> u64 {
    streams::TRAIN_STEP | ((epoch as u64) << 24) | (slide_idx as u64 & 0xff_ffff)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_seed_same_stream_reproduces() {
        let mut a = seeded(7, streams::PARAM_INIT);
        let mut b = seeded(7, streams::PARAM_INIT);
        let xs: Vec<f64> = (0..16).map(|_| a.random::<f64>()).collect();
        let ys: Vec<f64> = (0..16).map(|_| b.random::<f64>()).collect();
        assert_eq!(xs, ys);
    }

    #[test]
    fn streams_are_independent() {
        let mut a = seeded(7, streams::PARAM_INIT);
        let mut b = seeded(7, streams::EVAL_MASK);
        let xs: Vec<f64> = (0..16).map(|_| a.random::<f64>()).collect();
        let ys: Vec<f64> = (0..16).map(|_| b.random::<f64>()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn train_streams_distinguish_epoch_and_slide() {
        assert_ne!(train_stream(0, 1), train_stream(1, 0));
        assert_ne!(train_stream(3, 2), train_stream(2, 3));
    }
}
