//! Model checkpoints: a `PHGC` magic, a format version, a JSON header
//! (model config, named tensor shapes, gene panel, training progress), and
//! the parameter payload as little-endian f64 in canonical visit order.

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"PHGC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    params: Vec<ParamEntry>,
    genes: Vec<String>,
    epochs_completed: usize,
    best_val_pcc: f64,
}

/// A loaded checkpoint: trained parameters plus the gene panel and
/// progress needed to evaluate or resume.
#[derive(Debug)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub genes: Vec<String>,
    pub epochs_completed: usize,
    pub best_val_pcc: f64,
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    genes: &[String],
    epochs_completed: usize,
    best_val_pcc: f64,
) -> Result<()> {
    if genes.len() != params.config.n_genes {
        return Err(Error::Checkpoint {
            path: path.display().to_string(),
            details: format!(
                "{} gene names for a {}-gene model",
                genes.len(),
                params.config.n_genes
            ),
        });
    }
    let entries = params.visit();
    let header = Header {
        model: params.config.clone(),
        params: entries
            .iter()
            .map(|(name, t)| ParamEntry { name: name.clone(), shape: t.shape.clone() })
            .collect(),
        genes: genes.to_vec(),
        epochs_completed,
        best_val_pcc,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint {
        path: path.display().to_string(),
        details: format!("encoding header: {e}"),
    })?;
    let total: usize = entries.iter().map(|(_, t)| t.numel()).sum();
    let mut bytes = Vec::with_capacity(16 + json.len() + 8 * total);
    bytes.extend_from_slice(&CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    for (_, t) in &entries {
        for v in &t.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn corrupt(path: &Path, details: impl Into<String>) -> Error {
    Error::Checkpoint { path: path.display().to_string(), details: details.into() }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 {
        return Err(corrupt(path, format!("{} bytes is too short for a header", bytes.len())));
    }
    if bytes[0..4] != CHECKPOINT_MAGIC {
        return Err(corrupt(path, "bad magic (not a checkpoint file)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(corrupt(
            path,
            format!("unsupported version {version}, expected {CHECKPOINT_VERSION}"),
        ));
    }
    let json_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let payload_start = 16usize.checked_add(json_len).filter(|&o| o <= bytes.len());
    let Some(payload_start) = payload_start else {
        return Err(corrupt(path, format!("header length {json_len} exceeds file size")));
    };
    let header: Header = serde_json::from_slice(&bytes[16..payload_start])
        .map_err(|e| corrupt(path, format!("decoding header: {e}")))?;
    if header.genes.len() != header.model.n_genes {
        return Err(corrupt(
            path,
            format!(
                "{} gene names for a {}-gene model",
                header.genes.len(),
                header.model.n_genes
            ),
        ));
    }

    let mut params = ModelParams::init(&header.model, 0)
        .map_err(|e| corrupt(path, format!("invalid model config: {e}")))?;
    let mut entries = params.visit_mut();
    if entries.len() != header.params.len() {
        return Err(corrupt(
            path,
            format!("{} tensors in header, model has {}", header.params.len(), entries.len()),
        ));
    }
    let payload = &bytes[payload_start..];
    let total: usize = entries.iter().map(|(_, t)| t.numel()).sum();
    if payload.len() != 8 * total {
        return Err(corrupt(
            path,
            format!("payload holds {} bytes, model needs {}", payload.len(), 8 * total),
        ));
    }
    let mut offset = 0usize;
    for ((name, tensor), entry) in entries.iter_mut().zip(&header.params) {
        if *name != entry.name || tensor.shape != entry.shape {
            return Err(corrupt(
                path,
                format!(
                    "tensor mismatch: file has {} {:?}, model expects {} {:?}",
                    entry.name, entry.shape, name, tensor.shape
                ),
            ));
        }
        for v in tensor.data.iter_mut() {
            *v = f64::from_le_bytes(payload[offset..offset + 8].try_into().expect("8 bytes"));
            offset += 8;
        }
    }
    if params.visit().iter().any(|(_, t)| t.data.iter().any(|v| !v.is_finite())) {
        return Err(corrupt(path, "non-finite parameter value"));
    }
    Ok(Checkpoint {
        params,
        genes: header.genes,
        epochs_completed: header.epochs_completed,
        best_val_pcc: header.best_val_pcc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_params() -> ModelParams {
        let cfg = ModelConfig {
            d_feat: 3,
            n_genes: 4,
            d_model: 6,
            d_prompt: 5,
            d_attn: 5,
            heads: 2,
            blocks: 1,
            mlp_ratio: 2,
            ..ModelConfig::default()
        };
        ModelParams::init(&cfg, 99).unwrap()
    }

    fn genes() -> Vec<String> {
        ["G0000", "G0001", "G0002", "G0003"].map(String::from).to_vec()
    }

    #[test]
    fn roundtrip_preserves_everything_bitwise() {
        let params = small_params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.phgc");
        save_checkpoint(&path, &params, &genes(), 42, 0.875).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.params.config, params.config);
        assert_eq!(loaded.genes, genes());
        assert_eq!(loaded.epochs_completed, 42);
        assert_eq!(loaded.best_val_pcc, 0.875);
        for ((na, ta), (nb, tb)) in params.visit().iter().zip(loaded.params.visit().iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.shape, tb.shape);
            let bits_a: Vec<u64> = ta.data.iter().map(|v| v.to_bits()).collect();
            let bits_b: Vec<u64> = tb.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits_a, bits_b, "{na} changed across the roundtrip");
        }
    }

    #[test]
    fn double_save_is_byte_identical() {
        let params = small_params();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.phgc");
        let b = dir.path().join("b.phgc");
        save_checkpoint(&a, &params, &genes(), 1, 0.5).unwrap();
        save_checkpoint(&b, &params, &genes(), 1, 0.5).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn gene_count_must_match_model() {
        let params = small_params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.phgc");
        let err = save_checkpoint(&path, &params, &genes()[..2].to_vec(), 0, 0.0).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn corruption_is_detected_with_exit_code_3() {
        let params = small_params();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.phgc");
        save_checkpoint(&path, &params, &genes(), 7, 0.9).unwrap();
        let good = std::fs::read(&path).unwrap();

        // Bad magic.
        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap_err().exit_code(), 3);

        // Unsupported version.
        let mut bad = good.clone();
        bad[4] = 9;
        std::fs::write(&path, &bad).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap_err().exit_code(), 3);

        // Truncated payload.
        std::fs::write(&path, &good[..good.len() - 8]).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap_err().exit_code(), 3);

        // Header length pointing past the end.
        let mut bad = good.clone();
        bad[8..16].copy_from_slice(&u64::MAX.to_le_bytes());
        std::fs::write(&path, &bad).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap_err().exit_code(), 3);

        // Garbage JSON header.
        let mut bad = good.clone();
        bad[16] = b'!';
        std::fs::write(&path, &bad).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap_err().exit_code(), 3);

        // NaN parameter in the payload.
        let mut bad = good.clone();
        let tail = bad.len() - 8;
        bad[tail..].copy_from_slice(&f64::NAN.to_le_bytes());
        std::fs::write(&path, &bad).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap_err().exit_code(), 3);

        // Intact file still loads after all that.
        std::fs::write(&path, &good).unwrap();
        assert!(load_checkpoint(&path).is_ok());
    }

    #[test]
    fn missing_file_is_an_io_error_not_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let err = load_checkpoint(&dir.path().join("absent.phgc")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
