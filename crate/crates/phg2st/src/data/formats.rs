//! On-disk slide bundle format.
//!
//! A bundle is a directory with five files:
//!
//! * `meta.json` — `{"slide_id": .., "patient_id": ..}`
//! * `spots.csv` — `spot_id,x,y,row,col`, one row per spot
//! * `genes.txt` — one gene name per line, in count-column order
//! * `counts.csv` — header of gene names, then integer counts per spot
//! * `features.phgf` — binary: magic `PHGF`, u32 version (=1), u64 n, u64 d,
//!   then `n*d` little-endian f32 values row-major

use super::SlideBundle;
use crate::error::{Error, Result};
use crate::tensor::TensorData;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const FEATURE_MAGIC: &[u8; 4] = b"PHGF";
const FEATURE_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Meta {
    slide_id: String,
    patient_id: String,
}

/// Write a bundle directory, creating it if needed.
pub fn save_slide_bundle(bundle: &SlideBundle, dir: &Path) -> Result<()> {
    bundle.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let meta = Meta {
        slide_id: bundle.slide_id.clone(),
        patient_id: bundle.patient_id.clone(),
    };
    let meta_path = dir.join("meta.json");
    let meta_json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Validation(format!("meta serialization: {e}")))?;
    fs::write(&meta_path, meta_json).map_err(|e| Error::io(&meta_path, e))?;

    let spots_path = dir.join("spots.csv");
    let mut w = csv::Writer::from_path(&spots_path).map_err(|e| {
        Error::Format { path: spots_path.display().to_string(), details: e.to_string() }
    })?;
    w.write_record(["spot_id", "x", "y", "row", "col"])
        .and_then(|_| {
            for i in 0..bundle.n {
                let [r, c] = bundle.grid[i];
                w.write_record([
                    format!("r{r}c{c}"),
                    bundle.coords[i][0].to_string(),
                    bundle.coords[i][1].to_string(),
                    r.to_string(),
                    c.to_string(),
                ])?;
            }
            w.flush().map_err(csv::Error::from)
        })
        .map_err(|e| Error::Format {
            path: spots_path.display().to_string(),
            details: e.to_string(),
        })?;

    let genes_path = dir.join("genes.txt");
    fs::write(&genes_path, bundle.gene_names.join("\n") + "\n")
        .map_err(|e| Error::io(&genes_path, e))?;

    let counts_path = dir.join("counts.csv");
    let mut w = csv::Writer::from_path(&counts_path).map_err(|e| {
        Error::Format { path: counts_path.display().to_string(), details: e.to_string() }
    })?;
    w.write_record(&bundle.gene_names)
        .and_then(|_| {
            for i in 0..bundle.n {
                let row: Vec<String> = (0..bundle.m_raw)
                    .map(|g| bundle.count(i, g).to_string())
                    .collect();
                w.write_record(&row)?;
            }
            w.flush().map_err(csv::Error::from)
        })
        .map_err(|e| Error::Format {
            path: counts_path.display().to_string(),
            details: e.to_string(),
        })?;

    write_features(&bundle.spot_features, &dir.join("features.phgf"))?;
    Ok(())
}

fn write_features(features: &TensorData, path: &Path) -> Result<()> {
    let (n, d) = (features.shape[0], features.shape[1]);
    let mut buf = Vec::with_capacity(4 + 4 + 16 + features.data.len() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(d as u64).to_le_bytes());
    for v in &features.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

fn read_features(path: &Path) -> Result<TensorData> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 24 {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(Error::format(path, format!("bad magic {:?}", &bytes[0..4])));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let d = u64::from_le_bytes(bytes[16..24].try_into().unwrap()) as usize;
    let expected = 24 + n * d * 4;
    if bytes.len() != expected {
        return Err(Error::format(
            path,
            format!("payload is {} bytes, expected {} for {}x{}", bytes.len(), expected, n, d),
        ));
    }
    let mut data = Vec::with_capacity(n * d);
    for chunk in bytes[24..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    TensorData::from_vec(&[n, d], data)
}

/// Load one bundle directory, validating format and cross-file consistency.
pub fn load_slide_bundle(dir: &Path) -> Result<SlideBundle> {
    let meta_path = dir.join("meta.json");
    let meta_str = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&meta_str)
        .map_err(|e| Error::format(&meta_path, e.to_string()))?;
    if meta.slide_id.is_empty() || meta.patient_id.is_empty() {
        return Err(Error::Validation(format!(
            "{}: empty slide_id or patient_id",
            meta_path.display()
        )));
    }

    let spots_path = dir.join("spots.csv");
    let mut coords = Vec::new();
    let mut grid = Vec::new();
    let mut rdr = csv::Reader::from_path(&spots_path).map_err(|e| {
        Error::Format { path: spots_path.display().to_string(), details: e.to_string() }
    })?;
    {
        let headers = rdr.headers().map_err(|e| {
            Error::format(&spots_path, e.to_string())
        })?;
        let expected = ["spot_id", "x", "y", "row", "col"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(Error::format(&spots_path, format!("header {headers:?}")));
        }
    }
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(&spots_path, e.to_string()))?;
        let field = |j: usize| -> Result<&str> {
            rec.get(j).ok_or_else(|| {
                Error::format(&spots_path, format!("row {i}: missing column {j}"))
            })
        };
        let x: f64 = field(1)?.parse().map_err(|_| {
            Error::format(&spots_path, format!("row {i}: bad x '{}'", rec.get(1).unwrap_or("")))
        })?;
        let y: f64 = field(2)?.parse().map_err(|_| {
            Error::format(&spots_path, format!("row {i}: bad y"))
        })?;
        let r: i64 = field(3)?.parse().map_err(|_| {
            Error::format(&spots_path, format!("row {i}: bad row"))
        })?;
        let c: i64 = field(4)?.parse().map_err(|_| {
            Error::format(&spots_path, format!("row {i}: bad col"))
        })?;
        coords.push([x, y]);
        grid.push([r, c]);
    }
    let n = coords.len();

    let genes_path = dir.join("genes.txt");
    let genes_str = fs::read_to_string(&genes_path).map_err(|e| Error::io(&genes_path, e))?;
    let gene_names: Vec<String> =
        genes_str.lines().filter(|l| !l.is_empty()).map(str::to_owned).collect();
    let m_raw = gene_names.len();
    if m_raw == 0 {
        return Err(Error::format(&genes_path, "no gene names"));
    }

    let counts_path = dir.join("counts.csv");
    let mut rdr = csv::Reader::from_path(&counts_path).map_err(|e| {
        Error::Format { path: counts_path.display().to_string(), details: e.to_string() }
    })?;
    {
        let headers = rdr.headers().map_err(|e| Error::format(&counts_path, e.to_string()))?;
        let header_names: Vec<&str> = headers.iter().collect();
        if header_names != gene_names.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Validation(format!(
                "{}: count header does not match genes.txt",
                counts_path.display()
            )));
        }
    }
    let mut counts = Vec::with_capacity(n * m_raw);
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::format(&counts_path, e.to_string()))?;
        if rec.len() != m_raw {
            return Err(Error::format(
                &counts_path,
                format!("row {i}: {} columns, expected {m_raw}", rec.len()),
            ));
        }
        for v in rec.iter() {
            let c: u64 = v.parse().map_err(|_| {
                Error::format(&counts_path, format!("row {i}: bad count '{v}'"))
            })?;
            counts.push(c);
        }
    }
    if counts.len() != n * m_raw {
        return Err(Error::Validation(format!(
            "{}: {} count rows for {} spots",
            counts_path.display(),
            counts.len() / m_raw.max(1),
            n
        )));
    }

    let spot_features = read_features(&dir.join("features.phgf"))?;

    let bundle = SlideBundle {
        slide_id: meta.slide_id,
        patient_id: meta.patient_id,
        n,
        coords,
        grid,
        spot_features,
        counts,
        m_raw,
        gene_names,
    };
    if bundle.spot_features.shape[0] != n {
        return Err(Error::Validation(format!(
            "{}: features for {} spots, spots.csv has {}",
            dir.display(),
            bundle.spot_features.shape[0],
            n
        )));
    }
    bundle.validate()?;
    Ok(bundle)
}

/// Load every bundle subdirectory under `root`, sorted by directory name.
pub fn load_cohort(root: &Path) -> Result<Vec<SlideBundle>> {
    let mut dirs: Vec<_> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::Validation(format!(
            "{}: no bundle subdirectories",
            root.display()
        )));
    }
    dirs.iter().map(|d| load_slide_bundle(d)).collect()
}
