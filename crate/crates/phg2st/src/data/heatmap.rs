//! Grayscale heatmap rendering of per-spot values to binary PGM (P5).
//!
//! Each grid position becomes one pixel; the value range is min-max scaled
//! to 0..255. Grid cells with no spot render black. A constant input maps
//! to mid-gray (128) so that flat predictions remain visibly distinct from
//! missing cells.

use crate::error::{Error, Result};
use std::fs;
use std::io::Write;
use std::path::Path;

pub fn write_heatmap(values: &[f64], grid: &[[i64; 2]], path: &Path) -> Result<()> {
    if values.is_empty() || values.len() != grid.len() {
        return Err(Error::Param {
            name: "values",
            details: format!("{} values for {} grid positions", values.len(), grid.len()),
        });
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite value in heatmap input".into()));
    }
    let rmin = grid.iter().map(|g| g[0]).min().unwrap();
    let rmax = grid.iter().map(|g| g[0]).max().unwrap();
    let cmin = grid.iter().map(|g| g[1]).min().unwrap();
    let cmax = grid.iter().map(|g| g[1]).max().unwrap();
    let h = (rmax - rmin + 1) as usize;
    let w = (cmax - cmin + 1) as usize;

    let vmin = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let vmax = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut pixels = vec![0u8; h * w];
    for (v, g) in values.iter().zip(grid) {
        let px = if vmax > vmin {
            ((v - vmin) / (vmax - vmin) * 255.0).round() as u8
        } else {
            128
        };
        let (r, c) = ((g[0] - rmin) as usize, (g[1] - cmin) as usize);
        pixels[r * w + c] = px;
    }

    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(format!("P5\n{w} {h}\n255\n").as_bytes())
        .and_then(|_| f.write_all(&pixels))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn parse_pgm(bytes: &[u8]) -> (usize, usize, Vec<u8>) {
        let header_end = bytes
            .windows(1)
            .enumerate()
            .filter(|(_, w)| w[0] == b'\n')
            .map(|(i, _)| i)
            .nth(2)
            .unwrap();
        let header = std::str::from_utf8(&bytes[..header_end]).unwrap();
        let mut lines = header.lines();
        assert_eq!(lines.next().unwrap(), "P5");
        let dims: Vec<usize> =
            lines.next().unwrap().split(' ').map(|s| s.parse().unwrap()).collect();
        assert_eq!(lines.next().unwrap(), "255");
        (dims[0], dims[1], bytes[header_end + 1..].to_vec())
    }

    #[test]
    fn min_max_map_to_black_and_white() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("h.pgm");
        write_heatmap(&[1.0, 3.0, 2.0], &[[0, 0], [0, 1], [0, 2]], &p).unwrap();
        let (w, h, px) = parse_pgm(&fs::read(&p).unwrap());
        assert_eq!((w, h), (3, 1));
        assert_eq!(px, vec![0, 255, 128]);
    }

    #[test]
    fn constant_values_render_mid_gray() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("h.pgm");
        write_heatmap(&[5.0, 5.0], &[[0, 0], [1, 0]], &p).unwrap();
        let (w, h, px) = parse_pgm(&fs::read(&p).unwrap());
        assert_eq!((w, h), (1, 2));
        assert_eq!(px, vec![128, 128]);
    }

    #[test]
    fn missing_grid_cells_stay_black() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("h.pgm");
        // 2x2 canvas with only the diagonal occupied.
        write_heatmap(&[1.0, 2.0], &[[0, 0], [1, 1]], &p).unwrap();
        let (w, h, px) = parse_pgm(&fs::read(&p).unwrap());
        assert_eq!((w, h), (2, 2));
        assert_eq!(px, vec![0, 0, 0, 255]);
    }

    #[test]
    fn grid_offsets_are_normalized() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("h.pgm");
        write_heatmap(&[0.0, 9.0], &[[10, -3], [10, -2]], &p).unwrap();
        let (w, h, px) = parse_pgm(&fs::read(&p).unwrap());
        assert_eq!((w, h), (2, 1));
        assert_eq!(px, vec![0, 255]);
    }

    #[test]
    fn invalid_inputs_are_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let p = tmp.path().join("h.pgm");
        assert!(write_heatmap(&[], &[], &p).is_err());
        assert!(write_heatmap(&[1.0], &[[0, 0], [0, 1]], &p).is_err());
        assert!(write_heatmap(&[f64::NAN], &[[0, 0]], &p).is_err());
    }
}
