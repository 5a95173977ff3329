//! File formats: raw HU volumes with JSON sidecars, 8-bit label rasters,
//! binary PGM/PPM previews, and small CSV helpers.
//!
//! A volume is a little-endian signed 16-bit HU raster, row-major,
//! slice-major, one file per volume, with a sidecar
//! `{"height":H,"width":W,"slices":S,"spacing_mm":[sx,sy,sz]}` next to it
//! (same stem, `.json` extension).

use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TcsError};
use crate::imaging::{GraySlice, HuSlice, RgbSlice};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct VolumeSidecar {
    pub height: usize,
    pub width: usize,
    pub slices: usize,
    pub spacing_mm: [f64; 3],
}

fn sidecar_path(volume: &Path) -> PathBuf {
    volume.with_extension("json")
}

/// Write a stack of HU slices as one raw volume plus sidecar.
pub fn write_volume(path: &Path, slices: &[HuSlice], spacing_mm: [f64; 3]) -> Result<()> {
    let first = slices
        .first()
        .ok_or_else(|| TcsError::InvalidInput("write_volume: no slices".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut bytes = Vec::with_capacity(slices.len() * h * w * 2);
    for (idx, slice) in slices.iter().enumerate() {
        if slice.height() != h || slice.width() != w {
            return Err(TcsError::ShapeMismatch(format!(
                "write_volume: slice {idx} is {}x{}, expected {h}x{w}",
                slice.height(),
                slice.width()
            )));
        }
        for v in slice.values().iter() {
            let q = v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
            bytes.extend_from_slice(&q.to_le_bytes());
        }
    }
    std::fs::write(path, &bytes).map_err(|e| TcsError::io(path, e))?;
    let sidecar = VolumeSidecar {
        height: h,
        width: w,
        slices: slices.len(),
        spacing_mm,
    };
    let sc_path = sidecar_path(path);
    std::fs::write(
        &sc_path,
        serde_json::to_string(&sidecar).expect("sidecar serializes"),
    )
    .map_err(|e| TcsError::io(&sc_path, e))?;
    Ok(())
}

/// Read a raw volume back into HU slices.
pub fn read_volume(path: &Path) -> Result<Vec<HuSlice>> {
    let sc_path = sidecar_path(path);
    let sidecar: VolumeSidecar = {
        let text = std::fs::read_to_string(&sc_path).map_err(|e| TcsError::io(&sc_path, e))?;
        serde_json::from_str(&text).map_err(|e| TcsError::Malformed {
            path: sc_path.display().to_string(),
            message: e.to_string(),
        })?
    };
    let bytes = std::fs::read(path).map_err(|e| TcsError::io(path, e))?;
    let expect = sidecar.height * sidecar.width * sidecar.slices * 2;
    if bytes.len() != expect {
        return Err(TcsError::Malformed {
            path: path.display().to_string(),
            message: format!("expected {expect} bytes per sidecar, found {}", bytes.len()),
        });
    }
    let per_slice = sidecar.height * sidecar.width;
    let mut values = bytes
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]) as f64);
    let mut out = Vec::with_capacity(sidecar.slices);
    for _ in 0..sidecar.slices {
        let data: Vec<f64> = values.by_ref().take(per_slice).collect();
        let arr = Array2::from_shape_vec((sidecar.height, sidecar.width), data)
            .expect("length checked");
        out.push(HuSlice::new(arr)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LabelSidecar {
    pub height: usize,
    pub width: usize,
    pub classes: usize,
}

/// Write an 8-bit label raster (one byte per pixel) plus sidecar.
pub fn write_labels(path: &Path, labels: &Array2<u8>, classes: usize) -> Result<()> {
    let bytes: Vec<u8> = labels.iter().copied().collect();
    std::fs::write(path, &bytes).map_err(|e| TcsError::io(path, e))?;
    let sidecar = LabelSidecar {
        height: labels.nrows(),
        width: labels.ncols(),
        classes,
    };
    let sc_path = sidecar_path(path);
    std::fs::write(
        &sc_path,
        serde_json::to_string(&sidecar).expect("sidecar serializes"),
    )
    .map_err(|e| TcsError::io(&sc_path, e))?;
    Ok(())
}

pub fn read_labels(path: &Path) -> Result<(Array2<u8>, usize)> {
    let sc_path = sidecar_path(path);
    let sidecar: LabelSidecar = {
        let text = std::fs::read_to_string(&sc_path).map_err(|e| TcsError::io(&sc_path, e))?;
        serde_json::from_str(&text).map_err(|e| TcsError::Malformed {
            path: sc_path.display().to_string(),
            message: e.to_string(),
        })?
    };
    let bytes = std::fs::read(path).map_err(|e| TcsError::io(path, e))?;
    if bytes.len() != sidecar.height * sidecar.width {
        return Err(TcsError::Malformed {
            path: path.display().to_string(),
            message: format!(
                "expected {} bytes, found {}",
                sidecar.height * sidecar.width,
                bytes.len()
            ),
        });
    }
    let arr = Array2::from_shape_vec((sidecar.height, sidecar.width), bytes)
        .expect("length checked");
    if let Some(v) = arr.iter().find(|&&v| (v as usize) >= sidecar.classes) {
        return Err(TcsError::Malformed {
            path: path.display().to_string(),
            message: format!("label {v} outside declared class count {}", sidecar.classes),
        });
    }
    Ok((arr, sidecar.classes))
}

/// Binary PGM (P5), 8-bit, from values in [0, 1].
pub fn write_pgm(path: &Path, plane: &Array2<f64>) -> Result<()> {
    let mut out = Vec::with_capacity(plane.len() + 32);
    write!(out, "P5\n{} {}\n255\n", plane.ncols(), plane.nrows()).expect("vec write");
    for v in plane.iter() {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    std::fs::write(path, out).map_err(|e| TcsError::io(path, e))
}

/// Binary PGM from a gray image in [0, 255].
pub fn write_pgm_gray(path: &Path, gray: &GraySlice) -> Result<()> {
    write_pgm(path, &gray.0.mapv(|v| v / 255.0))
}

/// Binary PPM (P6), 8-bit, from an RgbSlice in [0, 1].
pub fn write_ppm(path: &Path, rgb: &RgbSlice) -> Result<()> {
    let (h, w) = (rgb.height(), rgb.width());
    let mut out = Vec::with_capacity(3 * h * w + 32);
    write!(out, "P6\n{w} {h}\n255\n").expect("vec write");
    for i in 0..h {
        for j in 0..w {
            for c in 0..3 {
                out.push((rgb.channel(c)[(i, j)].clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    std::fs::write(path, out).map_err(|e| TcsError::io(path, e))
}

/// Incremental CSV writer with a fixed header row.
pub struct CsvWriter {
    file: std::fs::File,
    path: PathBuf,
    columns: usize,
}

impl CsvWriter {
    pub fn create(path: &Path, header: &[&str]) -> Result<Self> {
        let mut file = std::fs::File::create(path).map_err(|e| TcsError::io(path, e))?;
        writeln!(file, "{}", header.join(",")).map_err(|e| TcsError::io(path, e))?;
        Ok(CsvWriter {
            file,
            path: path.to_path_buf(),
            columns: header.len(),
        })
    }

    pub fn row(&mut self, fields: &[String]) -> Result<()> {
        debug_assert_eq!(fields.len(), self.columns);
        writeln!(self.file, "{}", fields.join(",")).map_err(|e| TcsError::io(&self.path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        self.file.flush().map_err(|e| TcsError::io(&self.path, e))
    }
}

/// Format a float for CSV: shortest representation that round-trips.
pub fn csv_float(v: f64) -> String {
    format!("{v}")
}

/// Minimal CSV reader for the crate's own numeric outputs: returns the
/// header and rows of string fields.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).map_err(|e| TcsError::io(path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| TcsError::Malformed {
            path: path.display().to_string(),
            message: "empty CSV".into(),
        })?
        .split(',')
        .map(String::from)
        .collect();
    let rows = lines
        .map(|l| l.split(',').map(String::from).collect())
        .collect();
    Ok((header, rows))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    #[test]
    fn volume_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol_000.raw");
        let slices: Vec<HuSlice> = (0..3)
            .map(|s| {
                HuSlice::new(Array2::from_shape_fn((8, 10), |(i, j)| {
                    -1000.0 + (s * 100 + i * 10 + j) as f64
                }))
                .unwrap()
            })
            .collect();
        write_volume(&path, &slices, [1.0, 1.0, 2.5]).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in slices.iter().zip(&back) {
            assert_eq!(a.values(), b.values());
        }
    }

    #[test]
    fn volume_size_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.raw");
        let slices =
            vec![HuSlice::new(Array2::from_elem((8, 8), 0.0)).unwrap()];
        write_volume(&path, &slices, [1.0; 3]).unwrap();
        // corrupt: truncate the raster
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(read_volume(&path).is_err());
    }

    #[test]
    fn labels_roundtrip_and_range_check() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mask.raw");
        let labels = Array2::from_shape_fn((6, 6), |(i, j)| ((i + j) % 3) as u8);
        write_labels(&path, &labels, 3).unwrap();
        let (back, classes) = read_labels(&path).unwrap();
        assert_eq!(back, labels);
        assert_eq!(classes, 3);

        write_labels(&path, &labels, 2).unwrap();
        assert!(read_labels(&path).is_err());
    }

    #[test]
    fn pgm_and_ppm_headers() {
        let dir = tempfile::tempdir().unwrap();
        let pgm = dir.path().join("x.pgm");
        write_pgm(&pgm, &Array2::from_elem((4, 6), 0.5)).unwrap();
        let bytes = std::fs::read(&pgm).unwrap();
        assert!(bytes.starts_with(b"P5\n6 4\n255\n"));
        assert_eq!(bytes.len(), 11 + 24);

        let ppm = dir.path().join("x.ppm");
        let rgb = RgbSlice::new([
            Array2::from_elem((4, 6), 1.0),
            Array2::from_elem((4, 6), 0.0),
            Array2::from_elem((4, 6), 0.5),
        ])
        .unwrap();
        write_ppm(&ppm, &rgb).unwrap();
        let bytes = std::fs::read(&ppm).unwrap();
        assert!(bytes.starts_with(b"P6\n6 4\n255\n"));
        assert_eq!(bytes.len(), 11 + 72);
        assert_eq!(&bytes[11..14], &[255, 0, 128]);
    }

    #[test]
    fn csv_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        let mut w = CsvWriter::create(&path, &["step", "value"]).unwrap();
        w.row(&["0".into(), csv_float(0.125)]).unwrap();
        w.row(&["1".into(), csv_float(1.0 / 3.0)]).unwrap();
        w.flush().unwrap();
        let (header, rows) = read_csv(&path).unwrap();
        assert_eq!(header, vec!["step", "value"]);
        assert_eq!(rows.len(), 2);
        let v: f64 = rows[1][1].parse().unwrap();
        assert_eq!(v, 1.0 / 3.0);
    }
}
