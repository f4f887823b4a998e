//! Binary and text formats used by scene bundles.
//!
//! * `PC4D`: 16-byte header (`b"PC4D"`, little-endian `u32` row count,
//!   8 reserved zero bytes) followed by `N×4` little-endian `f32` rows.
//! * `TNSR`: `b"TNSR"`, `u32` rank, `rank × u32` extents, then the `f64`
//!   payload, all little-endian.
//! * CSV point clouds with an `x,y,z,r` header row.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nnprims::Tensor;

const PC4D_MAGIC: &[u8; 4] = b"PC4D";
const TNSR_MAGIC: &[u8; 4] = b"TNSR";
const PC4D_HEADER: usize = 16;

pub fn encode_pc4d(points: &[[f64; 4]]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(PC4D_HEADER + points.len() * 16);
    buf.extend_from_slice(PC4D_MAGIC);
    buf.extend_from_slice(&(points.len() as u32).to_le_bytes());
    buf.extend_from_slice(&[0u8; 8]);
    for p in points {
        for v in p {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    buf
}

pub fn decode_pc4d(bytes: &[u8]) -> std::result::Result<Vec<[f64; 4]>, String> {
    if bytes.len() < PC4D_HEADER || &bytes[..4] != PC4D_MAGIC {
        return Err("missing PC4D header".into());
    }
    let n = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let body = &bytes[PC4D_HEADER..];
    if body.len() != n * 16 {
        return Err(format!("expected {} payload bytes for {n} points, found {}", n * 16, body.len()));
    }
    Ok(body
        .chunks_exact(16)
        .map(|row| {
            let mut p = [0.0; 4];
            for (k, v) in p.iter_mut().enumerate() {
                *v = f64::from(f32::from_le_bytes(row[4 * k..4 * k + 4].try_into().unwrap()));
            }
            p
        })
        .collect())
}

pub fn write_pc4d(path: &Path, points: &[[f64; 4]]) -> Result<()> {
    fs::write(path, encode_pc4d(points)).map_err(|e| Error::io(path, e))
}

pub fn read_pc4d(path: &Path) -> Result<Vec<[f64; 4]>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pc4d(&bytes).map_err(|m| Error::format(path, m))
}

/// Reads an `x,y,z,r` CSV point cloud.
pub fn read_points_csv(path: &Path) -> Result<Vec<[f64; 4]>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    if names != ["x", "y", "z", "r"] {
        return Err(Error::format(path, format!("expected header x,y,z,r, found {names:?}")));
    }
    let mut points = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let mut p = [0.0; 4];
        for (k, field) in record.iter().enumerate().take(4) {
            p[k] = field
                .trim()
                .parse()
                .map_err(|_| Error::format(path, format!("row {}: bad number {field:?}", line + 2)))?;
        }
        if record.len() != 4 {
            return Err(Error::format(path, format!("row {}: expected 4 fields", line + 2)));
        }
        points.push(p);
    }
    Ok(points)
}

/// Reads a point cloud by extension: `.csv` as CSV, anything else as PC4D.
pub fn read_points(path: &Path) -> Result<Vec<[f64; 4]>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(ext) if ext.eq_ignore_ascii_case("csv") => read_points_csv(path),
        _ => read_pc4d(path),
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::format(path, format!("{other:?}")),
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let mut buf = Vec::with_capacity(8 + 4 * t.rank() + 8 * t.len());
    buf.extend_from_slice(TNSR_MAGIC);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_tensor(bytes: &[u8]) -> std::result::Result<Tensor, String> {
    if bytes.len() < 8 || &bytes[..4] != TNSR_MAGIC {
        return Err("missing TNSR header".into());
    }
    let rank = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let dims_end = 8 + 4 * rank;
    if bytes.len() < dims_end {
        return Err("truncated extents".into());
    }
    let shape: Vec<usize> = bytes[8..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let payload = &bytes[dims_end..];
    if payload.len() != 8 * n {
        return Err(format!("expected {} payload bytes, found {}", 8 * n, payload.len()));
    }
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(&shape, data).map_err(|e| e.to_string())
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes).map_err(|m| Error::format(path, m))
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::format(path, e))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pc4d_header_layout() {
        let bytes = encode_pc4d(&[[1.0, 2.0, 3.0, 0.5]]);
        assert_eq!(&bytes[..4], b"PC4D");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 32);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), 1.0);
        assert!(decode_pc4d(&bytes[..31]).is_err());
    }

    #[test]
    fn tensor_header_layout() {
        let t = Tensor::from_fn(&[2, 3], |i| i as f64);
        let bytes = encode_tensor(&t);
        assert_eq!(&bytes[..4], b"TNSR");
        assert_eq!(bytes.len(), 4 + 4 + 8 + 48);
        assert_eq!(decode_tensor(&bytes).unwrap(), t);
        assert!(decode_tensor(b"TNSX").is_err());
    }

    #[test]
    fn csv_import() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pts.csv");
        fs::write(&path, "x,y,z,r\n1,2,3,0.5\n-1.5,0,0.25,1\n").unwrap();
        let pts = read_points(&path).unwrap();
        assert_eq!(pts, vec![[1.0, 2.0, 3.0, 0.5], [-1.5, 0.0, 0.25, 1.0]]);
        fs::write(&path, "a,b,c,d\n1,2,3,4\n").unwrap();
        assert!(read_points(&path).is_err());
    }

    proptest! {
        #[test]
        fn tensor_round_trip(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let t = Tensor::from_fn(&shape, |i| (i as f64 + seed as f64 * 1e-3).sin());
            prop_assert_eq!(decode_tensor(&encode_tensor(&t)).unwrap(), t);
        }

        #[test]
        fn pc4d_round_trip_is_f32_exact(pts in prop::collection::vec(prop::array::uniform4(-1e3f32..1e3), 0..50)) {
            let wide: Vec<[f64; 4]> = pts.iter().map(|p| p.map(f64::from)).collect();
            prop_assert_eq!(decode_pc4d(&encode_pc4d(&wide)).unwrap(), wide);
        }
    }
}
