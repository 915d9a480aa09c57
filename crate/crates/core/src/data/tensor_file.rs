//! `MXT1` binary tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   4 bytes  "MXT1"
//! dtype   u8       0 = f32 little-endian
//! ndim    u32
//! dims    u32 * ndim
//! payload f32 * product(dims), row-major
//! ```
//!
//! Values are stored as f32 and widened to f64 on load, so a write/read
//! round trip is exact to f32 precision.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DataError, Result};
use crate::tensor::Tensor;

const MAGIC: [u8; 4] = *b"MXT1";
const DTYPE_F32: u8 = 0;

pub fn write_tensor(path: &Path, tensor: &Tensor) -> Result<()> {
    let file = File::create(path).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
    let mut w = BufWriter::new(file);
    let io = |e| DataError::Io { path: path.to_path_buf(), source: e };
    w.write_all(&MAGIC).map_err(io)?;
    w.write_all(&[DTYPE_F32]).map_err(io)?;
    w.write_all(&(tensor.rank() as u32).to_le_bytes()).map_err(io)?;
    for &d in tensor.shape() {
        w.write_all(&(d as u32).to_le_bytes()).map_err(io)?;
    }
    for &v in tensor.data() {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let file = File::open(path).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path, "magic")?;
    if magic != MAGIC {
        return Err(DataError::BadMagic { path: path.to_path_buf(), found: magic });
    }
    let mut dtype = [0u8; 1];
    read_exact(&mut r, &mut dtype, path, "dtype")?;
    if dtype[0] != DTYPE_F32 {
        return Err(DataError::BadDtype { path: path.to_path_buf(), tag: dtype[0] });
    }
    let ndim = read_u32(&mut r, path, "ndim")? as usize;
    if ndim == 0 || ndim > 8 {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            detail: format!("implausible ndim {ndim}"),
        });
    }
    let mut dims = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let d = read_u32(&mut r, path, "dims")? as usize;
        if d == 0 {
            return Err(DataError::Truncated {
                path: path.to_path_buf(),
                detail: format!("dimension {i} is zero"),
            });
        }
        dims.push(d);
    }
    let numel: usize = dims.iter().product();
    let mut payload = vec![0u8; numel * 4];
    r.read_exact(&mut payload).map_err(|_| DataError::Truncated {
        path: path.to_path_buf(),
        detail: format!("payload shorter than {} f32 values", numel),
    })?;
    // Reject trailing garbage so corrupt files fail loudly.
    let mut probe = [0u8; 1];
    if r.read(&mut probe).map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })? != 0 {
        return Err(DataError::Truncated {
            path: path.to_path_buf(),
            detail: "trailing bytes after payload".to_string(),
        });
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Tensor::new(dims, data).map_err(|e| DataError::Truncated {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|_| DataError::Truncated {
        path: path.to_path_buf(),
        detail: format!("file ends inside {what}"),
    })
}

fn read_u32(r: &mut impl Read, path: &Path, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path, what)?;
    Ok(u32::from_le_bytes(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_within_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mxt");
        let mut rng = Rng::new(1);
        let data: Vec<f64> = (0..15).map(|_| rng.normal()).collect();
        let t = Tensor::new(vec![3, 5], data).unwrap();
        write_tensor(&path, &t).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in t.data().iter().zip(back.data().iter()) {
            let rel = (a - b).abs() / a.abs().max(1e-12);
            assert!(rel < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn bad_magic_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mxt");
        std::fs::write(&path, b"XXXX\x00\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x80\x3f").unwrap();
        assert!(matches!(read_tensor(&path), Err(DataError::BadMagic { .. })));
    }

    #[test]
    fn truncated_payload_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.mxt");
        let t = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        write_tensor(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_tensor(&path), Err(DataError::Truncated { .. })));
    }

    #[test]
    fn unknown_dtype_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dtype.mxt");
        let mut bytes = b"MXT1".to_vec();
        bytes.push(7);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&1.0f32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(read_tensor(&path), Err(DataError::BadDtype { tag: 7, .. })));
    }
}
