//! Binary checkpoint format.
//!
//! Little-endian throughout: the magic bytes `ASTM1`, then one block per
//! parameter: name length (u32), name bytes, dtype (u8: 0 = f64, 1 = f32),
//! rank (u8), extents (u64 each), then the raw buffer. Values are read
//! until end of file. Hyperparameters live in a JSON sidecar written by
//! the training loop.

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use super::param::ParamStore;
use super::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"ASTM1";

const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes; not a checkpoint file")]
    BadMagic,
    #[error("unsupported dtype tag {0}")]
    BadDtype(u8),
    #[error("unsupported rank {0}")]
    BadRank(u8),
    #[error("checkpoint parameter `{0}` not present in model")]
    UnknownParam(String),
    #[error("parameter `{name}` has shape {found:?} but model expects {expected:?}")]
    ShapeMismatch {
        name: String,
        found: (usize, usize),
        expected: (usize, usize),
    },
    #[error("model parameter `{0}` missing from checkpoint")]
    MissingParam(String),
    #[error("truncated checkpoint while reading `{0}`")]
    Truncated(String),
}

/// Write every parameter tensor. With `as_f32` the buffers are stored in
/// single precision (loading converts back to f64).
pub fn save(store: &ParamStore, path: &Path, as_f32: bool) -> Result<(), CheckpointError> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    for p in store.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&[if as_f32 { DTYPE_F32 } else { DTYPE_F64 }])?;
        let (r, c) = p.tensor.shape();
        w.write_all(&[2u8])?;
        w.write_all(&(r as u64).to_le_bytes())?;
        w.write_all(&(c as u64).to_le_bytes())?;
        if as_f32 {
            for &v in p.tensor.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        } else {
            for &v in p.tensor.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Load a checkpoint into an already-constructed store. Every checkpoint
/// parameter must exist in the store with a matching shape, and vice versa.
pub fn load_into(store: &mut ParamStore, path: &Path) -> Result<(), CheckpointError> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let mut seen = vec![false; store.len()];
    loop {
        let mut len_buf = [0u8; 4];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes)
            .map_err(|_| CheckpointError::Truncated("<name>".into()))?;
        let name = String::from_utf8_lossy(&name_bytes).to_string();
        let mut tag = [0u8; 2];
        r.read_exact(&mut tag)
            .map_err(|_| CheckpointError::Truncated(name.clone()))?;
        let dtype = tag[0];
        let rank = tag[1];
        if rank != 2 {
            return Err(CheckpointError::BadRank(rank));
        }
        let mut ext = [0u8; 8];
        r.read_exact(&mut ext)
            .map_err(|_| CheckpointError::Truncated(name.clone()))?;
        let rows = u64::from_le_bytes(ext) as usize;
        r.read_exact(&mut ext)
            .map_err(|_| CheckpointError::Truncated(name.clone()))?;
        let cols = u64::from_le_bytes(ext) as usize;
        let count = rows * cols;
        let mut data = Vec::with_capacity(count);
        match dtype {
            DTYPE_F64 => {
                let mut buf = [0u8; 8];
                for _ in 0..count {
                    r.read_exact(&mut buf)
                        .map_err(|_| CheckpointError::Truncated(name.clone()))?;
                    data.push(f64::from_le_bytes(buf));
                }
            }
            DTYPE_F32 => {
                let mut buf = [0u8; 4];
                for _ in 0..count {
                    r.read_exact(&mut buf)
                        .map_err(|_| CheckpointError::Truncated(name.clone()))?;
                    data.push(f32::from_le_bytes(buf) as f64);
                }
            }
            other => return Err(CheckpointError::BadDtype(other)),
        }
        let id = store
            .by_name(&name)
            .ok_or_else(|| CheckpointError::UnknownParam(name.clone()))?;
        let expected = store.get(id).tensor.shape();
        if expected != (rows, cols) {
            return Err(CheckpointError::ShapeMismatch {
                name,
                found: (rows, cols),
                expected,
            });
        }
        store.get_mut(id).tensor = Tensor::new(rows, cols, data);
        seen[id.0] = true;
    }
    for (i, s) in seen.iter().enumerate() {
        if !s {
            let name = store.iter().nth(i).unwrap().name.clone();
            return Err(CheckpointError::MissingParam(name));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_f64() {
        let mut store = ParamStore::new();
        store.add("a/w", Tensor::new(2, 3, vec![1.0, -2.5, 3.25, 0.0, 9.0, -0.125]));
        store.add("b", Tensor::scalar(0.5));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.astm");
        save(&store, &path, false).unwrap();

        let mut other = store.clone();
        for id in other.ids().collect::<Vec<_>>() {
            other.get_mut(id).tensor.data_mut().fill(7.0);
        }
        load_into(&mut other, &path).unwrap();
        for (p, q) in store.iter().zip(other.iter()) {
            assert_eq!(p.tensor, q.tensor);
        }
    }

    #[test]
    fn f32_storage_loses_only_precision() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::new(1, 2, vec![0.1234567890123, -7.5]));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.astm");
        save(&store, &path, true).unwrap();
        let mut other = store.clone();
        load_into(&mut other, &path).unwrap();
        let a = other.iter().next().unwrap().tensor.data()[0];
        assert!((a - 0.1234567890123).abs() < 1e-7);
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut store = ParamStore::new();
        store.add("w", Tensor::zeros(2, 2));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.astm");
        save(&store, &path, false).unwrap();
        let mut other = ParamStore::new();
        other.add("w", Tensor::zeros(3, 2));
        assert!(matches!(
            load_into(&mut other, &path),
            Err(CheckpointError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.astm");
        std::fs::write(&path, b"NOPE!").unwrap();
        let mut store = ParamStore::new();
        assert!(matches!(load_into(&mut store, &path), Err(CheckpointError::BadMagic)));
    }
}
