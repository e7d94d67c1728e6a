//! Binary container for named tensors.
//!
//! Layout (all integers little-endian):
//!   magic "ANCT", version u8, dtype u8 (0 = f64, 1 = f32), u16 zero,
//!   count u32, then per tensor: name_len u32, name bytes, rows u32,
//!   cols u32, row-major values.
//!
//! f64 payloads round-trip bit-exactly. f32 payloads exist for the
//! reduced-precision storage mode: parameters quantized to f32 before
//! writing also round-trip bit-exactly, because every stored value is
//! f32-representable by construction.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const MAGIC: &[u8; 4] = b"ANCT";
const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StorageDtype {
    F64,
    F32,
}

impl StorageDtype {
    fn code(self) -> u8 {
        match self {
            StorageDtype::F64 => 0,
            StorageDtype::F32 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(StorageDtype::F64),
            1 => Ok(StorageDtype::F32),
            other => Err(Error::data(format!("unknown tensor dtype code {other}"))),
        }
    }
}

pub fn write_tensors(
    path: &Path,
    entries: &[(String, &Matrix)],
    dtype: StorageDtype,
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.push(VERSION);
    buf.push(dtype.code());
    buf.extend_from_slice(&[0u8, 0u8]);
    buf.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, m) in entries {
        let name_bytes = name.as_bytes();
        buf.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(name_bytes);
        buf.extend_from_slice(&(m.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(m.cols() as u32).to_le_bytes());
        match dtype {
            StorageDtype::F64 => {
                for v in m.as_slice() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
            StorageDtype::F32 => {
                for v in m.as_slice() {
                    buf.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<(StorageDtype, Vec<(String, Matrix)>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fail = |msg: &str| Error::data(format!("{}: {msg}", path.display()));

    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > bytes.len() {
            return Err(fail("truncated tensor file"));
        }
        let s = &bytes[pos..pos + n];
        pos += n;
        Ok(s)
    };

    if take(4)? != MAGIC {
        return Err(fail("bad magic; not a tensor container"));
    }
    let version = take(1)?[0];
    if version != VERSION {
        return Err(fail(&format!("unsupported container version {version}")));
    }
    let dtype = StorageDtype::from_code(take(1)?[0])?;
    take(2)?;
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;

    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(name_len)?.to_vec())
            .map_err(|_| fail("tensor name is not utf-8"))?;
        let rows = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let n = rows * cols;
        let mut data = Vec::with_capacity(n);
        match dtype {
            StorageDtype::F64 => {
                let raw = take(n * 8)?;
                for chunk in raw.chunks_exact(8) {
                    data.push(f64::from_le_bytes(chunk.try_into().unwrap()));
                }
            }
            StorageDtype::F32 => {
                let raw = take(n * 4)?;
                for chunk in raw.chunks_exact(4) {
                    data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
                }
            }
        }
        entries.push((name, Matrix::from_vec(rows, cols, data)));
    }
    if pos != bytes.len() {
        return Err(fail("trailing bytes after last tensor"));
    }
    Ok((dtype, entries))
}

/// Convenience for single-tensor files (per-sample feature grids).
pub fn write_matrix(path: &Path, m: &Matrix) -> Result<()> {
    write_tensors(path, &[("data".to_string(), m)], StorageDtype::F64)
}

pub fn read_matrix(path: &Path) -> Result<Matrix> {
    let (_, mut entries) = read_tensors(path)?;
    if entries.len() != 1 {
        return Err(Error::data(format!(
            "{}: expected a single tensor, found {}",
            path.display(),
            entries.len()
        )));
    }
    Ok(entries.pop().unwrap().1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn f64_round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let a = Matrix::randn(3, 5, 1.0, 7);
        let b = Matrix::randn(1, 2, 0.02, 8);
        write_tensors(
            &path,
            &[("a".to_string(), &a), ("b".to_string(), &b)],
            StorageDtype::F64,
        )
        .unwrap();
        let (dtype, entries) = read_tensors(&path).unwrap();
        assert_eq!(dtype, StorageDtype::F64);
        assert_eq!(entries[0].0, "a");
        assert_eq!(entries[0].1, a);
        assert_eq!(entries[1].1, b);
    }

    #[test]
    fn f32_round_trip_is_exact_for_f32_representable_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let mut m = Matrix::randn(2, 2, 1.0, 9);
        for v in m.as_mut_slice() {
            *v = *v as f32 as f64;
        }
        write_tensors(&path, &[("m".to_string(), &m)], StorageDtype::F32).unwrap();
        let (dtype, entries) = read_tensors(&path).unwrap();
        assert_eq!(dtype, StorageDtype::F32);
        assert_eq!(entries[0].1, m);
    }

    #[test]
    fn corrupt_files_are_reported_as_data_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a tensor file").unwrap();
        let err = read_tensors(&path).unwrap_err();
        assert_eq!(err.category(), crate::error::ErrorCategory::Data);
    }
}
