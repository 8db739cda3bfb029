//! Binary checkpoint container.
//!
//! Layout: magic `VXT1`, entry count (u64 LE), then per tensor:
//! name length (u64 LE) + UTF-8 name, rank (u64 LE), extents (u64 LE each),
//! dtype tag (1 = f32, 2 = f64), raw little-endian values. Round-trips
//! bit-exactly: F32 tensors always hold f32-representable values.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::tensor::{DType, Tensor};

const MAGIC: &[u8; 4] = b"VXT1";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected VXT1")]
    BadMagic,
    #[error("bad dtype tag {0}")]
    BadDType(u8),
    #[error("invalid utf-8 in tensor name")]
    BadName,
    #[error("checkpoint missing tensor {0:?}")]
    Missing(String),
    #[error("shape mismatch for {name:?}: checkpoint {found:?}, model {expected:?}")]
    Shape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
}

fn write_u64(w: &mut impl Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn save(path: &Path, entries: &[(String, Tensor)]) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    write_u64(&mut w, entries.len() as u64)?;
    for (name, t) in entries {
        write_u64(&mut w, name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        write_u64(&mut w, t.rank() as u64)?;
        for &e in t.shape() {
            write_u64(&mut w, e as u64)?;
        }
        w.write_all(&[t.dtype().tag()])?;
        let d = t.data();
        match t.dtype() {
            DType::F32 => {
                for &v in d.iter() {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
            DType::F64 => {
                for &v in d.iter() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct Loaded {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub data: Vec<f64>,
}

pub fn load(path: &Path) -> Result<Vec<Loaded>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let count = read_u64(&mut r)?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u64(&mut r)? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.read_exact(&mut name_buf)?;
        let name = String::from_utf8(name_buf).map_err(|_| CheckpointError::BadName)?;
        let rank = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let tag = {
            let mut b = [0u8; 1];
            r.read_exact(&mut b)?;
            b[0]
        };
        let dtype = DType::from_tag(tag).ok_or(CheckpointError::BadDType(tag))?;
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        match dtype {
            DType::F32 => {
                let mut buf = [0u8; 4];
                for _ in 0..numel {
                    r.read_exact(&mut buf)?;
                    data.push(f32::from_le_bytes(buf) as f64);
                }
            }
            DType::F64 => {
                let mut buf = [0u8; 8];
                for _ in 0..numel {
                    r.read_exact(&mut buf)?;
                    data.push(f64::from_le_bytes(buf));
                }
            }
        }
        out.push(Loaded {
            name,
            shape,
            dtype,
            data,
        });
    }
    Ok(out)
}

/// Load values into an existing named parameter set. Every model tensor
/// must be present in the checkpoint with a matching shape.
pub fn load_into(path: &Path, params: &[(String, Tensor)]) -> Result<(), CheckpointError> {
    let loaded = load(path)?;
    let by_name: std::collections::HashMap<&str, &Loaded> =
        loaded.iter().map(|l| (l.name.as_str(), l)).collect();
    for (name, t) in params {
        let entry = by_name
            .get(name.as_str())
            .ok_or_else(|| CheckpointError::Missing(name.clone()))?;
        if entry.shape != t.shape() {
            return Err(CheckpointError::Shape {
                name: name.clone(),
                found: entry.shape.clone(),
                expected: t.shape().to_vec(),
            });
        }
        t.set_data(entry.data.clone());
    }
    Ok(())
}
