//! RVOL volume container.
//!
//! Layout: magic `RVL1`, dims (3 x u64 LE), spacing (3 x f64 LE), dtype
//! tag (1 = f32, 2 = f64), mask flag (u8; payload is dims-shaped u8s),
//! box table (count u64 + 6 x i64 per box: min_z, min_y, min_x, max_z,
//! max_y, max_x), then raw voxels. Files ending in `.gz` are wrapped in a
//! gzip stream. Box categories are not stored; they re-derive from the
//! mask via connected components.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;

use crate::volume::{BoxCorners, SegMask, Volume, VolumeMeta};

const MAGIC: &[u8; 4] = b"RVL1";

#[derive(Debug, thiserror::Error)]
pub enum RvolError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic: expected RVL1")]
    BadMagic,
    #[error("bad dtype tag {0}")]
    BadDType(u8),
    #[error("bad flag byte {0}")]
    BadFlag(u8),
}

/// Storage precision for voxel payloads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VoxelDType {
    F32,
    F64,
}

impl VoxelDType {
    fn tag(self) -> u8 {
        match self {
            VoxelDType::F32 => 1,
            VoxelDType::F64 => 2,
        }
    }
}

/// A volume record: voxels plus optional aligned mask and box table.
#[derive(Debug, Clone)]
pub struct RvolRecord {
    pub volume: Volume,
    pub mask: Option<SegMask>,
    pub boxes: Vec<BoxCorners>,
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub fn write(path: &Path, record: &RvolRecord, dtype: VoxelDType) -> Result<(), RvolError> {
    let file = File::create(path)?;
    if is_gz(path) {
        // mtime pinned to zero so identical content gives identical bytes.
        let enc = flate2::GzBuilder::new()
            .mtime(0)
            .write(file, flate2::Compression::default());
        let mut w = BufWriter::new(enc);
        write_body(&mut w, record, dtype)?;
        w.into_inner()
            .map_err(|e| RvolError::Io(io::Error::other(e.to_string())))?
            .finish()?;
    } else {
        let mut w = BufWriter::new(file);
        write_body(&mut w, record, dtype)?;
        w.flush()?;
    }
    Ok(())
}

fn write_body(w: &mut impl Write, record: &RvolRecord, dtype: VoxelDType) -> Result<(), RvolError> {
    let vol = &record.volume;
    w.write_all(MAGIC)?;
    for &d in &vol.meta.dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &s in &vol.meta.spacing {
        w.write_all(&s.to_le_bytes())?;
    }
    w.write_all(&[dtype.tag()])?;
    match &record.mask {
        Some(mask) => {
            assert_eq!(mask.dims, vol.meta.dims, "mask must align with volume");
            w.write_all(&[1u8])?;
            w.write_all(&mask.labels)?;
        }
        None => w.write_all(&[0u8])?,
    }
    w.write_all(&(record.boxes.len() as u64).to_le_bytes())?;
    for b in &record.boxes {
        for v in [b.min[0], b.min[1], b.min[2], b.max[0], b.max[1], b.max[2]] {
            w.write_all(&(v as i64).to_le_bytes())?;
        }
    }
    match dtype {
        VoxelDType::F32 => {
            for &v in &vol.voxels {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        VoxelDType::F64 => {
            for &v in &vol.voxels {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Read a record. Rescale metadata is not stored in the container; callers
/// supply the slope/intercept that apply to this dataset.
pub fn read(
    path: &Path,
    rescale_slope: f64,
    rescale_intercept: f64,
) -> Result<RvolRecord, RvolError> {
    let file = File::open(path)?;
    if is_gz(path) {
        read_body(
            &mut BufReader::new(GzDecoder::new(file)),
            rescale_slope,
            rescale_intercept,
        )
    } else {
        read_body(&mut BufReader::new(file), rescale_slope, rescale_intercept)
    }
}

fn read_u64(r: &mut impl Read) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_body(
    r: &mut impl Read,
    rescale_slope: f64,
    rescale_intercept: f64,
) -> Result<RvolRecord, RvolError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(RvolError::BadMagic);
    }
    let mut dims = [0usize; 3];
    for d in dims.iter_mut() {
        *d = read_u64(r)? as usize;
    }
    let mut spacing = [0f64; 3];
    for s in spacing.iter_mut() {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        *s = f64::from_le_bytes(b);
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let dtype = match tag[0] {
        1 => VoxelDType::F32,
        2 => VoxelDType::F64,
        t => return Err(RvolError::BadDType(t)),
    };
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let numel: usize = dims.iter().product();
    let mask = match flag[0] {
        0 => None,
        1 => {
            let mut labels = vec![0u8; numel];
            r.read_exact(&mut labels)?;
            Some(SegMask::new(labels, dims))
        }
        f => return Err(RvolError::BadFlag(f)),
    };
    let n_boxes = read_u64(r)? as usize;
    let mut boxes = Vec::with_capacity(n_boxes);
    for _ in 0..n_boxes {
        let mut vals = [0i64; 6];
        for v in vals.iter_mut() {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            *v = i64::from_le_bytes(b);
        }
        boxes.push(BoxCorners {
            min: [vals[0] as usize, vals[1] as usize, vals[2] as usize],
            max: [vals[3] as usize, vals[4] as usize, vals[5] as usize],
        });
    }

    let mut voxels = Vec::with_capacity(numel);
    match dtype {
        VoxelDType::F32 => {
            let mut b = [0u8; 4];
            for _ in 0..numel {
                r.read_exact(&mut b)?;
                voxels.push(f32::from_le_bytes(b) as f64);
            }
        }
        VoxelDType::F64 => {
            let mut b = [0u8; 8];
            for _ in 0..numel {
                r.read_exact(&mut b)?;
                voxels.push(f64::from_le_bytes(b));
            }
        }
    }
    Ok(RvolRecord {
        volume: Volume::new(
            voxels,
            VolumeMeta {
                rescale_slope,
                rescale_intercept,
                spacing,
                dims,
            },
        ),
        mask,
        boxes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_record() -> RvolRecord {
        let dims = [2, 3, 4];
        let voxels: Vec<f64> = (0..24).map(|v| v as f64 * 0.25).collect();
        let mut mask = SegMask::zeros(dims);
        mask.labels[5] = 3;
        RvolRecord {
            volume: Volume::new(
                voxels,
                VolumeMeta {
                    rescale_slope: 1.0,
                    rescale_intercept: -1024.0,
                    spacing: [2.0, 1.0, 1.0],
                    dims,
                },
            ),
            mask: Some(mask),
            boxes: vec![BoxCorners {
                min: [0, 1, 1],
                max: [0, 1, 1],
            }],
        }
    }

    #[test]
    fn roundtrip_plain_and_gz() {
        let dir = tempfile::tempdir().unwrap();
        let rec = sample_record();
        for name in ["a.rvol", "b.rvol.gz"] {
            let path = dir.path().join(name);
            write(&path, &rec, VoxelDType::F64).unwrap();
            let back = read(&path, 1.0, -1024.0).unwrap();
            assert_eq!(back.volume.voxels, rec.volume.voxels);
            assert_eq!(back.volume.meta.spacing, rec.volume.meta.spacing);
            assert_eq!(
                back.mask.as_ref().unwrap().labels,
                rec.mask.as_ref().unwrap().labels
            );
            assert_eq!(back.boxes, rec.boxes);
        }
    }

    #[test]
    fn rewrite_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let rec = sample_record();
        let p1 = dir.path().join("x.rvol.gz");
        let p2 = dir.path().join("y.rvol.gz");
        write(&p1, &rec, VoxelDType::F64).unwrap();
        let back = read(&p1, 1.0, -1024.0).unwrap();
        write(&p2, &back, VoxelDType::F64).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn unlabeled_record_omits_mask() {
        let dir = tempfile::tempdir().unwrap();
        let mut rec = sample_record();
        rec.mask = None;
        rec.boxes.clear();
        let path = dir.path().join("u.rvol");
        write(&path, &rec, VoxelDType::F32).unwrap();
        let back = read(&path, 1.0, -1024.0).unwrap();
        assert!(back.mask.is_none());
        assert!(back.boxes.is_empty());
        // f32 storage rounds values through f32.
        for (a, b) in back.volume.voxels.iter().zip(&rec.volume.voxels) {
            assert_eq!(*a, *b as f32 as f64);
        }
    }
}
