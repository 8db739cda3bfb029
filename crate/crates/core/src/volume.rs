//! Preprocessing math on decoded voxel arrays: Hounsfield conversion,
//! window-clip normalization, anisotropic resampling, center pad/crop,
//! and tight bounding-box extraction from label masks.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("degenerate volume: resampling {dims:?} at {spacing:?} toward {target:?} yields a zero extent")]
    DegenerateVolume {
        dims: [usize; 3],
        spacing: [f64; 3],
        target: [f64; 3],
    },
    #[error("volume is not normalized: voxel value {0} outside [0, 1]")]
    NotNormalized(f64),
    #[error("data error: {0}")]
    Data(String),
}

/// Acquisition metadata: rescale terms and physical voxel spacing.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct VolumeMeta {
    pub rescale_slope: f64,
    pub rescale_intercept: f64,
    /// (z, y, x) in millimetres, each > 0.
    pub spacing: [f64; 3],
    pub dims: [usize; 3],
}

/// Voxel grid in (Z, Y, X) order plus metadata.
#[derive(Debug, Clone)]
pub struct Volume {
    pub voxels: Vec<f64>,
    pub meta: VolumeMeta,
    pub normalized: bool,
}

impl Volume {
    pub fn new(voxels: Vec<f64>, meta: VolumeMeta) -> Volume {
        assert_eq!(voxels.len(), meta.dims.iter().product::<usize>());
        Volume {
            voxels,
            meta,
            normalized: false,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.meta.dims
    }

    /// Verify all voxels lie in [0, 1] and set the normalized flag.
    pub fn mark_normalized(mut self) -> Result<Volume, PipelineError> {
        for &v in &self.voxels {
            if !(0.0..=1.0).contains(&v) {
                return Err(PipelineError::NotNormalized(v));
            }
        }
        self.normalized = true;
        Ok(self)
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> f64 {
        let [_, ny, nx] = self.meta.dims;
        self.voxels[(z * ny + y) * nx + x]
    }
}

/// Integer label grid aligned to a volume.
#[derive(Debug, Clone, PartialEq)]
pub struct SegMask {
    pub labels: Vec<u8>,
    pub dims: [usize; 3],
}

impl SegMask {
    pub fn new(labels: Vec<u8>, dims: [usize; 3]) -> SegMask {
        assert_eq!(labels.len(), dims.iter().product::<usize>());
        SegMask { labels, dims }
    }

    pub fn zeros(dims: [usize; 3]) -> SegMask {
        SegMask {
            labels: vec![0; dims.iter().product()],
            dims,
        }
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> u8 {
        self.labels[(z * self.dims[1] + y) * self.dims[2] + x]
    }

    pub fn is_empty_mask(&self) -> bool {
        self.labels.iter().all(|&v| v == 0)
    }
}

/// Inclusive voxel-index hull `(min_z, min_y, min_x) ..= (max_z, max_y, max_x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BoxCorners {
    pub min: [usize; 3],
    pub max: [usize; 3],
}

impl BoxCorners {
    pub fn voxel_count(&self) -> usize {
        (0..3).map(|a| self.max[a] - self.min[a] + 1).product()
    }

    pub fn contains(&self, p: [usize; 3]) -> bool {
        (0..3).all(|a| self.min[a] <= p[a] && p[a] <= self.max[a])
    }

    /// Union hull of two boxes.
    pub fn union(&self, other: &BoxCorners) -> BoxCorners {
        let mut min = [0; 3];
        let mut max = [0; 3];
        for a in 0..3 {
            min[a] = self.min[a].min(other.min[a]);
            max[a] = self.max[a].max(other.max[a]);
        }
        BoxCorners { min, max }
    }
}

/// `out = raw * slope + intercept`, elementwise.
pub fn to_hounsfield(raw: &[f64], slope: f64, intercept: f64) -> Vec<f64> {
    raw.iter().map(|v| v * slope + intercept).collect()
}

pub const DEFAULT_HU_WINDOW: (f64, f64) = (-100.0, 300.0);

/// Clip to `[lo, hi]` then min-max normalize to `[0, 1]`.
pub fn clip_normalize(hu: &[f64], lo: f64, hi: f64) -> Result<Vec<f64>, PipelineError> {
    if lo >= hi {
        return Err(PipelineError::Config(format!(
            "clip window requires lo < hi, got [{lo}, {hi}]"
        )));
    }
    let w = hi - lo;
    Ok(hu.iter().map(|&v| (v.clamp(lo, hi) - lo) / w).collect())
}

/// Interpolation mode for resampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResampleMode {
    Trilinear,
    Nearest,
}

fn resampled_dims(dims: [usize; 3], spacing: [f64; 3], target: [f64; 3]) -> [usize; 3] {
    let mut out = [0; 3];
    for a in 0..3 {
        out[a] = (dims[a] as f64 * spacing[a] / target[a]).round() as usize;
    }
    out
}

/// Continuous source index for target voxel `t` with voxel centers at
/// `index + 0.5` in physical units.
fn source_index(t: usize, target_sp: f64, src_sp: f64) -> f64 {
    (t as f64 + 0.5) * target_sp / src_sp - 0.5
}

/// Resample a volume to `target_spacing`. Trilinear samples at
/// voxel-center-aligned coordinates with edge clamping; nearest rounds
/// half away from zero. Identity spacing returns the input exactly.
pub fn resample(
    vol: &Volume,
    target_spacing: [f64; 3],
    mode: ResampleMode,
) -> Result<Volume, PipelineError> {
    if target_spacing.iter().any(|s| *s <= 0.0) {
        return Err(PipelineError::Config(format!(
            "target spacing must be positive, got {target_spacing:?}"
        )));
    }
    if vol.meta.spacing == target_spacing {
        return Ok(vol.clone());
    }
    let src_dims = vol.meta.dims;
    let dims = resampled_dims(src_dims, vol.meta.spacing, target_spacing);
    if dims.contains(&0) {
        return Err(PipelineError::DegenerateVolume {
            dims: src_dims,
            spacing: vol.meta.spacing,
            target: target_spacing,
        });
    }
    let [sz, sy, sx] = src_dims;
    let mut voxels = vec![0.0; dims.iter().product()];
    let mut i = 0;
    for z in 0..dims[0] {
        let fz = source_index(z, target_spacing[0], vol.meta.spacing[0]);
        for y in 0..dims[1] {
            let fy = source_index(y, target_spacing[1], vol.meta.spacing[1]);
            for x in 0..dims[2] {
                let fx = source_index(x, target_spacing[2], vol.meta.spacing[2]);
                voxels[i] = match mode {
                    ResampleMode::Trilinear => {
                        trilinear_sample(&vol.voxels, [sz, sy, sx], [fz, fy, fx])
                    }
                    ResampleMode::Nearest => {
                        let iz = nearest_index(fz, sz);
                        let iy = nearest_index(fy, sy);
                        let ix = nearest_index(fx, sx);
                        vol.voxels[(iz * sy + iy) * sx + ix]
                    }
                };
                i += 1;
            }
        }
    }
    Ok(Volume {
        voxels,
        meta: VolumeMeta {
            spacing: target_spacing,
            dims,
            ..vol.meta
        },
        normalized: vol.normalized,
    })
}

/// Resample a label mask with nearest-neighbor interpolation, which is the
/// only mode that preserves discrete labels.
pub fn resample_mask(
    mask: &SegMask,
    spacing: [f64; 3],
    target_spacing: [f64; 3],
) -> Result<SegMask, PipelineError> {
    if spacing == target_spacing {
        return Ok(mask.clone());
    }
    let dims = resampled_dims(mask.dims, spacing, target_spacing);
    if dims.contains(&0) {
        return Err(PipelineError::DegenerateVolume {
            dims: mask.dims,
            spacing,
            target: target_spacing,
        });
    }
    let [sz, sy, sx] = mask.dims;
    let mut labels = vec![0u8; dims.iter().product()];
    let mut i = 0;
    for z in 0..dims[0] {
        let iz = nearest_index(source_index(z, target_spacing[0], spacing[0]), sz);
        for y in 0..dims[1] {
            let iy = nearest_index(source_index(y, target_spacing[1], spacing[1]), sy);
            for x in 0..dims[2] {
                let ix = nearest_index(source_index(x, target_spacing[2], spacing[2]), sx);
                labels[i] = mask.labels[(iz * sy + iy) * sx + ix];
                i += 1;
            }
        }
    }
    Ok(SegMask { labels, dims })
}

fn nearest_index(f: f64, extent: usize) -> usize {
    // round() is round-half-away-from-zero.
    (f.round().max(0.0) as usize).min(extent - 1)
}

pub fn trilinear_sample(voxels: &[f64], dims: [usize; 3], pos: [f64; 3]) -> f64 {
    let [nz, ny, nx] = dims;
    let clamp = |f: f64, n: usize| f.clamp(0.0, (n - 1) as f64);
    let fz = clamp(pos[0], nz);
    let fy = clamp(pos[1], ny);
    let fx = clamp(pos[2], nx);
    let z0 = fz.floor() as usize;
    let y0 = fy.floor() as usize;
    let x0 = fx.floor() as usize;
    let z1 = (z0 + 1).min(nz - 1);
    let y1 = (y0 + 1).min(ny - 1);
    let x1 = (x0 + 1).min(nx - 1);
    let wz = fz - z0 as f64;
    let wy = fy - y0 as f64;
    let wx = fx - x0 as f64;
    let at = |z: usize, y: usize, x: usize| voxels[(z * ny + y) * nx + x];
    let mut acc = 0.0;
    for (z, cz) in [(z0, 1.0 - wz), (z1, wz)] {
        if cz == 0.0 {
            continue;
        }
        for (y, cy) in [(y0, 1.0 - wy), (y1, wy)] {
            if cy == 0.0 {
                continue;
            }
            for (x, cx) in [(x0, 1.0 - wx), (x1, wx)] {
                if cx == 0.0 {
                    continue;
                }
                acc += cz * cy * cx * at(z, y, x);
            }
        }
    }
    acc
}

fn pad_crop_axis(src: usize, tgt: usize) -> (usize, usize) {
    // Returns (src_start, dst_start): copy overlap of length min(src, tgt).
    if src >= tgt {
        // Crop symmetrically, extra voxel removed from the high side.
        ((src - tgt) / 2, 0)
    } else {
        // Pad symmetrically, extra voxel on the high side.
        (0, (tgt - src) / 2)
    }
}

fn center_pad_crop_raw<T: Copy + Default>(data: &[T], src: [usize; 3], tgt: [usize; 3]) -> Vec<T> {
    let mut out = vec![T::default(); tgt.iter().product()];
    let mut src_start = [0; 3];
    let mut dst_start = [0; 3];
    let mut span = [0; 3];
    for a in 0..3 {
        let (s, d) = pad_crop_axis(src[a], tgt[a]);
        src_start[a] = s;
        dst_start[a] = d;
        span[a] = src[a].min(tgt[a]);
    }
    for z in 0..span[0] {
        for y in 0..span[1] {
            let src_base =
                ((src_start[0] + z) * src[1] + (src_start[1] + y)) * src[2] + src_start[2];
            let dst_base =
                ((dst_start[0] + z) * tgt[1] + (dst_start[1] + y)) * tgt[2] + dst_start[2];
            out[dst_base..dst_base + span[2]]
                .copy_from_slice(&src_base_slice(data, src_base, span[2]));
        }
    }
    out
}

fn src_base_slice<T: Copy>(data: &[T], base: usize, len: usize) -> Vec<T> {
    data[base..base + len].to_vec()
}

/// Symmetric center pad (value 0) or crop to `target_dims`.
pub fn center_pad_crop(vol: &Volume, target_dims: [usize; 3]) -> Volume {
    if vol.meta.dims == target_dims {
        return vol.clone();
    }
    let voxels = center_pad_crop_raw(&vol.voxels, vol.meta.dims, target_dims);
    Volume {
        voxels,
        meta: VolumeMeta {
            dims: target_dims,
            ..vol.meta
        },
        normalized: vol.normalized,
    }
}

/// Mask variant of [`center_pad_crop`].
pub fn center_pad_crop_mask(mask: &SegMask, target_dims: [usize; 3]) -> SegMask {
    if mask.dims == target_dims {
        return mask.clone();
    }
    SegMask {
        labels: center_pad_crop_raw(&mask.labels, mask.dims, target_dims),
        dims: target_dims,
    }
}

/// Voxel adjacency for connected components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Connectivity {
    Six,
    TwentySix,
}

/// One tight hull per connected component of each nonzero label, dropping
/// components smaller than `min_voxels`. Ordered by ascending
/// (min_z, min_y, min_x).
pub fn extract_boxes(
    mask: &SegMask,
    connectivity: Connectivity,
    min_voxels: usize,
) -> Vec<(BoxCorners, u8)> {
    let [nz, ny, nx] = mask.dims;
    let idx = |z: usize, y: usize, x: usize| (z * ny + y) * nx + x;
    let mut visited = vec![false; mask.labels.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let i = idx(z, y, x);
                let label = mask.labels[i];
                if label == 0 || visited[i] {
                    continue;
                }
                // Flood this component.
                visited[i] = true;
                stack.push([z, y, x]);
                let mut min = [z, y, x];
                let mut max = [z, y, x];
                let mut count = 0usize;
                while let Some([cz, cy, cx]) = stack.pop() {
                    count += 1;
                    for a in 0..3 {
                        min[a] = min[a].min([cz, cy, cx][a]);
                        max[a] = max[a].max([cz, cy, cx][a]);
                    }
                    let lo = [
                        cz.saturating_sub(1),
                        cy.saturating_sub(1),
                        cx.saturating_sub(1),
                    ];
                    let hi = [
                        (cz + 1).min(nz - 1),
                        (cy + 1).min(ny - 1),
                        (cx + 1).min(nx - 1),
                    ];
                    for zz in lo[0]..=hi[0] {
                        for yy in lo[1]..=hi[1] {
                            for xx in lo[2]..=hi[2] {
                                let manhattan = zz.abs_diff(cz) + yy.abs_diff(cy) + xx.abs_diff(cx);
                                if manhattan == 0 {
                                    continue;
                                }
                                if connectivity == Connectivity::Six && manhattan != 1 {
                                    continue;
                                }
                                let j = idx(zz, yy, xx);
                                if !visited[j] && mask.labels[j] == label {
                                    visited[j] = true;
                                    stack.push([zz, yy, xx]);
                                }
                            }
                        }
                    }
                }
                if count >= min_voxels {
                    out.push((BoxCorners { min, max }, label));
                }
            }
        }
    }
    out.sort_by_key(|(b, label)| (b.min, b.max, *label));
    out
}

/// Parameters for the labeled preprocessing pipeline.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessParams {
    pub hu_lo: f64,
    pub hu_hi: f64,
    pub target_spacing: [f64; 3],
    pub target_dims: [usize; 3],
    pub connectivity: Connectivity,
    pub min_voxels: usize,
    /// Crop to the union hull of all components before pad/crop.
    pub roi_crop: bool,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        PreprocessParams {
            hu_lo: DEFAULT_HU_WINDOW.0,
            hu_hi: DEFAULT_HU_WINDOW.1,
            target_spacing: [2.0, 1.0, 1.0],
            target_dims: [24, 24, 24],
            connectivity: Connectivity::TwentySix,
            min_voxels: 8,
            roi_crop: true,
        }
    }
}

/// Output of the labeled pipeline.
#[derive(Debug, Clone)]
pub struct PreprocessedLabeled {
    pub volume: Volume,
    pub mask: SegMask,
    pub boxes: Vec<(BoxCorners, u8)>,
    pub warnings: Vec<String>,
}

/// Unlabeled pipeline: HU conversion, clip-normalize, resample, pad/crop.
pub fn preprocess_unlabeled(
    vol: &Volume,
    params: &PreprocessParams,
) -> Result<Volume, PipelineError> {
    let hu = to_hounsfield(
        &vol.voxels,
        vol.meta.rescale_slope,
        vol.meta.rescale_intercept,
    );
    let norm = clip_normalize(&hu, params.hu_lo, params.hu_hi)?;
    let normalized = Volume {
        voxels: norm,
        meta: vol.meta,
        normalized: true,
    };
    let resampled = resample(&normalized, params.target_spacing, ResampleMode::Trilinear)?;
    Ok(center_pad_crop(&resampled, params.target_dims))
}

/// Labeled pipeline: the unlabeled steps plus aligned mask resampling,
/// region-of-interest cropping to the union hull, and final box
/// re-extraction on the output grid.
pub fn preprocess_labeled(
    vol: &Volume,
    mask: &SegMask,
    params: &PreprocessParams,
) -> Result<PreprocessedLabeled, PipelineError> {
    if mask.dims != vol.meta.dims {
        return Err(PipelineError::Data(format!(
            "mask dims {:?} do not match volume dims {:?}",
            mask.dims, vol.meta.dims
        )));
    }
    let mut warnings = Vec::new();
    let hu = to_hounsfield(
        &vol.voxels,
        vol.meta.rescale_slope,
        vol.meta.rescale_intercept,
    );
    let norm = clip_normalize(&hu, params.hu_lo, params.hu_hi)?;
    let normalized = Volume {
        voxels: norm,
        meta: vol.meta,
        normalized: true,
    };
    let mut v = resample(&normalized, params.target_spacing, ResampleMode::Trilinear)?;
    let mut m = resample_mask(mask, vol.meta.spacing, params.target_spacing)?;

    let components = extract_boxes(&m, params.connectivity, params.min_voxels);
    if components.is_empty() {
        warnings.push("mask has no components above min_voxels; skipping ROI crop".to_string());
    } else if params.roi_crop {
        let hull = components
            .iter()
            .skip(1)
            .fold(components[0].0, |acc, (b, _)| acc.union(b));
        v = crop_to(&v, &hull);
        m = crop_mask_to(&m, &hull);
    }

    let volume = center_pad_crop(&v, params.target_dims);
    let final_mask = center_pad_crop_mask(&m, params.target_dims);
    let boxes = extract_boxes(&final_mask, params.connectivity, params.min_voxels);
    Ok(PreprocessedLabeled {
        volume,
        mask: final_mask,
        boxes,
        warnings,
    })
}

fn crop_to(vol: &Volume, hull: &BoxCorners) -> Volume {
    let dims = [
        hull.max[0] - hull.min[0] + 1,
        hull.max[1] - hull.min[1] + 1,
        hull.max[2] - hull.min[2] + 1,
    ];
    let mut voxels = Vec::with_capacity(dims.iter().product());
    for z in hull.min[0]..=hull.max[0] {
        for y in hull.min[1]..=hull.max[1] {
            let base = (z * vol.meta.dims[1] + y) * vol.meta.dims[2] + hull.min[2];
            voxels.extend_from_slice(&vol.voxels[base..base + dims[2]]);
        }
    }
    Volume {
        voxels,
        meta: VolumeMeta { dims, ..vol.meta },
        normalized: vol.normalized,
    }
}

fn crop_mask_to(mask: &SegMask, hull: &BoxCorners) -> SegMask {
    let dims = [
        hull.max[0] - hull.min[0] + 1,
        hull.max[1] - hull.min[1] + 1,
        hull.max[2] - hull.min[2] + 1,
    ];
    let mut labels = Vec::with_capacity(dims.iter().product());
    for z in hull.min[0]..=hull.max[0] {
        for y in hull.min[1]..=hull.max[1] {
            let base = (z * mask.dims[1] + y) * mask.dims[2] + hull.min[2];
            labels.extend_from_slice(&mask.labels[base..base + dims[2]]);
        }
    }
    SegMask { labels, dims }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn meta(dims: [usize; 3], spacing: [f64; 3]) -> VolumeMeta {
        VolumeMeta {
            rescale_slope: 1.0,
            rescale_intercept: -1024.0,
            spacing,
            dims,
        }
    }

    #[test]
    fn hounsfield_anchor_values() {
        assert_eq!(to_hounsfield(&[0.0], 1.0, -1024.0), vec![-1024.0]);
        assert_eq!(to_hounsfield(&[100.0], 1.0, -1024.0), vec![-924.0]);
        assert_eq!(to_hounsfield(&[50.0], 2.0, 0.0), vec![100.0]);
    }

    #[test]
    fn clip_normalize_window_anchors() {
        let out = clip_normalize(&[-100.0, 100.0, 300.0, -500.0, 900.0], -100.0, 300.0).unwrap();
        assert_eq!(out, vec![0.0, 0.5, 1.0, 0.0, 1.0]);
        assert!(clip_normalize(&[0.0], 10.0, 10.0).is_err());
        assert!(clip_normalize(&[0.0], 10.0, -10.0).is_err());
    }

    #[test]
    fn normalize_idempotence() {
        let (lo, hi) = DEFAULT_HU_WINDOW;
        let xs: Vec<f64> = (-50..150).map(|v| v as f64 * 5.0).collect();
        let once = clip_normalize(&xs, lo, hi).unwrap();
        let rescaled: Vec<f64> = once.iter().map(|v| v * (hi - lo) + lo).collect();
        let twice = clip_normalize(&rescaled, lo, hi).unwrap();
        for (a, b) in once.iter().zip(&twice) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn resample_identity_spacing_is_exact() {
        let dims = [4, 5, 6];
        let vox: Vec<f64> = (0..120).map(|v| (v as f64).sin()).collect();
        let v = Volume::new(vox.clone(), meta(dims, [2.0, 1.0, 1.0]));
        let r = resample(&v, [2.0, 1.0, 1.0], ResampleMode::Trilinear).unwrap();
        assert_eq!(r.voxels, vox);
        assert_eq!(r.meta.dims, dims);
    }

    #[test]
    fn resample_linear_ramp_downsample() {
        // Ramp along x: value = x index. Downsample x by 2.
        let dims = [1, 1, 8];
        let vox: Vec<f64> = (0..8).map(|v| v as f64).collect();
        let v = Volume::new(vox, meta(dims, [1.0, 1.0, 1.0]));
        let r = resample(&v, [1.0, 1.0, 2.0], ResampleMode::Trilinear).unwrap();
        assert_eq!(r.meta.dims, [1, 1, 4]);
        // Direct evaluation: target center x_t -> source index 2*(t+0.5)-0.5.
        for t in 0..4 {
            let src = 2.0 * (t as f64 + 0.5) - 0.5;
            let expect = src.min(7.0); // ramp value equals (clamped) index
            assert!((r.voxels[t] - expect).abs() < 1e-9, "t={t}");
        }
        // Endpoints preserved under edge clamping.
        assert!((r.voxels[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn nearest_mask_resample_stays_binary() {
        let dims = [4, 4, 4];
        let labels: Vec<u8> = (0..64).map(|i| (i % 3 == 0) as u8).collect();
        let m = SegMask::new(labels, dims);
        let r = resample_mask(&m, [1.0, 1.0, 1.0], [0.7, 1.3, 0.9]).unwrap();
        assert!(r.labels.iter().all(|&v| v == 0 || v == 1));
    }

    #[test]
    fn pad_crop_symmetry_rules() {
        // Length 4 -> 6: original occupies indices 1..=4.
        let v = Volume::new(vec![1.0, 2.0, 3.0, 4.0], meta([1, 1, 4], [1.0, 1.0, 1.0]));
        let p = center_pad_crop(&v, [1, 1, 6]);
        assert_eq!(p.voxels, vec![0.0, 1.0, 2.0, 3.0, 4.0, 0.0]);
        // Length 6 -> 4: indices 1..=4 survive.
        let v6 = Volume::new(
            vec![9.0, 1.0, 2.0, 3.0, 4.0, 8.0],
            meta([1, 1, 6], [1.0, 1.0, 1.0]),
        );
        let c = center_pad_crop(&v6, [1, 1, 4]);
        assert_eq!(c.voxels, vec![1.0, 2.0, 3.0, 4.0]);
        // Identity.
        let same = center_pad_crop(&v, [1, 1, 4]);
        assert_eq!(same.voxels, v.voxels);
    }

    #[test]
    fn pad_then_crop_roundtrip() {
        let dims = [3, 4, 5];
        let vox: Vec<f64> = (0..60).map(|v| v as f64 + 1.0).collect();
        let v = Volume::new(vox.clone(), meta(dims, [1.0; 3]));
        let padded = center_pad_crop(&v, [5, 7, 9]);
        let back = center_pad_crop(&padded, dims);
        assert_eq!(back.voxels, vox);
    }

    #[test]
    fn extract_single_voxel_and_empty() {
        let mut m = SegMask::zeros([8, 8, 8]);
        m.labels[(3 * 8 + 4) * 8 + 5] = 2;
        let boxes = extract_boxes(&m, Connectivity::TwentySix, 0);
        assert_eq!(boxes.len(), 1);
        assert_eq!(boxes[0].0.min, [3, 4, 5]);
        assert_eq!(boxes[0].0.max, [3, 4, 5]);
        assert_eq!(boxes[0].1, 2);

        let empty = SegMask::zeros([4, 4, 4]);
        assert!(extract_boxes(&empty, Connectivity::TwentySix, 0).is_empty());
    }

    #[test]
    fn connectivity_six_vs_twentysix_on_diagonal() {
        let mut m = SegMask::zeros([2, 2, 2]);
        m.labels[0] = 1; // (0,0,0)
        m.labels[7] = 1; // (1,1,1) diagonal neighbor
        assert_eq!(extract_boxes(&m, Connectivity::TwentySix, 0).len(), 1);
        assert_eq!(extract_boxes(&m, Connectivity::Six, 0).len(), 2);
    }

    #[test]
    fn min_voxels_filters_small_components() {
        let mut m = SegMask::zeros([6, 6, 6]);
        m.labels[0] = 1; // single voxel
        for z in 2..5 {
            for y in 2..5 {
                for x in 2..5 {
                    m.labels[(z * 6 + y) * 6 + x] = 1;
                }
            }
        }
        let boxes = extract_boxes(&m, Connectivity::TwentySix, 8);
        assert_eq!(boxes.len(), 1);
        assert_eq!(boxes[0].0.min, [2, 2, 2]);
    }

    #[test]
    fn preprocess_labeled_empty_mask_warns() {
        let dims = [8, 8, 8];
        let raw: Vec<f64> = (0..512).map(|i| 1024.0 + (i % 400) as f64).collect();
        let v = Volume::new(raw, meta(dims, [2.0, 1.0, 1.0]));
        let m = SegMask::zeros(dims);
        let params = PreprocessParams {
            target_spacing: [2.0, 1.0, 1.0],
            target_dims: dims,
            ..Default::default()
        };
        let out = preprocess_labeled(&v, &m, &params).unwrap();
        assert!(out.boxes.is_empty());
        assert_eq!(out.warnings.len(), 1);
        assert!(out.volume.voxels.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn preprocess_identity_pipeline_preserves_boxes() {
        let dims = [10, 10, 10];
        let mut raw = vec![1024.0; 1000];
        let mut m = SegMask::zeros(dims);
        for z in 3..6 {
            for y in 2..5 {
                for x in 4..8 {
                    m.labels[(z * 10 + y) * 10 + x] = 3;
                    raw[(z * 10 + y) * 10 + x] = 1200.0;
                }
            }
        }
        let v = Volume::new(raw, meta(dims, [2.0, 1.0, 1.0]));
        let direct = extract_boxes(&m, Connectivity::TwentySix, 8);
        let params = PreprocessParams {
            target_spacing: [2.0, 1.0, 1.0],
            target_dims: dims,
            roi_crop: false,
            ..Default::default()
        };
        let out = preprocess_labeled(&v, &m, &params).unwrap();
        assert_eq!(out.boxes, direct);
    }
}
