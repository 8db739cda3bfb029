//! Synthetic CT-like phantoms with exact ground truth.
//!
//! Each phantom is a smooth textured background with non-overlapping
//! bright ellipsoids, one per placed object. The generator returns the
//! mask, the exact voxel hulls, and the 7-bit category label vector, so
//! every downstream training and evaluation path can be checked against
//! known answers.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use voxdet_tensor::rng::{key, Rng};

use crate::manifest::{DatasetManifest, NUM_CATEGORIES};
use crate::rvol::{self, RvolRecord, VoxelDType};
use crate::volume::{trilinear_sample, BoxCorners, SegMask, Volume, VolumeMeta, DEFAULT_HU_WINDOW};

#[derive(Debug, thiserror::Error)]
pub enum PhantomError {
    #[error("could not place object {object} without clipping after {attempts} attempts")]
    Placement { object: usize, attempts: usize },
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Rvol(#[from] crate::rvol::RvolError),
    #[error("{0}")]
    Manifest(#[from] crate::manifest::ManifestError),
}

/// Generator parameters for one phantom volume.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Category id (0..7) per object slot.
    pub categories: Vec<u8>,
    /// Normalized intensity band per category.
    pub bands: [[f64; 2]; NUM_CATEGORIES],
    pub background_level: f64,
    /// Amplitude of the smooth low-frequency background texture.
    pub texture_amplitude: f64,
    /// Control-grid spacing of the background texture, in voxels.
    pub texture_grid: usize,
    pub noise_sigma: f64,
    /// Semi-axis range in voxels, per axis draw.
    pub semi_axis_range: [f64; 2],
    /// Voxels kept clear between an ellipsoid hull and the volume border.
    pub margin: usize,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [24, 24, 24],
            spacing: [2.0, 1.0, 1.0],
            categories: vec![0],
            bands: default_bands(),
            background_level: 0.30,
            texture_amplitude: 0.10,
            texture_grid: 8,
            noise_sigma: 0.02,
            semi_axis_range: [2.5, 4.5],
            margin: 1,
            seed: 0,
        }
    }
}

pub fn default_bands() -> [[f64; 2]; NUM_CATEGORIES] {
    // Distinct, non-overlapping bright bands over the background.
    let mut bands = [[0.0; 2]; NUM_CATEGORIES];
    for (i, b) in bands.iter_mut().enumerate() {
        let lo = 0.50 + 0.06 * i as f64;
        *b = [lo, lo + 0.04];
    }
    bands
}

/// One generated phantom with its exact ground truth.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub volume: Volume,
    pub mask: SegMask,
    pub boxes: Vec<(BoxCorners, u8)>,
    pub labels: [u8; NUM_CATEGORIES],
}

/// Rasterize the ellipsoid inequality and return the exact voxel hull, or
/// None when no voxel satisfies it.
pub fn rasterize_ellipsoid(
    mask: &mut SegMask,
    center: [f64; 3],
    semi_axes: [f64; 3],
    label: u8,
) -> Option<BoxCorners> {
    let [nz, ny, nx] = mask.dims;
    let mut hull: Option<BoxCorners> = None;
    let lo = |c: f64, a: f64| (c - a).floor().max(0.0) as usize;
    let hi = |c: f64, a: f64, n: usize| ((c + a).ceil() as usize).min(n - 1);
    for z in lo(center[0], semi_axes[0])..=hi(center[0], semi_axes[0], nz) {
        for y in lo(center[1], semi_axes[1])..=hi(center[1], semi_axes[1], ny) {
            for x in lo(center[2], semi_axes[2])..=hi(center[2], semi_axes[2], nx) {
                let dz = (z as f64 - center[0]) / semi_axes[0];
                let dy = (y as f64 - center[1]) / semi_axes[1];
                let dx = (x as f64 - center[2]) / semi_axes[2];
                if dz * dz + dy * dy + dx * dx <= 1.0 {
                    mask.labels[(z * ny + y) * nx + x] = label;
                    let p = BoxCorners {
                        min: [z, y, x],
                        max: [z, y, x],
                    };
                    hull = Some(match hull {
                        Some(h) => h.union(&p),
                        None => p,
                    });
                }
            }
        }
    }
    hull
}

const PLACEMENT_ATTEMPTS: usize = 100;

/// Generate one phantom. Deterministic for a given spec (which includes
/// the seed); the mask stores `category + 1` at object voxels.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<Phantom, PhantomError> {
    if spec
        .categories
        .iter()
        .any(|&c| c as usize >= NUM_CATEGORIES)
    {
        return Err(PhantomError::InvalidSpec(format!(
            "category ids must be < {NUM_CATEGORIES}, got {:?}",
            spec.categories
        )));
    }
    if spec.semi_axis_range[0] <= 0.0 || spec.semi_axis_range[0] > spec.semi_axis_range[1] {
        return Err(PhantomError::InvalidSpec(format!(
            "bad semi-axis range {:?}",
            spec.semi_axis_range
        )));
    }
    let [nz, ny, nx] = spec.dims;
    let mut rng = Rng::new(spec.seed);

    // Smooth background: coarse noise grid, trilinear upsampled.
    let gs = spec.texture_grid.max(2);
    let coarse = [
        nz.div_ceil(gs) + 1,
        ny.div_ceil(gs) + 1,
        nx.div_ceil(gs) + 1,
    ];
    let coarse_vals: Vec<f64> = (0..coarse.iter().product::<usize>())
        .map(|_| rng.uniform(-1.0, 1.0) * spec.texture_amplitude)
        .collect();
    let mut voxels = vec![0.0; nz * ny * nx];
    let mut i = 0;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let pos = [
                    z as f64 / gs as f64,
                    y as f64 / gs as f64,
                    x as f64 / gs as f64,
                ];
                voxels[i] = spec.background_level + trilinear_sample(&coarse_vals, coarse, pos);
                i += 1;
            }
        }
    }

    // Place ellipsoids with rejection on padded-hull overlap so components
    // of the mask never touch.
    let mut mask = SegMask::zeros(spec.dims);
    let mut boxes: Vec<(BoxCorners, u8)> = Vec::new();
    let mut labels = [0u8; NUM_CATEGORIES];
    for (slot, &cat) in spec.categories.iter().enumerate() {
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let mut axes = [0.0; 3];
            let mut center = [0.0; 3];
            let mut feasible = true;
            for a in 0..3 {
                let max_axis = spec.semi_axis_range[1]
                    .min((spec.dims[a] as f64 - 1.0) / 2.0 - spec.margin as f64);
                if max_axis < spec.semi_axis_range[0] {
                    feasible = false;
                    break;
                }
                axes[a] = rng.uniform(spec.semi_axis_range[0], max_axis);
                let lo = axes[a] + spec.margin as f64;
                let hi = spec.dims[a] as f64 - 1.0 - axes[a] - spec.margin as f64;
                center[a] = rng.uniform(lo, hi);
            }
            if !feasible {
                break;
            }
            // Tentative integer hull padded by one voxel.
            let pad_hull = BoxCorners {
                min: [
                    (center[0] - axes[0]).floor().max(1.0) as usize - 1,
                    (center[1] - axes[1]).floor().max(1.0) as usize - 1,
                    (center[2] - axes[2]).floor().max(1.0) as usize - 1,
                ],
                max: [
                    ((center[0] + axes[0]).ceil() as usize + 1).min(nz - 1),
                    ((center[1] + axes[1]).ceil() as usize + 1).min(ny - 1),
                    ((center[2] + axes[2]).ceil() as usize + 1).min(nx - 1),
                ],
            };
            let overlaps = boxes.iter().any(|(b, _)| hulls_intersect(b, &pad_hull));
            if overlaps {
                continue;
            }
            let Some(hull) = rasterize_ellipsoid(&mut mask, center, axes, cat + 1) else {
                continue;
            };
            // Paint the object at a constant intensity drawn from its band.
            let band = spec.bands[cat as usize];
            let value = rng.uniform(band[0], band[1]);
            for z in hull.min[0]..=hull.max[0] {
                for y in hull.min[1]..=hull.max[1] {
                    for x in hull.min[2]..=hull.max[2] {
                        if mask.at(z, y, x) == cat + 1 {
                            voxels[(z * ny + y) * nx + x] = value;
                        }
                    }
                }
            }
            boxes.push((hull, cat + 1));
            labels[cat as usize] = 1;
            placed = true;
            break;
        }
        if !placed {
            return Err(PhantomError::Placement {
                object: slot,
                attempts: PLACEMENT_ATTEMPTS,
            });
        }
    }

    // Pixel noise, then clamp to the normalized range.
    for v in voxels.iter_mut() {
        *v = (*v + rng.normal() * spec.noise_sigma).clamp(0.0, 1.0);
    }

    boxes.sort_by_key(|(b, label)| (b.min, b.max, *label));
    let volume = Volume {
        voxels,
        meta: VolumeMeta {
            rescale_slope: 1.0,
            rescale_intercept: -1024.0,
            spacing: spec.spacing,
            dims: spec.dims,
        },
        normalized: true,
    };
    Ok(Phantom {
        volume,
        mask,
        boxes,
        labels,
    })
}

fn hulls_intersect(a: &BoxCorners, b: &BoxCorners) -> bool {
    (0..3).all(|ax| a.min[ax] <= b.max[ax] && b.min[ax] <= a.max[ax])
}

/// Map a normalized volume back to raw acquisition values so the stored
/// dataset exercises the full preprocessing path (Hounsfield conversion,
/// clipping, normalization) when loaded.
pub fn denormalize(vol: &Volume, hu_lo: f64, hu_hi: f64) -> Volume {
    let m = vol.meta.rescale_slope;
    let b = vol.meta.rescale_intercept;
    let voxels = vol
        .voxels
        .iter()
        .map(|v| ((v * (hu_hi - hu_lo) + hu_lo) - b) / m)
        .collect();
    Volume {
        voxels,
        meta: vol.meta,
        normalized: false,
    }
}

/// Split sizes for a generated dataset.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DatasetCounts {
    pub labeled: usize,
    pub unlabeled: usize,
    pub val: usize,
    pub test: usize,
}

/// Parameters for [`make_dataset`].
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSpec {
    pub base: PhantomSpec,
    pub counts: DatasetCounts,
    /// Probability that each category contributes one object to a volume.
    pub category_prob: f64,
    /// Guarantee at least one object in labeled/val/test volumes.
    pub ensure_object_in_annotated: bool,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            base: PhantomSpec::default(),
            counts: DatasetCounts {
                labeled: 4,
                unlabeled: 8,
                val: 2,
                test: 2,
            },
            category_prob: 0.45,
            ensure_object_in_annotated: true,
            seed: 0,
        }
    }
}

/// Generate a dataset directory of RVOL files plus its manifest.
///
/// Annotated roles (labeled, val, test) store mask and box table;
/// unlabeled entries omit both. Volumes are stored as raw acquisition
/// values; the manifest records the 7-bit labels for every entry.
pub fn make_dataset(spec: &DatasetSpec, out_dir: &Path) -> Result<DatasetManifest, PhantomError> {
    let mut manifest = DatasetManifest::default();
    let roles: [(&str, usize, bool); 4] = [
        ("labeled", spec.counts.labeled, true),
        ("unlabeled", spec.counts.unlabeled, false),
        ("val", spec.counts.val, true),
        ("test", spec.counts.test, true),
    ];
    let mut global_index = 0u64;
    for (role, count, annotated) in roles {
        if count > 0 {
            fs::create_dir_all(out_dir.join(role))?;
        }
        for i in 0..count {
            // Category draws occasionally request more objects than the
            // volume can host; redraw with a fresh derived seed until the
            // rejection sampler finds a placement.
            let mut phantom = None;
            for retry in 0..50u64 {
                let mut rng = Rng::new(key(spec.seed, "phantom-slots", &[global_index, retry]));
                let mut categories: Vec<u8> = (0..NUM_CATEGORIES as u8)
                    .filter(|_| rng.next_f64() < spec.category_prob)
                    .collect();
                if categories.is_empty() && annotated && spec.ensure_object_in_annotated {
                    categories.push(rng.below(NUM_CATEGORIES) as u8);
                }
                let vspec = PhantomSpec {
                    categories,
                    seed: key(spec.seed, "phantom-vol", &[global_index, retry]),
                    ..spec.base.clone()
                };
                match generate_phantom(&vspec) {
                    Ok(p) => {
                        phantom = Some(p);
                        break;
                    }
                    Err(PhantomError::Placement { .. }) => continue,
                    Err(e) => return Err(e),
                }
            }
            let Some(phantom) = phantom else {
                return Err(PhantomError::Placement {
                    object: 0,
                    attempts: PLACEMENT_ATTEMPTS * 50,
                });
            };
            let rel = format!("{role}/vol_{i:03}.rvol");
            let record = RvolRecord {
                volume: denormalize(&phantom.volume, DEFAULT_HU_WINDOW.0, DEFAULT_HU_WINDOW.1),
                mask: annotated.then(|| phantom.mask.clone()),
                boxes: if annotated {
                    phantom.boxes.iter().map(|(b, _)| *b).collect()
                } else {
                    Vec::new()
                },
            };
            rvol::write(&out_dir.join(&rel), &record, VoxelDType::F64)?;
            match role {
                "labeled" => manifest.labeled.push(rel.clone()),
                "unlabeled" => manifest.unlabeled.push(rel.clone()),
                "val" => manifest.val.push(rel.clone()),
                _ => manifest.test.push(rel.clone()),
            }
            manifest.labels.insert(rel, phantom.labels);
            global_index += 1;
        }
    }
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{extract_boxes, Connectivity};

    #[test]
    fn empty_spec_gives_empty_ground_truth() {
        let spec = PhantomSpec {
            categories: vec![],
            ..Default::default()
        };
        let p = generate_phantom(&spec).unwrap();
        assert!(p.mask.is_empty_mask());
        assert!(p.boxes.is_empty());
        assert_eq!(p.labels, [0; NUM_CATEGORIES]);
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let spec = PhantomSpec {
            categories: vec![1, 4],
            seed: 99,
            ..Default::default()
        };
        let a = generate_phantom(&spec).unwrap();
        let b = generate_phantom(&spec).unwrap();
        assert_eq!(a.volume.voxels, b.volume.voxels);
        assert_eq!(a.mask.labels, b.mask.labels);
        assert_eq!(a.boxes, b.boxes);
    }

    #[test]
    fn ellipsoid_hull_matches_voxel_scan_oracle() {
        // Semi-axes (4, 6, 8) centered at (16, 16, 16).
        let mut mask = SegMask::zeros([33, 33, 33]);
        let hull = rasterize_ellipsoid(&mut mask, [16.0, 16.0, 16.0], [4.0, 6.0, 8.0], 1).unwrap();
        assert_eq!(hull.min, [12, 10, 8]);
        assert_eq!(hull.max, [20, 22, 24]);
        // Oracle: direct scan of the inequality over the full grid.
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        for z in 0..33 {
            for y in 0..33 {
                for x in 0..33 {
                    let dz = (z as f64 - 16.0) / 4.0;
                    let dy = (y as f64 - 16.0) / 6.0;
                    let dx = (x as f64 - 16.0) / 8.0;
                    let inside = dz * dz + dy * dy + dx * dx <= 1.0;
                    assert_eq!(mask.at(z, y, x) == 1, inside);
                    if inside {
                        for (a, v) in [z, y, x].into_iter().enumerate() {
                            lo[a] = lo[a].min(v);
                            hi[a] = hi[a].max(v);
                        }
                    }
                }
            }
        }
        assert_eq!(hull.min, lo);
        assert_eq!(hull.max, hi);
    }

    #[test]
    fn generator_boxes_match_extract_boxes() {
        for seed in 0..6 {
            let spec = PhantomSpec {
                categories: vec![0, 3, 6],
                seed,
                ..Default::default()
            };
            let p = generate_phantom(&spec).unwrap();
            let got = extract_boxes(&p.mask, Connectivity::TwentySix, 0);
            assert_eq!(got, p.boxes, "seed {seed}");
        }
    }

    #[test]
    fn object_mean_intensity_in_band() {
        let spec = PhantomSpec {
            categories: vec![2],
            seed: 5,
            ..Default::default()
        };
        let p = generate_phantom(&spec).unwrap();
        let [nz, ny, nx] = spec.dims;
        let mut sum = 0.0;
        let mut n = 0usize;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if p.mask.at(z, y, x) == 3 {
                        sum += p.volume.at(z, y, x);
                        n += 1;
                    }
                }
            }
        }
        let mean = sum / n as f64;
        let band = spec.bands[2];
        let tol = 3.0 * spec.noise_sigma / (n as f64).sqrt();
        assert!(
            mean >= band[0] - tol && mean <= band[1] + tol,
            "mean {mean} outside band {band:?} (tol {tol})"
        );
    }

    #[test]
    fn placement_error_when_volume_too_small() {
        let spec = PhantomSpec {
            dims: [6, 6, 6],
            categories: vec![0],
            semi_axis_range: [4.0, 5.0],
            ..Default::default()
        };
        assert!(matches!(
            generate_phantom(&spec),
            Err(PhantomError::Placement { .. }) | Err(PhantomError::InvalidSpec(_))
        ));
    }

    #[test]
    fn dataset_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            counts: DatasetCounts {
                labeled: 4,
                unlabeled: 8,
                val: 2,
                test: 2,
            },
            seed: 7,
            ..Default::default()
        };
        let out_a = dir.path().join("a");
        let m = make_dataset(&spec, &out_a).unwrap();
        assert_eq!(m.labeled.len(), 4);
        assert_eq!(m.unlabeled.len(), 8);
        assert_eq!(m.val.len(), 2);
        assert_eq!(m.test.len(), 2);
        assert_eq!(m.labels.len(), 16);
        // All 16 volumes distinct.
        let mut hashes: Vec<Vec<u8>> = Vec::new();
        for rel in m.all_paths() {
            let bytes = std::fs::read(out_a.join(rel)).unwrap();
            assert!(!hashes.contains(&bytes), "duplicate volume {rel}");
            hashes.push(bytes);
        }
        // Regeneration in another directory gives identical files.
        let out_b = dir.path().join("b");
        let m2 = make_dataset(&spec, &out_b).unwrap();
        assert_eq!(m, m2);
        for rel in m.all_paths() {
            assert_eq!(
                std::fs::read(out_a.join(rel)).unwrap(),
                std::fs::read(out_b.join(rel)).unwrap(),
                "{rel}"
            );
        }
        assert_eq!(
            std::fs::read(out_a.join("manifest.json")).unwrap(),
            std::fs::read(out_b.join("manifest.json")).unwrap()
        );
    }

    #[test]
    fn no_unlabeled_section_when_zero() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            counts: DatasetCounts {
                labeled: 1,
                unlabeled: 0,
                val: 1,
                test: 1,
            },
            ..Default::default()
        };
        make_dataset(&spec, dir.path()).unwrap();
        let text = std::fs::read_to_string(dir.path().join("manifest.json")).unwrap();
        assert!(!text.contains("unlabeled"));
    }
}
