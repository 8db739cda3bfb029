//! Seeded intensity and geometric augmentations on normalized volumes.

use serde::{Deserialize, Serialize};
use voxdet_tensor::rng::Rng;

use crate::volume::{trilinear_sample, Volume};

#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ElasticSpec {
    /// Peak displacement in voxels.
    pub amplitude: f64,
    /// Control-grid spacing in voxels.
    pub grid_spacing: usize,
}

/// Augmentation recipe. A default-constructed spec is the identity.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AugSpec {
    pub noise_sigma: f64,
    /// Additive shift drawn from `[-x, x]` (fraction of the intensity range).
    pub intensity_shift: f64,
    /// Multiplicative scale drawn from `[1-x, 1+x]`.
    pub intensity_scale: f64,
    pub blur_sigma: Option<f64>,
    pub elastic: Option<ElasticSpec>,
}

impl AugSpec {
    /// Weak preset: minimal noise and small shifts.
    pub fn weak() -> AugSpec {
        AugSpec {
            noise_sigma: 0.01,
            intensity_shift: 0.02,
            intensity_scale: 0.0,
            blur_sigma: None,
            elastic: None,
        }
    }

    /// Strong preset: heavier noise and shifts plus blur and elastic warp.
    pub fn strong() -> AugSpec {
        AugSpec {
            noise_sigma: 0.05,
            intensity_shift: 0.10,
            intensity_scale: 0.0,
            blur_sigma: Some(1.0),
            elastic: Some(ElasticSpec {
                amplitude: 2.0,
                grid_spacing: 8,
            }),
        }
    }
}

/// Apply an augmentation recipe. Order: elastic warp, blur, intensity
/// scale, intensity shift, additive Gaussian noise, clamp to [0, 1].
/// Requires a normalized volume; deterministic per key.
pub fn apply_augmentation(vol: &Volume, spec: &AugSpec, key: u64) -> Volume {
    assert!(vol.normalized, "augmentation requires a normalized volume");
    let mut rng = Rng::new(key);
    let mut out = vol.clone();
    if let Some(elastic) = &spec.elastic {
        out = elastic_warp(&out, elastic, &mut rng);
    }
    if let Some(sigma) = spec.blur_sigma {
        if sigma > 0.0 {
            out = gaussian_blur(&out, sigma);
        }
    }
    let scale = if spec.intensity_scale > 0.0 {
        rng.uniform(1.0 - spec.intensity_scale, 1.0 + spec.intensity_scale)
    } else {
        1.0
    };
    let shift = if spec.intensity_shift > 0.0 {
        rng.uniform(-spec.intensity_shift, spec.intensity_shift)
    } else {
        0.0
    };
    for v in out.voxels.iter_mut() {
        let mut x = *v * scale + shift;
        if spec.noise_sigma > 0.0 {
            x += rng.normal() * spec.noise_sigma;
        }
        *v = x.clamp(0.0, 1.0);
    }
    out
}

fn elastic_warp(vol: &Volume, spec: &ElasticSpec, rng: &mut Rng) -> Volume {
    let dims = vol.dims();
    let gs = spec.grid_spacing.max(2);
    let coarse = [
        dims[0].div_ceil(gs) + 1,
        dims[1].div_ceil(gs) + 1,
        dims[2].div_ceil(gs) + 1,
    ];
    let n_coarse: usize = coarse.iter().product();
    // One displacement field per axis.
    let fields: Vec<Vec<f64>> = (0..3)
        .map(|_| {
            (0..n_coarse)
                .map(|_| rng.uniform(-spec.amplitude, spec.amplitude))
                .collect()
        })
        .collect();
    let mut voxels = vec![0.0; vol.voxels.len()];
    let mut i = 0;
    for z in 0..dims[0] {
        for y in 0..dims[1] {
            for x in 0..dims[2] {
                let cpos = [
                    z as f64 / gs as f64,
                    y as f64 / gs as f64,
                    x as f64 / gs as f64,
                ];
                let dz = trilinear_sample(&fields[0], coarse, cpos);
                let dy = trilinear_sample(&fields[1], coarse, cpos);
                let dx = trilinear_sample(&fields[2], coarse, cpos);
                voxels[i] = trilinear_sample(
                    &vol.voxels,
                    dims,
                    [z as f64 + dz, y as f64 + dy, x as f64 + dx],
                );
                i += 1;
            }
        }
    }
    Volume {
        voxels,
        meta: vol.meta,
        normalized: vol.normalized,
    }
}

fn gaussian_blur(vol: &Volume, sigma: f64) -> Volume {
    // Separable kernel, radius 3 sigma.
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-0.5 * (i as f64 / sigma).powi(2)).exp());
    }
    let norm: f64 = kernel.iter().sum();
    for k in kernel.iter_mut() {
        *k /= norm;
    }
    let dims = vol.dims();
    let mut cur = vol.voxels.clone();
    for axis in 0..3 {
        cur = blur_axis(&cur, dims, axis, &kernel, radius);
    }
    Volume {
        voxels: cur,
        meta: vol.meta,
        normalized: vol.normalized,
    }
}

fn blur_axis(
    data: &[f64],
    dims: [usize; 3],
    axis: usize,
    kernel: &[f64],
    radius: isize,
) -> Vec<f64> {
    let [nz, ny, nx] = dims;
    let idx = |z: usize, y: usize, x: usize| (z * ny + y) * nx + x;
    let mut out = vec![0.0; data.len()];
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut acc = 0.0;
                for (ki, w) in kernel.iter().enumerate() {
                    let off = ki as isize - radius;
                    let mut p = [z as isize, y as isize, x as isize];
                    p[axis] += off;
                    // Edge clamp.
                    let pz = p[0].clamp(0, nz as isize - 1) as usize;
                    let py = p[1].clamp(0, ny as isize - 1) as usize;
                    let px = p[2].clamp(0, nx as isize - 1) as usize;
                    acc += w * data[idx(pz, py, px)];
                }
                out[idx(z, y, x)] = acc;
            }
        }
    }
    out
}

/// Classification-time augmentation: gamma correction, then intensity
/// scale/shift, then noise, then clamp. Parameters draw uniformly from
/// the configured ranges.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct ClassifyAugSpec {
    pub gamma_range: [f64; 2],
    pub scale_range: [f64; 2],
    pub shift: f64,
    pub noise_sigma: f64,
}

impl Default for ClassifyAugSpec {
    fn default() -> Self {
        ClassifyAugSpec {
            gamma_range: [0.8, 1.2],
            scale_range: [0.85, 1.15],
            shift: 0.15,
            noise_sigma: 0.05,
        }
    }
}

impl ClassifyAugSpec {
    pub fn identity() -> ClassifyAugSpec {
        ClassifyAugSpec {
            gamma_range: [1.0, 1.0],
            scale_range: [1.0, 1.0],
            shift: 0.0,
            noise_sigma: 0.0,
        }
    }
}

pub fn classify_augment(vol: &Volume, spec: &ClassifyAugSpec, key: u64) -> Volume {
    assert!(vol.normalized, "augmentation requires a normalized volume");
    let mut rng = Rng::new(key);
    let gamma = if spec.gamma_range[0] == spec.gamma_range[1] {
        spec.gamma_range[0]
    } else {
        rng.uniform(spec.gamma_range[0], spec.gamma_range[1])
    };
    let scale = if spec.scale_range[0] == spec.scale_range[1] {
        spec.scale_range[0]
    } else {
        rng.uniform(spec.scale_range[0], spec.scale_range[1])
    };
    let shift = if spec.shift > 0.0 {
        rng.uniform(-spec.shift, spec.shift)
    } else {
        0.0
    };
    let mut out = vol.clone();
    for v in out.voxels.iter_mut() {
        let mut x = v.powf(gamma) * scale + shift;
        if spec.noise_sigma > 0.0 {
            x += rng.normal() * spec.noise_sigma;
        }
        *v = x.clamp(0.0, 1.0);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VolumeMeta;

    fn vol(dims: [usize; 3], seed: u64) -> Volume {
        let mut rng = Rng::new(seed);
        Volume {
            voxels: (0..dims.iter().product::<usize>())
                .map(|_| rng.next_f64())
                .collect(),
            meta: VolumeMeta {
                rescale_slope: 1.0,
                rescale_intercept: -1024.0,
                spacing: [1.0; 3],
                dims,
            },
            normalized: true,
        }
    }

    #[test]
    fn zero_spec_is_identity() {
        let v = vol([6, 6, 6], 1);
        let out = apply_augmentation(&v, &AugSpec::default(), 99);
        assert_eq!(out.voxels, v.voxels);
    }

    #[test]
    fn same_key_reproduces() {
        let v = vol([6, 6, 6], 2);
        let a = apply_augmentation(&v, &AugSpec::strong(), 7);
        let b = apply_augmentation(&v, &AugSpec::strong(), 7);
        let c = apply_augmentation(&v, &AugSpec::strong(), 8);
        assert_eq!(a.voxels, b.voxels);
        assert_ne!(a.voxels, c.voxels);
    }

    #[test]
    fn shift_only_bounded_by_range() {
        let v = vol([8, 8, 8], 3);
        let spec = AugSpec {
            intensity_shift: 0.02,
            ..Default::default()
        };
        for key in 0..50 {
            let out = apply_augmentation(&v, &spec, key);
            for (a, b) in out.voxels.iter().zip(&v.voxels) {
                // |out - in| <= 0.02 except where clamping applies.
                let clamped = *a == 0.0 || *a == 1.0;
                assert!(clamped || (a - b).abs() <= 0.02 + 1e-12);
            }
        }
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let v = vol([8, 8, 8], 4);
        for key in 0..100 {
            let out = apply_augmentation(&v, &AugSpec::strong(), key);
            assert!(out.voxels.iter().all(|x| (0.0..=1.0).contains(x)));
            let out = classify_augment(&v, &ClassifyAugSpec::default(), key);
            assert!(out.voxels.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn classify_identity_and_gamma() {
        let v = vol([4, 4, 4], 5);
        let id = classify_augment(&v, &ClassifyAugSpec::identity(), 3);
        assert_eq!(id.voxels, v.voxels);
        // Gamma 2 on a constant 0.5 volume gives 0.25.
        let mut half = v.clone();
        half.voxels.iter_mut().for_each(|x| *x = 0.5);
        let spec = ClassifyAugSpec {
            gamma_range: [2.0, 2.0],
            scale_range: [1.0, 1.0],
            shift: 0.0,
            noise_sigma: 0.0,
        };
        let out = classify_augment(&half, &spec, 1);
        assert!(out.voxels.iter().all(|x| (*x - 0.25).abs() < 1e-12));
    }

    #[test]
    fn blur_preserves_constant_volume() {
        let mut v = vol([6, 6, 6], 6);
        v.voxels.iter_mut().for_each(|x| *x = 0.4);
        let spec = AugSpec {
            blur_sigma: Some(1.0),
            ..Default::default()
        };
        let out = apply_augmentation(&v, &spec, 1);
        assert!(out.voxels.iter().all(|x| (*x - 0.4).abs() < 1e-12));
    }
}
