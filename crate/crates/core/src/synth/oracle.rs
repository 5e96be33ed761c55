//! Expert-noise oracle: corrupts exact ground truth into the noisy dense
//! pseudo-labels that pretraining actually consumes. Simulates imperfect
//! task experts with independent knobs per task.

use super::{Sample, NUM_SEG_CLASSES};
use crate::math;
use crate::rng::Rng;
use alloc::vec;
use alloc::vec::Vec;

#[derive(Clone, Copy, Debug)]
pub struct OracleConfig {
    /// Class resample rate inside the 2-pixel boundary band.
    pub seg_boundary_flip_rate: f64,
    /// Class resample rate everywhere.
    pub seg_uniform_flip_rate: f64,
    /// Multiplicative disparity noise: d * (1 + N(0, sigma^2)).
    pub disparity_noise_sigma: f64,
    /// Per-pixel normal rotation, degrees (std of the angle).
    pub normal_jitter_deg: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            seg_boundary_flip_rate: 0.2,
            seg_uniform_flip_rate: 0.02,
            disparity_noise_sigma: 0.05,
            normal_jitter_deg: 10.0,
            seed: 0,
        }
    }
}

impl OracleConfig {
    pub fn validate(&self) -> crate::error::Result<()> {
        let check_rate = |field: &str, v: f64| {
            if !(0.0..=1.0).contains(&v) {
                Err(crate::error::CoreError::Config {
                    field: field.into(),
                    message: alloc::format!("{v} not in [0,1]"),
                })
            } else {
                Ok(())
            }
        };
        check_rate("seg_boundary_flip_rate", self.seg_boundary_flip_rate)?;
        check_rate("seg_uniform_flip_rate", self.seg_uniform_flip_rate)?;
        for (field, v) in [
            ("disparity_noise_sigma", self.disparity_noise_sigma),
            ("normal_jitter_deg", self.normal_jitter_deg),
        ] {
            if v < 0.0 {
                return Err(crate::error::CoreError::Config {
                    field: field.into(),
                    message: alloc::format!("{v} must be >= 0"),
                });
            }
        }
        Ok(())
    }
}

/// Noisy dense labels with the same layout as the ground-truth maps.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoLabelSet {
    pub mask: Vec<u8>,
    pub disparity: Vec<f32>,
    pub normals: Vec<f32>,
}

/// Pixels within Chebyshev distance 2 of a class boundary.
pub fn boundary_band(mask: &[u8], size: usize) -> Vec<bool> {
    let mut band = vec![false; size * size];
    for y in 0..size {
        for x in 0..size {
            let c = mask[y * size + x];
            'scan: for dy in -2i32..=2 {
                for dx in -2i32..=2 {
                    let (ny, nx) = (y as i32 + dy, x as i32 + dx);
                    if ny < 0 || nx < 0 || ny >= size as i32 || nx >= size as i32 {
                        continue;
                    }
                    if mask[ny as usize * size + nx as usize] != c {
                        band[y * size + x] = true;
                        break 'scan;
                    }
                }
            }
        }
    }
    band
}

/// Derive noisy pseudo-labels from ground truth. Deterministic in
/// (oracle seed, scene seed): regenerating the same sample under the same
/// oracle reproduces identical labels.
pub fn make_pseudo_labels(sample: &Sample, oracle: &OracleConfig) -> PseudoLabelSet {
    let s = sample.image_size;
    let px = s * s;
    let mut rng = Rng::new(oracle.seed ^ sample.scene_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));

    // Segmentation: resample class ids uniformly over [0, C) inside the
    // boundary band at the band rate, and anywhere at the uniform rate.
    let band = boundary_band(&sample.gt_mask, s);
    let mut mask = sample.gt_mask.clone();
    for p in 0..px {
        if band[p] && rng.uniform() < oracle.seg_boundary_flip_rate {
            mask[p] = rng.below(NUM_SEG_CLASSES) as u8;
        }
        if oracle.seg_uniform_flip_rate > 0.0 && rng.uniform() < oracle.seg_uniform_flip_rate {
            mask[p] = rng.below(NUM_SEG_CLASSES) as u8;
        }
    }

    // Disparity: multiplicative Gaussian noise, clamped back to [0,1].
    let mut disparity = Vec::with_capacity(px);
    for p in 0..px {
        let eps = rng.normal() * oracle.disparity_noise_sigma;
        let d = sample.gt_disparity[p] as f64 * (1.0 + eps);
        disparity.push(d.clamp(0.0, 1.0) as f32);
    }

    // Normals: rotate each vector by angle ~ N(0, sigma^2) about a random
    // axis (Rodrigues), then renormalize.
    let sigma_rad = oracle.normal_jitter_deg * math::PI / 180.0;
    let mut normals = vec![0f32; 3 * px];
    for p in 0..px {
        let v = [
            sample.gt_normals[p] as f64,
            sample.gt_normals[px + p] as f64,
            sample.gt_normals[2 * px + p] as f64,
        ];
        let out = if sigma_rad == 0.0 {
            v
        } else {
            let angle = rng.normal() * sigma_rad;
            let axis = rng.unit_vector3();
            rotate_about(v, axis, angle)
        };
        let n = math::sqrt(out[0] * out[0] + out[1] * out[1] + out[2] * out[2]).max(1e-12);
        normals[p] = (out[0] / n) as f32;
        normals[px + p] = (out[1] / n) as f32;
        normals[2 * px + p] = (out[2] / n) as f32;
    }

    PseudoLabelSet {
        mask,
        disparity,
        normals,
    }
}

fn rotate_about(v: [f64; 3], k: [f64; 3], angle: f64) -> [f64; 3] {
    let (c, s) = (math::cos(angle), math::sin(angle));
    let cross = [
        k[1] * v[2] - k[2] * v[1],
        k[2] * v[0] - k[0] * v[2],
        k[0] * v[1] - k[1] * v[0],
    ];
    let dot = k[0] * v[0] + k[1] * v[1] + k[2] * v[2];
    [
        v[0] * c + cross[0] * s + k[0] * dot * (1.0 - c),
        v[1] * c + cross[1] * s + k[1] * dot * (1.0 - c),
        v[2] * c + cross[2] * s + k[2] * dot * (1.0 - c),
    ]
}
