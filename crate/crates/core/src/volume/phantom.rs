//! Synthetic phantom volumes.
//!
//! A phantom is a sum of soft-edged elliptical structures. Each structure's
//! centre, radii and brightness oscillate along the slice axis at a multiple of
//! `z_frequency` cycles per stack, so neighbouring slices are similar while
//! slices a few positions apart can differ noticeably. With `z_frequency = 0`
//! every slice carries the same anatomy and only the noise differs.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{normalize_minmax, Volume, REFERENCE_SLICE_MM};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomParams {
    pub height: usize,
    pub width: usize,
    pub n_slices: usize,
    pub n_blobs: usize,
    /// Oscillation cycles over the whole stack.
    pub z_frequency: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Edge steepness of each structure's logistic profile.
    #[serde(default = "default_sharpness")]
    pub sharpness: f64,
    /// Peak centre displacement, as a fraction of the smaller in-plane extent.
    #[serde(default = "default_drift")]
    pub drift: f64,
    #[serde(default = "default_in_plane_mm")]
    pub in_plane_mm: f64,
    #[serde(default = "default_slice_mm")]
    pub slice_mm: f64,
}

fn default_sharpness() -> f64 {
    16.0
}
fn default_drift() -> f64 {
    0.02
}
fn default_in_plane_mm() -> f64 {
    1.0
}
fn default_slice_mm() -> f64 {
    REFERENCE_SLICE_MM
}

impl Default for PhantomParams {
    /// The 64x64x40 fixture used throughout the test and acceptance suites.
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_slices: 40,
            n_blobs: 6,
            z_frequency: 3.0,
            noise_sigma: 0.01,
            seed: 0,
            sharpness: default_sharpness(),
            drift: default_drift(),
            in_plane_mm: default_in_plane_mm(),
            slice_mm: default_slice_mm(),
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.n_slices == 0 {
            return Err(Error::arg("phantom extents must be positive"));
        }
        if !(self.z_frequency >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::arg(
                "phantom z_frequency and noise_sigma must be non-negative",
            ));
        }
        if !(self.sharpness > 0.0) || !(self.drift >= 0.0) {
            return Err(Error::arg("phantom sharpness must be positive, drift non-negative"));
        }
        Ok(())
    }
}

struct Blob {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    amp: f64,
    drift: f64,
    harmonic: f64,
    phases: [f64; 4],
}

/// Generate a normalized phantom volume named `phantom-<seed>`.
pub fn generate_phantom(params: &PhantomParams) -> Result<Volume> {
    generate_phantom_named(params, format!("phantom-{:04}", params.seed))
}

pub(crate) fn generate_phantom_named(params: &PhantomParams, id: String) -> Result<Volume> {
    params.validate()?;
    let (h, w, n) = (params.height, params.width, params.n_slices);
    let (hf, wf) = (h as f64, w as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let blobs: Vec<Blob> = (0..params.n_blobs)
        .map(|_| Blob {
            cx: rng.random_range(0.25..0.75) * wf,
            cy: rng.random_range(0.25..0.75) * hf,
            rx: rng.random_range(0.10..0.25) * wf,
            ry: rng.random_range(0.10..0.25) * hf,
            amp: rng.random_range(0.3..1.0),
            drift: rng.random_range(0.5..1.0) * params.drift * hf.min(wf),
            harmonic: if rng.random_bool(0.5) { 1.0 } else { 2.0 },
            phases: std::array::from_fn(|_| rng.random_range(0.0..TAU)),
        })
        .collect();

    let mut voxels = vec![0.0f32; n * h * w];
    for z in 0..n {
        let zf = z as f64;
        let plane = &mut voxels[z * h * w..(z + 1) * h * w];
        for b in &blobs {
            let theta = TAU * params.z_frequency * b.harmonic * zf / n as f64;
            let cx = b.cx + b.drift * (theta + b.phases[0]).sin();
            let cy = b.cy + b.drift * (theta + b.phases[1]).cos();
            let scale = 1.0 + 0.3 * (theta + b.phases[2]).sin();
            let (rx, ry) = (b.rx * scale, b.ry * scale);
            let amp = b.amp * (0.75 + 0.25 * (theta + b.phases[3]).sin());
            for y in 0..h {
                let dy = (y as f64 + 0.5 - cy) / ry;
                for x in 0..w {
                    let dx = (x as f64 + 0.5 - cx) / rx;
                    let rho = (dx * dx + dy * dy).sqrt();
                    let v = amp / (1.0 + (params.sharpness * (rho - 1.0)).exp());
                    plane[y * w + x] += v as f32;
                }
            }
        }
    }
    if params.noise_sigma > 0.0 {
        for v in voxels.iter_mut() {
            let e: f64 = StandardNormal.sample(&mut rng);
            *v += (params.noise_sigma * e) as f32;
        }
    }
    let raw = Volume::new(id, h, w, n, params.in_plane_mm, params.slice_mm, voxels)?;
    if raw.voxels.iter().all(|&v| v == 0.0) {
        log::warn!("phantom {} is empty (no blobs, no noise)", raw.patient_id);
    }
    Ok(normalize_minmax(&raw))
}
