//! wasm-bindgen bindings for the static page in `www/`.
//!
//! Every image crosses the boundary as a row-major RGBA byte buffer so the
//! page can hand it straight to `ImageData`.

use interslice::baselines::{interpolate_linear, interpolate_nearest, NearestPolicy};
use interslice::diffusion::{q_sample, NoiseSchedule};
use interslice::metrics::{psnr, ssim, ssim_map};
use interslice::tensor::Tensor;
use interslice::volume::{generate_phantom, Image, PhantomParams, Volume};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use wasm_bindgen::prelude::*;

fn msg(e: impl std::fmt::Display) -> String {
    e.to_string()
}

/// Grey values in `[0, 1]` to opaque RGBA.
pub fn grey_rgba(values: impl IntoIterator<Item = f64>) -> Vec<u8> {
    values
        .into_iter()
        .flat_map(|v| {
            let g = (255.0 * v.clamp(0.0, 1.0)).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

/// A synthetic volume held on the Rust side.
#[wasm_bindgen]
pub struct Phantom {
    volume: Volume,
}

#[wasm_bindgen]
impl Phantom {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64, size: usize, n_slices: usize) -> Result<Phantom, String> {
        let params = PhantomParams {
            height: size,
            width: size,
            n_slices,
            seed,
            ..PhantomParams::default()
        };
        let volume = generate_phantom(&params).map_err(msg)?;
        Ok(Phantom { volume })
    }

    pub fn size(&self) -> usize {
        self.volume.width
    }

    pub fn n_slices(&self) -> usize {
        self.volume.n_slices
    }

    pub fn slice_rgba(&self, index: usize) -> Result<Vec<u8>, String> {
        Ok(grey_rgba(self.slice(index)?.data.iter().map(|&v| v as f64)))
    }

    /// Predict slice `index` from `index - k` and `index + k`.
    /// `method` is `"linear"`, `"nearest"` or `"nearest-upper"`.
    pub fn interpolate(&self, index: usize, k: usize, method: &str) -> Result<Comparison, String> {
        if k == 0 || index < k || index + k >= self.volume.n_slices {
            return Err(format!(
                "slice {index} has no neighbours at distance {k} in {} slices",
                self.volume.n_slices
            ));
        }
        let lower = self.slice(index - k)?;
        let upper = self.slice(index + k)?;
        let prediction = match method {
            "linear" => interpolate_linear(&lower, &upper),
            "nearest" => interpolate_nearest(&lower, &upper, NearestPolicy::Lower),
            "nearest-upper" => interpolate_nearest(&lower, &upper, NearestPolicy::Upper),
            other => return Err(format!("unknown method `{other}`")),
        }
        .map_err(msg)?;
        Comparison::new(prediction, self.slice(index)?)
    }

    /// Slice `index` pushed forward to diffusion step `t` with a seeded noise draw.
    pub fn noised_rgba(
        &self,
        index: usize,
        schedule: &Schedule,
        t: usize,
        seed: u64,
    ) -> Result<Vec<u8>, String> {
        let img = self.slice(index)?;
        let shape = vec![1, 1, img.height, img.width];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps: Vec<f32> = (0..img.data.len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let x0 = Tensor::new(shape.clone(), img.data).map_err(msg)?;
        let eps = Tensor::new(shape, eps).map_err(msg)?;
        let xt = q_sample(&x0, t, &eps, &schedule.inner).map_err(msg)?;
        // x_t is roughly N(0, 1) at large t; map [-1, 2] into the display range
        Ok(grey_rgba(xt.data().iter().map(|&v| (v as f64 + 1.0) / 3.0)))
    }
}

impl Phantom {
    fn slice(&self, index: usize) -> Result<Image, String> {
        if index >= self.volume.n_slices {
            return Err(format!(
                "slice {index} out of range 0..{}",
                self.volume.n_slices
            ));
        }
        Ok(self.volume.slice(index))
    }
}

/// A prediction scored against its ground-truth slice.
#[wasm_bindgen]
pub struct Comparison {
    prediction: Image,
    target: Image,
    psnr: f64,
    ssim: f64,
    map: Vec<f64>,
}

impl Comparison {
    fn new(prediction: Image, target: Image) -> Result<Comparison, String> {
        let psnr = psnr(&prediction, &target, 1.0).map_err(msg)?;
        let ssim = ssim(&prediction, &target).map_err(msg)?;
        let map = ssim_map(&prediction, &target).map_err(msg)?.values;
        Ok(Comparison {
            prediction,
            target,
            psnr,
            ssim,
            map,
        })
    }
}

#[wasm_bindgen]
impl Comparison {
    pub fn psnr(&self) -> f64 {
        self.psnr
    }

    pub fn ssim(&self) -> f64 {
        self.ssim
    }

    pub fn prediction_rgba(&self) -> Vec<u8> {
        grey_rgba(self.prediction.data.iter().map(|&v| v as f64))
    }

    pub fn target_rgba(&self) -> Vec<u8> {
        grey_rgba(self.target.data.iter().map(|&v| v as f64))
    }

    /// Absolute error, scaled so 0.25 is white.
    pub fn error_rgba(&self) -> Vec<u8> {
        let d = self.prediction.data.iter().zip(&self.target.data);
        grey_rgba(d.map(|(&p, &t)| 4.0 * (p - t).abs() as f64))
    }

    /// Local SSIM, black at 0 (or below) and white at 1.
    pub fn ssim_map_rgba(&self) -> Vec<u8> {
        grey_rgba(self.map.iter().copied())
    }

    pub fn ssim_map_mean(&self) -> f64 {
        self.map.iter().sum::<f64>() / self.map.len() as f64
    }
}

/// Linear beta schedule.
#[wasm_bindgen]
pub struct Schedule {
    inner: NoiseSchedule,
}

#[wasm_bindgen]
impl Schedule {
    #[wasm_bindgen(constructor)]
    pub fn new(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Schedule, String> {
        let inner = NoiseSchedule::linear(timesteps, beta_start, beta_end).map_err(msg)?;
        Ok(Schedule { inner })
    }

    pub fn timesteps(&self) -> usize {
        self.inner.timesteps()
    }

    /// `beta_1 ..= beta_T`.
    pub fn betas(&self) -> Vec<f64> {
        self.inner.betas().to_vec()
    }

    /// `abar_1 ..= abar_T`.
    pub fn alpha_bars(&self) -> Vec<f64> {
        self.inner.alpha_bars().to_vec()
    }

    /// Signal-to-noise ratio `abar / (1 - abar)` in dB at step `t`.
    pub fn snr_db(&self, t: usize) -> Result<f64, String> {
        let ab = self.inner.alpha_bar(t).map_err(msg)?;
        Ok(10.0 * (ab / (1.0 - ab)).log10())
    }
}
