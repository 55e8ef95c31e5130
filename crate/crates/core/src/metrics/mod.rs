//! PSNR, SSIM and aggregate statistics.

mod report;

pub use report::{format_sig6, MetricsReport, SampleMetrics, Summary, REPORT_CSV_HEADER};

use std::fmt;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::volume::Image;

/// Returned by [`psnr`] when the images are identical.
pub const PSNR_SENTINEL_DB: f64 = 100.0;

/// `10 log10(max_val^2 / MSE)`, with [`PSNR_SENTINEL_DB`] for zero MSE.
pub fn psnr(pred: &Image, target: &Image, max_val: f64) -> Result<f64> {
    pred.check_same(target, "psnr")?;
    if !(max_val > 0.0) {
        return Err(Error::arg(format!("psnr max_val must be positive, got {max_val}")));
    }
    if pred.data.is_empty() {
        return Err(Error::arg("psnr of empty images"));
    }
    let mse = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum::<f64>()
        / pred.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_SENTINEL_DB);
    }
    Ok((10.0 * (max_val * max_val / mse).log10()).min(PSNR_SENTINEL_DB))
}

/// Gaussian-window SSIM parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub dynamic_range: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        Self {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            dynamic_range: 1.0,
        }
    }
}

impl fmt::Display for SsimConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "gaussian window {w}x{w} sigma={s} K1={k1} K2={k2} L={l}",
            w = self.window,
            s = self.sigma,
            k1 = self.k1,
            k2 = self.k2,
            l = self.dynamic_range
        )
    }
}

impl SsimConfig {
    /// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
    pub fn kernel(&self) -> Vec<f64> {
        let c = (self.window / 2) as f64;
        let mut k: Vec<f64> = (0..self.window)
            .map(|i| {
                let d = i as f64 - c;
                (-d * d / (2.0 * self.sigma * self.sigma)).exp()
            })
            .collect();
        let s: f64 = k.iter().sum();
        k.iter_mut().for_each(|v| *v /= s);
        k
    }

    fn constants(&self) -> (f64, f64) {
        let c1 = (self.k1 * self.dynamic_range).powi(2);
        let c2 = (self.k2 * self.dynamic_range).powi(2);
        (c1, c2)
    }
}

/// Per-pixel SSIM map in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct SsimMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl SsimMap {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }

    /// 8-bit binary PGM (P5), grey = round(255 * clamp(ssim, 0, 1)).
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.values
                .iter()
                .map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8),
        );
        out
    }

    /// One CSV row per image row, raw values.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in self.values.chunks(self.width) {
            let line: Vec<String> = row.iter().map(|&v| format_sig6(v)).collect();
            s.push_str(&line.join(","));
            s.push('\n');
        }
        s
    }

    pub fn write_pgm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_pgm()).map_err(|e| Error::io(path, e))
    }
}

/// Separable filter in valid mode: output is `(h - n + 1) x (w - n + 1)`.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        let line = &src[y * w..(y + 1) * w];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&line[x..x + n]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = k
                .iter()
                .enumerate()
                .map(|(i, a)| a * rows[(y + i) * ow + x])
                .sum();
        }
    }
    out
}

/// Half-sample symmetric padding (`c b a | a b c d | d c b`).
fn pad_reflect(src: &[f64], h: usize, w: usize, p: usize) -> Vec<f64> {
    let idx = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let period = 2 * n;
        let mut j = i.rem_euclid(period);
        if j >= n {
            j = period - 1 - j;
        }
        j as usize
    };
    let (ph, pw) = (h + 2 * p, w + 2 * p);
    let mut out = vec![0.0; ph * pw];
    for y in 0..ph {
        let sy = idx(y as isize - p as isize, h);
        for x in 0..pw {
            let sx = idx(x as isize - p as isize, w);
            out[y * pw + x] = src[sy * w + sx];
        }
    }
    out
}

fn ssim_from_planes(a: &[f64], b: &[f64], h: usize, w: usize, cfg: &SsimConfig) -> Vec<f64> {
    let k = cfg.kernel();
    let (c1, c2) = cfg.constants();
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, h, w, &k);
    let mu_b = filter_valid(b, h, w, &k);
    let e_aa = filter_valid(&aa, h, w, &k);
    let e_bb = filter_valid(&bb, h, w, &k);
    let e_ab = filter_valid(&ab, h, w, &k);
    (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .collect()
}

fn check_ssim_inputs(pred: &Image, target: &Image, cfg: &SsimConfig) -> Result<()> {
    pred.check_same(target, "ssim")?;
    if pred.height < cfg.window || pred.width < cfg.window {
        return Err(Error::arg(format!(
            "image {}x{} is smaller than the {}x{} SSIM window",
            pred.height, pred.width, cfg.window, cfg.window
        )));
    }
    Ok(())
}

fn to_f64(img: &Image) -> Vec<f64> {
    img.data.iter().map(|&v| v as f64).collect()
}

/// Mean SSIM over the positions where the window fits entirely.
pub fn ssim_with(pred: &Image, target: &Image, cfg: &SsimConfig) -> Result<f64> {
    check_ssim_inputs(pred, target, cfg)?;
    let m = ssim_from_planes(&to_f64(pred), &to_f64(target), pred.height, pred.width, cfg);
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

pub fn ssim(pred: &Image, target: &Image) -> Result<f64> {
    ssim_with(pred, target, &SsimConfig::default())
}

/// Full-size SSIM map, borders filled by reflection.
pub fn ssim_map_with(pred: &Image, target: &Image, cfg: &SsimConfig) -> Result<SsimMap> {
    check_ssim_inputs(pred, target, cfg)?;
    let (h, w) = (pred.height, pred.width);
    let p = cfg.window / 2;
    let a = pad_reflect(&to_f64(pred), h, w, p);
    let b = pad_reflect(&to_f64(target), h, w, p);
    let values = ssim_from_planes(&a, &b, h + 2 * p, w + 2 * p, cfg);
    Ok(SsimMap {
        height: h,
        width: w,
        values,
    })
}

pub fn ssim_map(pred: &Image, target: &Image) -> Result<SsimMap> {
    ssim_map_with(pred, target, &SsimConfig::default())
}

/// Arithmetic mean and population standard deviation.
pub fn aggregate(values: &[f64]) -> Result<Summary> {
    if values.is_empty() {
        return Err(Error::arg("cannot aggregate zero samples"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(Summary {
        mean,
        std: var.sqrt(),
    })
}
