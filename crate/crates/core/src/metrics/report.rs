use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{aggregate, SsimConfig};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub patient_id: String,
    pub slice_index: usize,
    pub psnr_db: f64,
    pub ssim: f64,
}

/// Per-sample metrics for one method at one gap, plus their aggregates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub k: usize,
    pub samples: Vec<SampleMetrics>,
    pub psnr: Summary,
    pub ssim: Summary,
}

pub const REPORT_CSV_HEADER: &str = "patient_id,slice_index,psnr_db,ssim";

impl MetricsReport {
    pub fn new(method: impl Into<String>, k: usize, samples: Vec<SampleMetrics>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::arg("metrics report needs at least one sample"));
        }
        let psnr: Vec<f64> = samples.iter().map(|s| s.psnr_db).collect();
        let ssim: Vec<f64> = samples.iter().map(|s| s.ssim).collect();
        Ok(Self {
            method: method.into(),
            k,
            psnr: aggregate(&psnr)?,
            ssim: aggregate(&ssim)?,
            samples,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.samples.len()
    }

    /// `unet k=1 PSNR 30.08±3.33 SSIM 0.8978±0.0542`
    pub fn summary_line(&self) -> String {
        format!(
            "{} k={} PSNR {:.2}±{:.2} SSIM {:.4}±{:.4}",
            self.method, self.k, self.psnr.mean, self.psnr.std, self.ssim.mean, self.ssim.std
        )
    }

    /// Summary line preceded by the sample count and SSIM settings.
    pub fn summary_block(&self) -> String {
        format!(
            "# n_samples={}\n# ssim: {}\n{}\n",
            self.n_samples(),
            SsimConfig::default(),
            self.summary_line()
        )
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_CSV_HEADER);
        s.push('\n');
        for r in &self.samples {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.patient_id,
                r.slice_index,
                format_sig6(r.psnr_db),
                format_sig6(r.ssim)
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Six significant digits, `%g` style: fixed notation for exponents in
/// `[-5, 6)`, scientific otherwise, trailing zeros dropped.
pub fn format_sig6(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa.to_string()), exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        s
    }
}
