use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::evaluate::{evaluate, Method};
use super::{train_architecture, TrainConfig};
use crate::diffusion::NoiseSchedule;
use crate::error::{Error, Result};
use crate::metrics::{format_sig6, MetricsReport};
use crate::models::ModelConfig;
use crate::volume::{Dataset, Split, SplitManifest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub architecture: String,
    /// One report per gap, in the order of [`AblationReport::ks`].
    pub reports: Vec<MetricsReport>,
}

/// Test metrics per architecture and gap.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ks: Vec<usize>,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    fn column(&self, k: usize) -> Option<usize> {
        self.ks.iter().position(|&x| x == k)
    }

    /// Mean (PSNR, SSIM) of one row at gap `k`.
    pub fn cell(&self, architecture: &str, k: usize) -> Option<(f64, f64)> {
        let c = self.column(k)?;
        let row = self.rows.iter().find(|r| r.architecture == architecture)?;
        let r = &row.reports[c];
        Some((r.psnr.mean, r.ssim.mean))
    }

    /// Relative change `(k1 - k2) / k2` of the column means, for PSNR and
    /// SSIM. `None` unless both gaps were run.
    pub fn improvement(&self) -> Option<(f64, f64)> {
        let (c1, c2) = (self.column(1)?, self.column(2)?);
        let n = self.rows.len() as f64;
        let mean = |c: usize, f: fn(&MetricsReport) -> f64| {
            self.rows.iter().map(|r| f(&r.reports[c])).sum::<f64>() / n
        };
        let p = |r: &MetricsReport| r.psnr.mean;
        let s = |r: &MetricsReport| r.ssim.mean;
        let (p1, p2, s1, s2) = (mean(c1, p), mean(c2, p), mean(c1, s), mean(c2, s));
        Some(((p1 - p2) / p2, (s1 - s2) / s2))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("architecture");
        for k in &self.ks {
            let _ = write!(s, ",psnr_k{k},ssim_k{k}");
        }
        s.push('\n');
        for row in &self.rows {
            s.push_str(&row.architecture);
            for r in &row.reports {
                let _ = write!(s, ",{},{}", format_sig6(r.psnr.mean), format_sig6(r.ssim.mean));
            }
            s.push('\n');
        }
        if let Some((dp, ds)) = self.improvement() {
            s.push_str("improvement");
            for &k in &self.ks {
                if k == 1 {
                    let _ = write!(s, ",{},{}", format_sig6(dp), format_sig6(ds));
                } else {
                    s.push_str(",,");
                }
            }
            s.push('\n');
        }
        s
    }

    /// Fixed-width table with a percentage improvement row.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<14}", "architecture");
        for k in &self.ks {
            let _ = write!(s, " {:>10} {:>8}", format!("PSNR k={k}"), format!("SSIM k={k}"));
        }
        s.push('\n');
        for row in &self.rows {
            let _ = write!(s, "{:<14}", row.architecture);
            for r in &row.reports {
                let _ = write!(s, " {:>10.2} {:>8.4}", r.psnr.mean, r.ssim.mean);
            }
            s.push('\n');
        }
        if let Some((dp, ds)) = self.improvement() {
            let _ = write!(s, "{:<14}", "improvement");
            for &k in &self.ks {
                if k == 1 {
                    let _ = write!(s, " {:>10} {:>8}", format!("{:+.1}%", 100.0 * dp), format!("{:+.1}%", 100.0 * ds));
                } else {
                    let _ = write!(s, " {:>10} {:>8}", "-", "-");
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Train and test every configuration at every gap on the same patient split.
pub fn ablate_k(
    configs: &[ModelConfig],
    ks: &[usize],
    dataset: &Dataset,
    manifest: &SplitManifest,
    train_cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    eval_seed: u64,
    threads: usize,
) -> Result<AblationReport> {
    if ks.is_empty() || configs.is_empty() {
        return Err(Error::arg("ablation needs at least one gap and one architecture"));
    }
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let mut reports = Vec::with_capacity(ks.len());
        for &k in ks {
            let train = dataset.triplets(manifest, Split::Train, k)?;
            let val = dataset.triplets(manifest, Split::Val, k)?;
            let test = dataset.triplets(manifest, Split::Test, k)?;
            let trained = train_architecture(cfg, train_cfg, schedule, &train, &val)?;
            let method = Method::for_model(&trained.predictor, schedule, eval_seed);
            let report = evaluate(cfg.architecture.name(), &method, &test, k, threads)?;
            log::info!("{}", report.summary_line());
            reports.push(report);
        }
        rows.push(AblationRow {
            architecture: cfg.architecture.name().to_string(),
            reports,
        });
    }
    Ok(AblationReport {
        ks: ks.to_vec(),
        rows,
    })
}
