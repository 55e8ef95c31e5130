//! The `interslice` command line.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 checkpoint error,
//! 4 data error (bad volumes, extent mismatches, unwritable outputs).

mod config;

pub use config::{
    AblateConfig, DataConfig, EvalConfig, ExperimentConfig, Overrides, Scale, RESOLVED_CONFIG_FILE,
};

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim, ssim_map, MetricsReport, SampleMetrics};
use crate::models::{load_checkpoint, save_checkpoint, Model, Network};
use crate::training::{ablate_k, evaluate, predict_pairs, train_architecture, Method};
use crate::volume::{derive_seed, load_volume, save_volume, write_atomic, Image, Split, Volume};

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CHECKPOINT: i32 = 3;
pub const EXIT_DATA: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "interslice", version, about = "Through-plane slice interpolation experiments")]
pub struct Cli {
    /// Experiment config (TOML). Every key is optional except `model.architecture`.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Evaluation workers. Results do not depend on this.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, global = true, value_enum)]
    pub scale: Option<Scale>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write synthetic phantom volumes and a manifest.
    Phantom {
        /// Number of volumes (default: data.n_volumes).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train the configured architecture; writes checkpoint.smdl and history.csv.
    Train,
    /// Score a checkpoint or a baseline on the test split.
    Eval {
        #[command(flatten)]
        predictor: PredictorArgs,
        /// Slice gap (default: data.k).
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train and test every configured architecture at every gap.
    Ablate,
    /// Insert one predicted slice between each pair of neighbours.
    Interpolate {
        volume: PathBuf,
        #[command(flatten)]
        predictor: PredictorArgs,
    },
    /// Slice-wise PSNR and SSIM between two volumes.
    Metrics { a: PathBuf, b: PathBuf },
    /// Local SSIM graymaps of selected slices.
    SsimMap {
        pred: PathBuf,
        target: PathBuf,
        /// Slice indices (default: the middle slice).
        #[arg(long, value_delimiter = ',')]
        slices: Vec<usize>,
    },
}

#[derive(Debug, clap::Args)]
#[group(required = true, multiple = false)]
pub struct PredictorArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Linear,
    Nearest,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_CONFIG,
        Error::Checkpoint(_) => EXIT_CHECKPOINT,
        _ => EXIT_DATA,
    }
}

/// Parse `args` (program name first), run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::Config("--threads must be at least 1".into()));
    }
    let ov = Overrides {
        scale: cli.scale,
        seed: cli.seed,
        output: cli.out.clone(),
    };
    let mut cfg = ExperimentConfig::load(cli.config.as_deref(), &ov)?;
    match &cli.command {
        Command::Phantom { n } => {
            if let Some(n) = n {
                cfg.data.n_volumes = *n;
            }
            cmd_phantom(&cfg)
        }
        Command::Train => cmd_train(&cfg),
        Command::Eval { predictor, k } => {
            if let Some(k) = k {
                cfg.data.k = *k;
            }
            cfg.validate()?;
            cmd_eval(&cfg, predictor, cli.threads)
        }
        Command::Ablate => cmd_ablate(&cfg, cli.threads),
        Command::Interpolate { volume, predictor } => cmd_interpolate(&cfg, volume, predictor, cli.threads),
        Command::Metrics { a, b } => cmd_metrics(&cfg, a, b),
        Command::SsimMap {
            pred,
            target,
            slices,
        } => cmd_ssim_map(&cfg, pred, target, slices),
    }
}

/// Create the output directory and record the resolved config in it.
fn prepare_output(cfg: &ExperimentConfig) -> Result<&Path> {
    let dir = cfg.output.as_path();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cfg.write_resolved(dir)?;
    Ok(dir)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    write_text(path, &s)
}

#[derive(Serialize)]
struct PhantomEntry {
    patient_id: String,
    file: String,
    seed: u64,
}

#[derive(Serialize)]
struct PhantomManifest<'a> {
    master_seed: u64,
    n_volumes: usize,
    params: &'a crate::volume::PhantomParams,
    volumes: Vec<PhantomEntry>,
}

pub const PHANTOM_MANIFEST_FILE: &str = "manifest.json";

fn cmd_phantom(cfg: &ExperimentConfig) -> Result<()> {
    let dir = prepare_output(cfg)?;
    let params = &cfg.data.phantom;
    let ds = crate::volume::Dataset::phantoms(params, cfg.data.n_volumes)?;
    let mut volumes = Vec::with_capacity(ds.volumes.len());
    for (i, v) in ds.volumes.iter().enumerate() {
        let file = format!("{}.svol", v.patient_id);
        save_volume(v, dir.join(&file))?;
        volumes.push(PhantomEntry {
            patient_id: v.patient_id.clone(),
            file,
            seed: derive_seed(params.seed, i as u64),
        });
    }
    write_json(
        &dir.join(PHANTOM_MANIFEST_FILE),
        &PhantomManifest {
            master_seed: params.seed,
            n_volumes: volumes.len(),
            params,
            volumes,
        },
    )?;
    println!("wrote {} volumes to {}", ds.volumes.len(), dir.display());
    Ok(())
}

pub const CHECKPOINT_FILE: &str = "checkpoint.smdl";
pub const DISCRIMINATOR_FILE: &str = "discriminator.smdl";
pub const HISTORY_FILE: &str = "history.csv";
pub const SPLITS_FILE: &str = "splits.json";
pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

fn cmd_train(cfg: &ExperimentConfig) -> Result<()> {
    let model_cfg = cfg.model_config()?;
    let dir = prepare_output(cfg)?;
    let (ds, manifest) = cfg.dataset()?;
    write_json(&dir.join(SPLITS_FILE), &manifest)?;
    let k = cfg.data.k;
    let train = ds.triplets(&manifest, Split::Train, k)?;
    let val = ds.triplets(&manifest, Split::Val, k)?;
    log::info!(
        "{}: {} train / {} val triplets at k={k}",
        model_cfg.architecture.name(),
        train.len(),
        val.len()
    );
    let schedule = cfg.diffusion.build()?;
    let mut trained = train_architecture(model_cfg, &cfg.train, &schedule, &train, &val)?;
    save_checkpoint(&trained.predictor, dir.join(CHECKPOINT_FILE))?;
    if let Some(d) = &trained.discriminator {
        save_checkpoint(d, dir.join(DISCRIMINATOR_FILE))?;
    }
    trained.history.checkpoint = Some(CHECKPOINT_FILE.into());
    write_text(&dir.join(HISTORY_FILE), &trained.history.to_csv())?;
    print!("{}", trained.history.summary());
    println!("best epoch {}; weights in {}", trained.history.best_epoch, dir.join(CHECKPOINT_FILE).display());
    Ok(())
}

/// Load a predictor checkpoint, checking it against the config's model section.
fn load_predictor(cfg: &ExperimentConfig, path: &Path) -> Result<Model> {
    let model = load_checkpoint(path).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        e => Error::Checkpoint(format!("{}: {e}", path.display())),
    })?;
    if matches!(model.network(), Network::Discriminator(_)) {
        return Err(Error::Checkpoint(format!(
            "{} holds a discriminator, not a predictor",
            path.display()
        )));
    }
    if let Some(m) = &cfg.model {
        if m.architecture != model.config().architecture {
            return Err(Error::Checkpoint(format!(
                "{} holds a {} model but the config asks for {}",
                path.display(),
                model.config().architecture.name(),
                m.architecture.name()
            )));
        }
    }
    Ok(model)
}

enum Predictor {
    Baseline(Baseline),
    Model(Box<Model>),
}

impl Predictor {
    fn from_args(cfg: &ExperimentConfig, args: &PredictorArgs) -> Result<Self> {
        match (&args.checkpoint, args.baseline) {
            (Some(p), _) => Ok(Predictor::Model(Box::new(load_predictor(cfg, p)?))),
            (None, Some(b)) => Ok(Predictor::Baseline(b)),
            (None, None) => Err(Error::Config("give --checkpoint or --baseline".into())),
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Predictor::Baseline(Baseline::Linear) => "linear",
            Predictor::Baseline(Baseline::Nearest) => "nearest",
            Predictor::Model(m) => m.config().architecture.name(),
        }
    }

    fn method<'a>(&'a self, cfg: &ExperimentConfig, schedule: &'a crate::diffusion::NoiseSchedule) -> Method<'a> {
        match self {
            Predictor::Baseline(Baseline::Linear) => Method::Linear,
            Predictor::Baseline(Baseline::Nearest) => Method::Nearest(cfg.eval.nearest_policy),
            Predictor::Model(m) => Method::for_model(m, schedule, cfg.eval.seed),
        }
    }
}

fn cmd_eval(cfg: &ExperimentConfig, args: &PredictorArgs, threads: usize) -> Result<()> {
    let predictor = Predictor::from_args(cfg, args)?;
    let dir = prepare_output(cfg)?;
    let (ds, manifest) = cfg.dataset()?;
    let k = cfg.data.k;
    let test = ds.triplets(&manifest, Split::Test, k)?;
    let schedule = cfg.diffusion.build()?;
    let report = evaluate(predictor.name(), &predictor.method(cfg, &schedule), &test, k, threads)?;
    report.write_csv(dir.join(REPORT_FILE))?;
    let block = report.summary_block();
    write_text(&dir.join(SUMMARY_FILE), &block)?;
    print!("{block}");
    Ok(())
}

pub const ABLATION_CSV_FILE: &str = "ablation.csv";
pub const ABLATION_TEXT_FILE: &str = "ablation.txt";

fn cmd_ablate(cfg: &ExperimentConfig, threads: usize) -> Result<()> {
    let (ks, runs) = cfg.ablation_runs()?;
    let dir = prepare_output(cfg)?;
    let (ds, manifest) = cfg.dataset()?;
    write_json(&dir.join(SPLITS_FILE), &manifest)?;
    let schedule = cfg.diffusion.build()?;
    let mut rows = Vec::with_capacity(runs.len());
    // each architecture keeps its own training settings
    for (model_cfg, train_cfg) in &runs {
        let one = ablate_k(
            std::slice::from_ref(model_cfg),
            &ks,
            &ds,
            &manifest,
            train_cfg,
            &schedule,
            cfg.eval.seed,
            threads,
        )?;
        rows.extend(one.rows);
    }
    let report = crate::training::AblationReport { ks, rows };
    write_text(&dir.join(ABLATION_CSV_FILE), &report.to_csv())?;
    let text = report.to_text();
    write_text(&dir.join(ABLATION_TEXT_FILE), &text)?;
    print!("{text}");
    Ok(())
}

/// `n` slices become `2n - 1`: originals at even indices, predictions between
/// them, at half the slice spacing.
pub fn upsample_volume(volume: &Volume, method: &Method<'_>, threads: usize) -> Result<Volume> {
    let n = volume.n_slices;
    if n < 2 {
        return Err(Error::arg(format!(
            "{} has {n} slice(s); interpolation needs at least 2",
            volume.patient_id
        )));
    }
    let slices: Vec<Image> = (0..n).map(|i| volume.slice(i)).collect();
    let pairs: Vec<(&Image, &Image)> = slices.windows(2).map(|w| (&w[0], &w[1])).collect();
    let mids = predict_pairs(method, &pairs, threads)?;
    let mut out = Vec::with_capacity(2 * n - 1);
    for (s, m) in slices.iter().zip(&mids) {
        out.push(s.clone());
        out.push(m.clone());
    }
    out.push(slices[n - 1].clone());
    Volume::from_slices(
        volume.patient_id.clone(),
        &out,
        volume.in_plane_mm,
        volume.slice_mm / 2.0,
    )
}

fn cmd_interpolate(
    cfg: &ExperimentConfig,
    path: &Path,
    args: &PredictorArgs,
    threads: usize,
) -> Result<()> {
    let predictor = Predictor::from_args(cfg, args)?;
    let volume = load_volume(path)?;
    let dir = prepare_output(cfg)?;
    let schedule = cfg.diffusion.build()?;
    let up = upsample_volume(&volume, &predictor.method(cfg, &schedule), threads)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("volume");
    let out = dir.join(format!("{stem}_x2.svol"));
    save_volume(&up, &out)?;
    println!(
        "{}: {} slices at {} mm -> {} slices at {} mm ({})",
        volume.patient_id,
        volume.n_slices,
        volume.slice_mm,
        up.n_slices,
        up.slice_mm,
        out.display()
    );
    Ok(())
}

pub const METRICS_FILE: &str = "metrics.csv";

fn check_extents(a: &Volume, b: &Volume) -> Result<()> {
    if (a.n_slices, a.height, a.width) != (b.n_slices, b.height, b.width) {
        return Err(Error::shape(format!(
            "volume extents differ: {}x{}x{} vs {}x{}x{}",
            a.n_slices, a.height, a.width, b.n_slices, b.height, b.width
        )));
    }
    Ok(())
}

fn cmd_metrics(cfg: &ExperimentConfig, a: &Path, b: &Path) -> Result<()> {
    let (va, vb) = (load_volume(a)?, load_volume(b)?);
    check_extents(&va, &vb)?;
    let dir = prepare_output(cfg)?;
    let samples = (0..va.n_slices)
        .map(|i| {
            let (x, y) = (va.slice(i), vb.slice(i));
            Ok(SampleMetrics {
                patient_id: va.patient_id.clone(),
                slice_index: i,
                psnr_db: psnr(&x, &y, 1.0)?,
                ssim: ssim(&x, &y)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = MetricsReport::new(va.patient_id.clone(), 0, samples)?;
    report.write_csv(dir.join(METRICS_FILE))?;
    print!("{}", report.summary_block());
    Ok(())
}

fn cmd_ssim_map(cfg: &ExperimentConfig, pred: &Path, target: &Path, slices: &[usize]) -> Result<()> {
    let (vp, vt) = (load_volume(pred)?, load_volume(target)?);
    check_extents(&vp, &vt)?;
    let slices = if slices.is_empty() { vec![vp.n_slices / 2] } else { slices.to_vec() };
    if let Some(bad) = slices.iter().find(|&&i| i >= vp.n_slices) {
        return Err(Error::arg(format!("slice {bad} out of range for {} slices", vp.n_slices)));
    }
    let dir = prepare_output(cfg)?;
    for i in slices {
        let map = ssim_map(&vp.slice(i), &vt.slice(i))?;
        let path = dir.join(format!("ssim_map_{i:03}.pgm"));
        map.write_pgm(&path)?;
        println!("slice {i}: mean local SSIM {:.4} ({})", map.mean(), path.display());
    }
    Ok(())
}
