//! Optimizer, training loops for the four regimes, evaluation and the
//! gap ablation.
//!
//! Every loop is single-threaded and seeded: the shuffle order (and, for
//! diffusion, the timesteps and noise) of epoch `e` come from a generator
//! seeded with a mix of the run seed and `e`, so reruns are bit-identical.

mod ablation;
mod adam;
mod evaluate;

pub use ablation::{ablate_k, AblationReport};
pub use adam::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use evaluate::{evaluate, predict_pairs, Method};

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, RunningStats, Tape};
use crate::diffusion::{ddpm_training_loss, NoiseSchedule};
use crate::error::{Error, Result};
use crate::metrics::format_sig6;
use crate::models::{build_discriminator, build_model, Architecture, DiscriminatorVariant, Model, ModelConfig};
use crate::tensor::Tensor;
use crate::volume::{derive_seed, TripletSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Weight of the adversarial term in the generator loss.
    pub lambda_adv: f64,
    /// Weight of the discriminator feature-matching term.
    pub lambda_fm: f64,
}

impl TrainConfig {
    pub fn paper(arch: Architecture) -> Self {
        let (epochs, batch_size, lambda_adv, lambda_fm) = match arch {
            Architecture::Edsr | Architecture::Unet => (25, 4, 0.0, 0.0),
            Architecture::GanBasic => (25, 4, 0.001, 0.0),
            Architecture::GanImproved => (10, 4, 0.01, 0.1),
            Architecture::DdpmUnet => (20, 8, 0.0, 0.0),
        };
        Self {
            epochs,
            batch_size,
            learning_rate: 1e-4,
            seed: 0,
            lambda_adv,
            lambda_fm,
        }
    }

    /// Short runs for one CPU core, with a larger step size to compensate.
    pub fn desk(arch: Architecture) -> Self {
        let epochs = match arch {
            Architecture::GanImproved => 5,
            _ => 10,
        };
        Self {
            epochs,
            learning_rate: 1e-3,
            ..Self::paper(arch)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("train.epochs and train.batch_size must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.lambda_adv >= 0.0) || !(self.lambda_fm >= 0.0) {
            return Err(Error::Config(
                "train.learning_rate and loss weights must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    /// The selection metric: generator L1 for deterministic and adversarial
    /// training, the noise-prediction loss for diffusion.
    pub val_loss: f64,
    pub disc_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Where the best weights were written, if they were.
    pub checkpoint: Option<String>,
}

pub const HISTORY_CSV_HEADER: &str = "epoch,train_loss,val_loss,disc_loss";

impl TrainHistory {
    fn new() -> Self {
        Self {
            epochs: Vec::new(),
            best_epoch: 0,
            checkpoint: None,
        }
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().find(|r| r.epoch == self.best_epoch)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(HISTORY_CSV_HEADER);
        s.push('\n');
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                r.epoch,
                format_sig6(r.train_loss),
                format_sig6(r.val_loss),
                r.disc_loss.map(format_sig6).unwrap_or_default()
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// One line per epoch, best epoch marked.
    pub fn summary(&self) -> String {
        let mut s = String::new();
        for r in &self.epochs {
            let _ = write!(
                s,
                "Epoch {}: Train loss {:.4}, Val loss {:.4}",
                r.epoch, r.train_loss, r.val_loss
            );
            if r.epoch == self.best_epoch {
                s.push_str(" (best)");
            }
            s.push('\n');
        }
        s
    }
}

/// Stack `(lower, upper)` into `[B,2,H,W]` and targets into `[B,1,H,W]`.
pub fn batch_tensors(samples: &[&TripletSample]) -> Result<(Tensor, Tensor)> {
    let first = samples
        .first()
        .ok_or_else(|| Error::arg("empty batch"))?;
    let (h, w) = (first.target.height, first.target.width);
    let mut input = Vec::with_capacity(samples.len() * 2 * h * w);
    let mut target = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        s.lower.check_same(&s.target, "batch")?;
        s.upper.check_same(&s.target, "batch")?;
        if (s.target.height, s.target.width) != (h, w) {
            return Err(Error::shape("batch mixes slice extents"));
        }
        input.extend_from_slice(&s.lower.data);
        input.extend_from_slice(&s.upper.data);
        target.extend_from_slice(&s.target.data);
    }
    Ok((
        Tensor::new(vec![samples.len(), 2, h, w], input)?,
        Tensor::new(vec![samples.len(), 1, h, w], target)?,
    ))
}

fn check_splits(train: &[TripletSample], val: &[TripletSample], cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::arg(format!(
            "need non-empty train and val sets, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    Ok(())
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64))
}

fn shuffled_batches<'a>(
    samples: &'a [TripletSample],
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<&'a TripletSample>> {
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size)
        .map(|c| c.iter().map(|&i| &samples[i]).collect())
        .collect()
}

/// Parameters and statistics of the best epoch so far.
struct Best {
    val: f64,
    params: Vec<Tensor>,
    stats: Vec<RunningStats<f32>>,
}

impl Best {
    fn offer(best: &mut Option<Best>, val: f64, model: &Model) -> bool {
        if best.as_ref().is_some_and(|b| b.val <= val) {
            return false;
        }
        *best = Some(Best {
            val,
            params: model.params().to_vec(),
            stats: model.stats().to_vec(),
        });
        true
    }

    fn restore(self, model: &mut Model) {
        model.params_mut().clone_from_slice(&self.params);
        model.stats_mut().clone_from_slice(&self.stats);
    }
}

/// Mean absolute error of the model over `samples`, per pixel.
pub fn validation_l1(model: &Model, samples: &[TripletSample], batch_size: usize) -> Result<f64> {
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&TripletSample> = chunk.iter().collect();
        let (x, y) = batch_tensors(&refs)?;
        let pred = model.predict(&x, None)?;
        total += pred
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| (a - b).abs() as f64)
            .sum::<f64>();
        count += y.len();
    }
    Ok(total / count as f64)
}

/// One L1 step on `model`; returns the batch loss.
fn l1_step(model: &mut Model, opt: &mut Adam, x: &Tensor, y: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = model.bind(&mut tape, true);
    let xv = tape.constant(x.clone());
    let out = model.forward(&mut tape, &vars, xv, None, Mode::Train)?;
    let yv = tape.constant(y.clone());
    let loss = tape.l1_loss(out.output, yv)?;
    tape.backward(loss)?;
    let grads = model.grads(&tape, &vars);
    opt.step(model.params_mut(), &grads)?;
    Ok(tape.item(loss) as f64)
}

fn finish(mut history: TrainHistory, best: Option<Best>, model: &mut Model) -> TrainHistory {
    if let Some(b) = best {
        b.restore(model);
    }
    history.best_epoch = history
        .epochs
        .iter()
        .min_by(|a, b| a.val_loss.total_cmp(&b.val_loss))
        .map_or(0, |r| r.epoch);
    history
}

/// L1 regression of the middle slice from its neighbours. The model ends up
/// holding the weights of the epoch with the lowest validation L1.
pub fn train_deterministic(
    model: &mut Model,
    train: &[TripletSample],
    val: &[TripletSample],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    check_splits(train, val, cfg)?;
    let mut opt = Adam::new(model.params(), cfg.learning_rate);
    let mut history = TrainHistory::new();
    let mut best = None;
    for epoch in 1..=cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut sum = 0.0;
        for batch in shuffled_batches(train, cfg.batch_size, &mut rng) {
            let (x, y) = batch_tensors(&batch)?;
            sum += l1_step(model, &mut opt, &x, &y)? * batch.len() as f64;
        }
        let val_loss = validation_l1(model, val, cfg.batch_size)?;
        Best::offer(&mut best, val_loss, model);
        log::info!("epoch {epoch}: train L1 {:.5}, val L1 {val_loss:.5}", sum / train.len() as f64);
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: sum / train.len() as f64,
            val_loss,
            disc_loss: None,
        });
    }
    Ok(finish(history, best, model))
}

fn const_like(shape: &[usize], v: f32) -> Tensor {
    Tensor::full(shape.to_vec(), v)
}

/// Discriminator loss `0.5 * (BCE(D(real), 1) + BCE(D(fake), 0))`; also returns the two terms.
pub fn discriminator_step(
    disc: &mut Model,
    opt: Option<&mut Adam>,
    real: &Tensor,
    fake: &Tensor,
) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::new();
    let vars = disc.bind(&mut tape, opt.is_some());
    let r = tape.constant(real.clone());
    let f = tape.constant(fake.clone());
    let dr = disc.forward(&mut tape, &vars, r, None, Mode::Train)?.output;
    let df = disc.forward(&mut tape, &vars, f, None, Mode::Train)?.output;
    let ones = tape.constant(const_like(tape.shape(dr), 1.0));
    let zeros = tape.constant(const_like(tape.shape(df), 0.0));
    let lr = tape.bce_with_logits(dr, ones)?;
    let lf = tape.bce_with_logits(df, zeros)?;
    let sum = tape.add(lr, lf)?;
    let loss = tape.scale(sum, 0.5);
    if let Some(opt) = opt {
        tape.backward(loss)?;
        let grads = disc.grads(&tape, &vars);
        opt.step(disc.params_mut(), &grads)?;
    }
    Ok((tape.item(loss) as f64, tape.item(lr) as f64, tape.item(lf) as f64))
}

/// Generator update: `L1 + lambda_adv * BCE(D(G(x)), 1) + lambda_fm * FM`, where
/// FM averages the L1 distance between the discriminator's hidden activations
/// on the real and generated slice over its layers.
fn generator_step(
    gen: &mut Model,
    disc: &Model,
    opt: &mut Adam,
    x: &Tensor,
    y: &Tensor,
    cfg: &TrainConfig,
) -> Result<f64> {
    if cfg.lambda_adv == 0.0 && cfg.lambda_fm == 0.0 {
        return l1_step(gen, opt, x, y);
    }
    let mut tape = Tape::new();
    let gvars = gen.bind(&mut tape, true);
    let dvars = disc.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let pred = gen.forward(&mut tape, &gvars, xv, None, Mode::Train)?.output;
    let yv = tape.constant(y.clone());
    let mut loss = tape.l1_loss(pred, yv)?;
    // the discriminator's running statistics are only updated by its own step
    let mut stats = disc.stats().to_vec();
    let fake = disc.forward_with_stats(&mut tape, &dvars, pred, None, Mode::Train, &mut stats)?;
    if cfg.lambda_adv > 0.0 {
        let ones = tape.constant(const_like(tape.shape(fake.output), 1.0));
        let adv = tape.bce_with_logits(fake.output, ones)?;
        let adv = tape.scale(adv, cfg.lambda_adv);
        loss = tape.add(loss, adv)?;
    }
    if cfg.lambda_fm > 0.0 {
        let real = disc.forward_with_stats(&mut tape, &dvars, yv, None, Mode::Train, &mut stats)?;
        let mut fm = None;
        for (&a, &b) in fake.features.iter().zip(&real.features) {
            let d = tape.l1_loss(a, b)?;
            fm = Some(match fm {
                Some(acc) => tape.add(acc, d)?,
                None => d,
            });
        }
        if let Some(fm) = fm {
            let w = cfg.lambda_fm / fake.features.len() as f64;
            let fm = tape.scale(fm, w);
            loss = tape.add(loss, fm)?;
        }
    }
    tape.backward(loss)?;
    let grads = gen.grads(&tape, &gvars);
    opt.step(gen.params_mut(), &grads)?;
    Ok(tape.item(loss) as f64)
}

/// Alternating adversarial training: per batch one discriminator step, then
/// one generator step. Selection is by the generator's validation L1.
pub fn train_gan(
    gen: &mut Model,
    disc: &mut Model,
    train: &[TripletSample],
    val: &[TripletSample],
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    check_splits(train, val, cfg)?;
    let mut gopt = Adam::new(gen.params(), cfg.learning_rate);
    let mut dopt = Adam::new(disc.params(), cfg.learning_rate);
    let mut history = TrainHistory::new();
    let mut best = None;
    for epoch in 1..=cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let (mut gsum, mut dsum) = (0.0, 0.0);
        for batch in shuffled_batches(train, cfg.batch_size, &mut rng) {
            let (x, y) = batch_tensors(&batch)?;
            let fake = gen.predict(&x, None)?;
            let (dl, _, _) = discriminator_step(disc, Some(&mut dopt), &y, &fake)?;
            dsum += dl * batch.len() as f64;
            gsum += generator_step(gen, disc, &mut gopt, &x, &y, cfg)? * batch.len() as f64;
        }
        let val_loss = validation_l1(gen, val, cfg.batch_size)?;
        Best::offer(&mut best, val_loss, gen);
        let n = train.len() as f64;
        log::info!("epoch {epoch}: G {:.5}, D {:.5}, val L1 {val_loss:.5}", gsum / n, dsum / n);
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: gsum / n,
            val_loss,
            disc_loss: Some(dsum / n),
        });
    }
    Ok(finish(history, best, gen))
}

fn ddpm_batch(
    samples: &[&TripletSample],
    rng: &mut ChaCha8Rng,
    timesteps: usize,
) -> Result<(Tensor, Tensor, Vec<usize>, Tensor)> {
    let (cond, x0) = batch_tensors(samples)?;
    let ts: Vec<usize> = (0..samples.len()).map(|_| rng.random_range(1..=timesteps)).collect();
    let eps = Tensor::from_fn(x0.shape().to_vec(), |_| {
        let v: f64 = StandardNormal.sample(rng);
        v as f32
    });
    Ok((cond, x0, ts, eps))
}

/// Noise-prediction loss over `samples` with timesteps and noise drawn from
/// `seed`, without updating anything.
pub fn ddpm_validation_loss(
    model: &Model,
    samples: &[TripletSample],
    schedule: &NoiseSchedule,
    batch_size: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eval_model = model.clone();
    let (mut sum, mut n) = (0.0, 0usize);
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&TripletSample> = chunk.iter().collect();
        let (cond, x0, ts, eps) = ddpm_batch(&refs, &mut rng, schedule.timesteps())?;
        let mut tape = Tape::new();
        let vars = eval_model.bind(&mut tape, false);
        let loss = ddpm_training_loss(
            &mut tape, &mut eval_model, &vars, &x0, &cond, &ts, &eps, schedule, Mode::Eval,
        )?;
        sum += tape.item(loss) as f64 * chunk.len() as f64;
        n += chunk.len();
    }
    Ok(sum / n as f64)
}

/// Seed of the fixed validation draw for a diffusion run.
fn ddpm_val_seed(seed: u64) -> u64 {
    derive_seed(seed, u64::MAX)
}

/// Diffusion training: per batch, uniform timesteps and standard-normal noise,
/// minimizing the noise-prediction MSE. Validation uses one fixed draw so the
/// epochs are comparable; selection is by that loss.
pub fn train_ddpm(
    model: &mut Model,
    train: &[TripletSample],
    val: &[TripletSample],
    schedule: &NoiseSchedule,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    check_splits(train, val, cfg)?;
    let mut opt = Adam::new(model.params(), cfg.learning_rate);
    let mut history = TrainHistory::new();
    let mut best = None;
    for epoch in 1..=cfg.epochs {
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut sum = 0.0;
        for batch in shuffled_batches(train, cfg.batch_size, &mut rng) {
            let (cond, x0, ts, eps) = ddpm_batch(&batch, &mut rng, schedule.timesteps())?;
            let mut tape = Tape::new();
            let vars = model.bind(&mut tape, true);
            let loss = ddpm_training_loss(
                &mut tape, model, &vars, &x0, &cond, &ts, &eps, schedule, Mode::Train,
            )?;
            tape.backward(loss)?;
            let grads = model.grads(&tape, &vars);
            opt.step(model.params_mut(), &grads)?;
            sum += tape.item(loss) as f64 * batch.len() as f64;
        }
        let val_loss = ddpm_validation_loss(model, val, schedule, cfg.batch_size, ddpm_val_seed(cfg.seed))?;
        Best::offer(&mut best, val_loss, model);
        log::info!("epoch {epoch}: train {:.5}, val {val_loss:.5}", sum / train.len() as f64);
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: sum / train.len() as f64,
            val_loss,
            disc_loss: None,
        });
    }
    Ok(finish(history, best, model))
}

/// Networks produced by one training run.
#[derive(Clone, Debug)]
pub struct Trained {
    pub predictor: Model,
    pub discriminator: Option<Model>,
    pub history: TrainHistory,
}

/// Build the networks for `model_cfg.architecture` (initialized from
/// `train_cfg.seed`) and train them with the matching regime.
pub fn train_architecture(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    schedule: &NoiseSchedule,
    train: &[TripletSample],
    val: &[TripletSample],
) -> Result<Trained> {
    let arch = model_cfg.architecture;
    let mut predictor = build_model(model_cfg, train_cfg.seed)?;
    let mut discriminator = None;
    let history = match arch {
        Architecture::Edsr | Architecture::Unet => {
            train_deterministic(&mut predictor, train, val, train_cfg)?
        }
        Architecture::GanBasic | Architecture::GanImproved => {
            let variant = if arch == Architecture::GanBasic {
                DiscriminatorVariant::Basic
            } else {
                DiscriminatorVariant::Improved
            };
            let mut d = build_discriminator(variant, model_cfg, derive_seed(train_cfg.seed, 1))?;
            let h = train_gan(&mut predictor, &mut d, train, val, train_cfg)?;
            discriminator = Some(d);
            h
        }
        Architecture::DdpmUnet => train_ddpm(&mut predictor, train, val, schedule, train_cfg)?,
    };
    Ok(Trained {
        predictor,
        discriminator,
        history,
    })
}
