//! Denoising diffusion: noise schedule, forward marginal, reverse step,
//! ancestral sampling and the noise-prediction objective.
//!
//! Timesteps are 1-based: `t = 1` is the least noisy step and `t = T` the
//! most. The reverse variance is `beta_t`.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mode, Tape, VarId};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Endpoints of a linear schedule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl ScheduleConfig {
    pub fn paper() -> Self {
        Self {
            timesteps: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }

    /// 25 steps with betas scaled by 4, which keeps the final signal level
    /// close to the 100-step schedule.
    pub fn desk() -> Self {
        Self {
            timesteps: 25,
            beta_start: 4e-4,
            beta_end: 0.08,
        }
    }

    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_start, self.beta_end)
    }
}

impl NoiseSchedule {
    /// `beta_t` interpolates linearly from `beta_start` (t = 1) to `beta_end` (t = T).
    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(Error::arg(format!("need at least 2 timesteps, got {timesteps}")));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::arg(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas: Vec<f64> = (0..timesteps)
            .map(|i| {
                let f = i as f64 / (timesteps - 1) as f64;
                beta_start * (1.0 - f) + beta_end * f
            })
            .collect();
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let alpha_bars = alphas
            .iter()
            .scan(1.0, |acc, a| {
                *acc *= a;
                Some(*acc)
            })
            .collect();
        Ok(Self {
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.timesteps() {
            return Err(Error::arg(format!(
                "timestep {t} outside [1, {}]",
                self.timesteps()
            )));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.index(t)?])
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }
}

fn check_same<T: Element>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn combine<T: Element>(a: &Tensor<T>, ca: f64, b: &Tensor<T>, cb: f64) -> Tensor<T> {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| T::from_f64_lossy(ca * x.as_f64() + cb * y.as_f64()))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample<T: Element>(
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    check_same(x0, eps, "q_sample")?;
    let ab = schedule.alpha_bar(t)?;
    Ok(combine(x0, ab.sqrt(), eps, (1.0 - ab).sqrt()))
}

/// [`q_sample`] with one timestep per batch item.
pub fn q_sample_batch<T: Element>(
    x0: &Tensor<T>,
    ts: &[usize],
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    check_same(x0, eps, "q_sample_batch")?;
    let batch = x0.shape().first().copied().unwrap_or(0);
    if ts.len() != batch {
        return Err(Error::shape(format!("{} timesteps for a batch of {batch}", ts.len())));
    }
    let items = ts
        .iter()
        .enumerate()
        .map(|(i, &t)| q_sample(&x0.batch_item(i)?, t, &eps.batch_item(i)?, schedule))
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack_batch(&items)
}

/// `(x_t - sqrt(1 - abar_t) eps_hat) / sqrt(abar_t)`.
pub fn predict_x0<T: Element>(
    x_t: &Tensor<T>,
    t: usize,
    eps_hat: &Tensor<T>,
    schedule: &NoiseSchedule,
) -> Result<Tensor<T>> {
    check_same(x_t, eps_hat, "predict_x0")?;
    let ab = schedule.alpha_bar(t)?;
    let s = ab.sqrt();
    Ok(combine(x_t, 1.0 / s, eps_hat, -(1.0 - ab).sqrt() / s))
}

/// One reverse step. The mean is
/// `(x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)`; for `t > 1`
/// `sqrt(beta_t) * noise` is added when `noise` is given. The last step
/// (`t = 1`) always returns the mean.
pub fn p_sample_step<T: Element>(
    x_t: &Tensor<T>,
    t: usize,
    eps_hat: &Tensor<T>,
    schedule: &NoiseSchedule,
    noise: Option<&Tensor<T>>,
) -> Result<Tensor<T>> {
    check_same(x_t, eps_hat, "p_sample_step")?;
    let (beta, alpha, ab) = (schedule.beta(t)?, schedule.alpha(t)?, schedule.alpha_bar(t)?);
    let inv = 1.0 / alpha.sqrt();
    let mean = combine(x_t, inv, eps_hat, -inv * beta / (1.0 - ab).sqrt());
    match noise {
        Some(z) if t > 1 => {
            check_same(x_t, z, "p_sample_step noise")?;
            Ok(combine(&mean, 1.0, z, beta.sqrt()))
        }
        _ => Ok(mean),
    }
}

/// Anything that predicts the noise in `x_t` given the conditioning slices.
///
/// `x_t` is `[B,1,H,W]`, `condition` is `[B,2,H,W]`; every batch item is at
/// timestep `t`.
pub trait Denoiser {
    fn predict_noise(&self, x_t: &Tensor, condition: &Tensor, t: usize) -> Result<Tensor>;
}

impl Denoiser for Model {
    fn predict_noise(&self, x_t: &Tensor, condition: &Tensor, t: usize) -> Result<Tensor> {
        let input = concat_channels(x_t, condition)?;
        let batch = input.shape()[0];
        self.predict(&input, Some(&vec![t; batch]))
    }
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict_noise(&self, x_t: &Tensor, condition: &Tensor, t: usize) -> Result<Tensor> {
        (**self).predict_noise(x_t, condition, t)
    }
}

/// Wraps a denoiser and counts its calls.
pub struct CountingDenoiser<D> {
    pub inner: D,
    calls: AtomicUsize,
}

impl<D> CountingDenoiser<D> {
    pub fn new(inner: D) -> Self {
        Self {
            inner,
            calls: AtomicUsize::new(0),
        }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<D: Denoiser> Denoiser for CountingDenoiser<D> {
    fn predict_noise(&self, x_t: &Tensor, condition: &Tensor, t: usize) -> Result<Tensor> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.predict_noise(x_t, condition, t)
    }
}

/// Channel concatenation of two `[B,C,H,W]` tensors.
pub fn concat_channels<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [ba, ca, h, w] = a.dims4()?;
    let [bb, cb, hb, wb] = b.dims4()?;
    if ba != bb || h != hb || w != wb {
        return Err(Error::shape(format!(
            "cannot concatenate {:?} and {:?} along channels",
            a.shape(),
            b.shape()
        )));
    }
    let plane = h * w;
    let mut data = Vec::with_capacity(a.len() + b.len());
    for i in 0..ba {
        data.extend_from_slice(&a.data()[i * ca * plane..(i + 1) * ca * plane]);
        data.extend_from_slice(&b.data()[i * cb * plane..(i + 1) * cb * plane]);
    }
    Tensor::new(vec![ba, ca + cb, h, w], data)
}

fn normal_item(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            v as f32
        })
        .collect()
}

/// Reverse loop from `x_T ~ N(0, I)` down to `t = 1`, clamped to `[0, 1]`.
///
/// Each batch item draws its noise from its own seed, so a trajectory does not
/// depend on what else is in the batch. The denoiser is called exactly `T`
/// times. With `inject_noise = false` the loop is deterministic after the
/// initial draw.
pub fn sample_batch<D: Denoiser + ?Sized>(
    denoiser: &D,
    condition: &Tensor,
    schedule: &NoiseSchedule,
    seeds: &[u64],
    inject_noise: bool,
) -> Result<Tensor> {
    let [batch, _, h, w] = condition.dims4()?;
    if seeds.len() != batch {
        return Err(Error::shape(format!("{} seeds for a batch of {batch}", seeds.len())));
    }
    let plane = h * w;
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let draw = |rngs: &mut [ChaCha8Rng]| -> Result<Tensor> {
        let data = rngs.iter_mut().flat_map(|r| normal_item(r, plane)).collect();
        Tensor::new(vec![batch, 1, h, w], data)
    };
    let mut x = draw(&mut rngs)?;
    for t in (1..=schedule.timesteps()).rev() {
        let eps_hat = denoiser.predict_noise(&x, condition, t)?;
        let noise = if inject_noise && t > 1 {
            Some(draw(&mut rngs)?)
        } else {
            None
        };
        x = p_sample_step(&x, t, &eps_hat, schedule, noise.as_ref())?;
    }
    Ok(x.map(|v| v.clamp(0.0, 1.0)))
}

/// Single-seed convenience wrapper around [`sample_batch`].
pub fn sample<D: Denoiser + ?Sized>(
    denoiser: &D,
    condition: &Tensor,
    schedule: &NoiseSchedule,
    seed: u64,
) -> Result<Tensor> {
    let batch = condition.dims4()?[0];
    let seeds: Vec<u64> = (0..batch as u64).map(|i| seed.wrapping_add(i)).collect();
    sample_batch(denoiser, condition, schedule, &seeds, true)
}

/// Mean squared error between `eps` and the model's noise prediction on
/// `q_sample(x0, t, eps)` concatenated with `condition`.
#[allow(clippy::too_many_arguments)]
pub fn ddpm_training_loss<T: Element>(
    tape: &mut Tape<T>,
    model: &mut Model<T>,
    vars: &[VarId],
    x0: &Tensor<T>,
    condition: &Tensor<T>,
    ts: &[usize],
    eps: &Tensor<T>,
    schedule: &NoiseSchedule,
    mode: Mode,
) -> Result<VarId> {
    let x_t = q_sample_batch(x0, ts, eps, schedule)?;
    let input = tape.constant(concat_channels(&x_t, condition)?);
    let out = model.forward(tape, vars, input, Some(ts), mode)?;
    let target = tape.constant(eps.clone());
    tape.mse_loss(out.output, target)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;
    use crate::models::{build_ddpm_unet, Architecture, ModelConfig};
    use rand::Rng;

    fn paper() -> NoiseSchedule {
        ScheduleConfig::paper().build().unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape.to_vec(), |_| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v as f32
        })
    }

    #[test]
    fn linear_schedule_values() {
        let s = paper();
        assert_eq!(s.beta(1).unwrap(), 1e-4);
        assert_eq!(s.beta(100).unwrap(), 0.02);
        let oracle = 1e-4 + (49.0 / 99.0) * 0.0199;
        assert!((s.beta(50).unwrap() - oracle).abs() < 1e-15);
        assert!((s.beta(50).unwrap() - 0.0099495).abs() < 1e-7);
        assert!((s.alpha_bar(1).unwrap() - 0.9999).abs() < 1e-15);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0));
        assert!(s.betas().windows(2).all(|w| w[1] >= w[0]));
        assert!(s.beta(0).is_err() && s.beta(101).is_err());
    }

    #[test]
    fn schedule_argument_errors() {
        assert!(NoiseSchedule::linear(1, 1e-4, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.0, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 0.03, 0.02).is_err());
        assert!(NoiseSchedule::linear(10, 1e-4, 1.0).is_err());
        assert_eq!(ScheduleConfig::desk().build().unwrap().timesteps(), 25);
    }

    #[test]
    fn stepwise_kernel_composes_to_marginal() {
        let s = NoiseSchedule::linear(5, 1e-4, 0.02).unwrap();
        let (mut mean, mut var) = (1.0f64, 0.0f64);
        for t in 1..=5 {
            let beta = 1e-4 + (t - 1) as f64 / 4.0 * (0.02 - 1e-4);
            mean *= (1.0 - beta).sqrt();
            var = (1.0 - beta) * var + beta;
            let ab = s.alpha_bar(t).unwrap();
            assert!((mean - ab.sqrt()).abs() < 1e-12);
            assert!((var - (1.0 - ab)).abs() < 1e-12);
        }
    }

    #[test]
    fn q_sample_cases() {
        let s = paper();
        let x0 = random(&[1, 1, 4, 4], 1);
        let zero = Tensor::zeros(vec![1, 1, 4, 4]);
        let xt = q_sample(&x0, 30, &zero, &s).unwrap();
        let c = s.alpha_bar(30).unwrap().sqrt();
        for (a, b) in xt.data().iter().zip(x0.data()) {
            assert!((*a as f64 - c * *b as f64).abs() < 1e-6);
        }
        let eps = random(&[1, 1, 4, 4], 2);
        let x1 = q_sample(&x0, 1, &eps, &s).unwrap();
        let bound = (1.0 - s.alpha_bar(1).unwrap()).sqrt();
        for ((a, b), e) in x1.data().iter().zip(x0.data()).zip(eps.data()) {
            assert!(((a - b).abs() as f64) <= bound * (e.abs() as f64) + 1e-4);
        }
        assert!(q_sample(&x0, 0, &eps, &s).is_err());
    }

    #[test]
    fn predict_x0_inverts_q_sample() {
        let s = paper();
        let x0 = random(&[2, 1, 8, 8], 3);
        for t in 1..=100 {
            let eps = random(&[2, 1, 8, 8], 100 + t as u64);
            let xt = q_sample(&x0, t, &eps, &s).unwrap();
            let back = predict_x0(&xt, t, &eps, &s).unwrap();
            for (a, b) in back.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-5, "t={t}");
            }
        }
        // the f64 path is exact to 1e-6 as well
        let x0: Tensor<f64> = x0.cast();
        for t in 1..=100 {
            let eps: Tensor<f64> = random(&[2, 1, 8, 8], t as u64).cast();
            let back = predict_x0(&q_sample(&x0, t, &eps, &s).unwrap(), t, &eps, &s).unwrap();
            for (a, b) in back.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn predict_x0_formula_oracle() {
        let s = paper();
        let xt: Tensor<f64> = random(&[1, 1, 3, 3], 5).cast();
        let eh: Tensor<f64> = random(&[1, 1, 3, 3], 6).cast();
        let got = predict_x0(&xt, 40, &eh, &s).unwrap();
        let ab = s.alphas.iter().take(40).product::<f64>();
        for ((g, x), e) in got.data().iter().zip(xt.data()).zip(eh.data()) {
            assert!((g - (x - (1.0 - ab).sqrt() * e) / ab.sqrt()).abs() < 1e-12);
        }
        let zero = Tensor::<f64>::zeros(vec![1, 1, 3, 3]);
        let x0 = xt.clone();
        let t = 17;
        let back = predict_x0(&q_sample(&x0, t, &zero, &s).unwrap(), t, &zero, &s).unwrap();
        for (a, b) in back.data().iter().zip(x0.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn p_sample_step_cases() {
        let s = paper();
        let xt: Tensor<f64> = random(&[1, 1, 3, 3], 7).cast();
        let eh: Tensor<f64> = random(&[1, 1, 3, 3], 8).cast();
        let z: Tensor<f64> = random(&[1, 1, 3, 3], 9).cast();
        let mean_at = |t: usize| -> Vec<f64> {
            let beta = s.betas[t - 1];
            let ab: f64 = s.alphas[..t].iter().product();
            xt.data()
                .iter()
                .zip(eh.data())
                .map(|(x, e)| (x - beta / (1.0 - ab).sqrt() * e) / (1.0 - beta).sqrt())
                .collect()
        };
        let last = p_sample_step(&xt, 1, &eh, &s, Some(&z)).unwrap();
        for (a, b) in last.data().iter().zip(mean_at(1)) {
            assert!((a - b).abs() < 1e-12);
        }
        let step = p_sample_step(&xt, 60, &eh, &s, Some(&z)).unwrap();
        let sb = s.betas[59].sqrt();
        for ((a, m), n) in step.data().iter().zip(mean_at(60)).zip(z.data()) {
            assert!((a - (m + sb * n)).abs() < 1e-12);
        }
        let zero = Tensor::<f64>::zeros(vec![1, 1, 3, 3]);
        let out = p_sample_step(&zero, 50, &zero, &s, None).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    /// Returns the exact noise separating `x_t` from a known clean slice.
    struct Analytic<'a> {
        x0: Tensor,
        schedule: &'a NoiseSchedule,
    }

    impl Denoiser for Analytic<'_> {
        fn predict_noise(&self, x_t: &Tensor, _c: &Tensor, t: usize) -> Result<Tensor> {
            let ab = self.schedule.alpha_bar(t)?;
            let x_t: Tensor<f64> = x_t.cast();
            let x0: Tensor<f64> = self.x0.cast();
            Ok(combine(&x_t, 1.0 / (1.0 - ab).sqrt(), &x0, -ab.sqrt() / (1.0 - ab).sqrt()).cast())
        }
    }

    #[test]
    fn analytic_denoiser_recovers_x0() {
        for cfg in [ScheduleConfig::paper(), ScheduleConfig::desk()] {
            let s = cfg.build().unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let x0 = Tensor::from_fn(vec![2, 1, 8, 8], |_| rng.random_range(0.05f32..0.95));
            let cond = Tensor::zeros(vec![2, 2, 8, 8]);
            let d = CountingDenoiser::new(Analytic {
                x0: x0.clone(),
                schedule: &s,
            });
            let out = sample_batch(&d, &cond, &s, &[1, 2], false).unwrap();
            assert_eq!(d.calls(), s.timesteps());
            for (a, b) in out.data().iter().zip(x0.data()) {
                assert!((a - b).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn sampling_contract() {
        let cfg = ModelConfig {
            base_channels: 4,
            time_embed_dim: 8,
            ..ModelConfig::desk(Architecture::DdpmUnet)
        };
        let model: Model = build_ddpm_unet(&cfg, 0).unwrap();
        let s = ScheduleConfig::desk().build().unwrap();
        let cond = random(&[1, 2, 8, 8], 1).map(|v| v.abs().min(1.0));
        let d = CountingDenoiser::new(&model);
        let a = sample(&d, &cond, &s, 5).unwrap();
        assert_eq!(d.calls(), 25);
        let b = sample(&d, &cond, &s, 5).unwrap();
        assert_eq!(a, b);
        let c = sample(&d, &cond, &s, 6).unwrap();
        let mad: f32 = a.data().iter().zip(c.data()).map(|(x, y)| (x - y).abs()).sum();
        assert!(mad > 0.0);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.shape(), [1, 1, 8, 8]);

        // a trajectory does not depend on its batch neighbours
        let pair = Tensor::stack_batch(&[cond.clone(), random(&[1, 2, 8, 8], 2)]).unwrap();
        let both = sample_batch(&model, &pair, &s, &[42, 43], true).unwrap();
        let single = sample_batch(&model, &cond, &s, &[42], true).unwrap();
        assert_eq!(both.batch_item(0).unwrap(), single);
    }

    #[test]
    fn training_loss_limits() {
        let s = paper();
        // an oracle denoiser: prediction == eps gives zero loss
        let eps = random(&[4, 1, 32, 32], 3);
        let mut tape: Tape = Tape::new();
        let p = tape.constant(eps.clone());
        let e = tape.constant(eps.clone());
        let l = tape.mse_loss(p, e).unwrap();
        assert_eq!(tape.item(l), 0.0);

        // a model with a zeroed output layer predicts 0, so loss = mean(eps^2)
        let cfg = ModelConfig {
            base_channels: 4,
            time_embed_dim: 8,
            ..ModelConfig::desk(Architecture::DdpmUnet)
        };
        let mut model: Model = build_ddpm_unet(&cfg, 0).unwrap();
        let names = model.param_names().to_vec();
        for (n, p) in names.iter().zip(model.params_mut()) {
            if n.starts_with("final") {
                *p = Tensor::zeros(p.shape().to_vec());
            }
        }
        let x0 = random(&[4, 1, 32, 32], 4);
        let cond = random(&[4, 2, 32, 32], 5);
        let mut tape = Tape::new();
        let vars = model.bind(&mut tape, true);
        let l = ddpm_training_loss(
            &mut tape, &mut model, &vars, &x0, &cond, &[1, 20, 50, 100], &eps, &s, Mode::Train,
        )
        .unwrap();
        let want: f64 = eps.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / eps.len() as f64;
        assert!((tape.item(l) as f64 - want).abs() < 1e-5);
        assert!((tape.item(l) - 1.0).abs() < 0.1);
    }

    #[test]
    fn training_loss_gradients() {
        let s = ScheduleConfig::desk().build().unwrap();
        let cfg = ModelConfig {
            base_channels: 4,
            time_embed_dim: 8,
            attention_reduction: 2,
            ..ModelConfig::desk(Architecture::DdpmUnet)
        };
        let model: Model<f64> = build_ddpm_unet(&cfg, 1).unwrap();
        let x0: Tensor<f64> = random(&[2, 1, 8, 8], 1).cast();
        let cond: Tensor<f64> = random(&[2, 2, 8, 8], 2).cast();
        let eps: Tensor<f64> = random(&[2, 1, 8, 8], 3).cast();
        let idx: Vec<usize> = (0..model.params().len()).step_by(5).collect();
        let inputs: Vec<Tensor<f64>> = idx.iter().map(|&i| model.params()[i].clone()).collect();
        let report = check_gradients(
            &inputs,
            |tape, ids| {
                let mut m = model.clone();
                let vars: Vec<VarId> = m
                    .params()
                    .iter()
                    .enumerate()
                    .map(|(i, p)| match idx.iter().position(|&j| j == i) {
                        Some(k) => ids[k],
                        None => tape.constant(p.clone()),
                    })
                    .collect();
                ddpm_training_loss(tape, &mut m, &vars, &x0, &cond, &[3, 20], &eps, &s, Mode::Train)
            },
            1e-5,
            Some(2),
            0,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{}", report.max_rel_error);
    }
}
