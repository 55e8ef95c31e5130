//! Central finite-difference gradient checking in `f64`.
//!
//! The checker only ever calls the forward closure; it never looks at the
//! backward implementation it is checking.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Mode, Tape, VarId};
use crate::error::Result;
use crate::models::Model;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|autodiff - fd| / max(1, |fd|)` over the checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
}

/// Compare autodiff gradients of a scalar function against central differences.
///
/// `f` records a forward pass on a fresh tape given one leaf per input and
/// returns the scalar loss. At most `max_coords` coordinates per input are
/// probed (chosen with `seed`); `None` probes all of them.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    f: F,
    step: f64,
    max_coords: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[VarId]) -> Result<VarId>,
{
    let mut tape = Tape::new();
    let ids: Vec<VarId> = inputs.iter().map(|t| tape.var(t.clone())).collect();
    let loss = f(&mut tape, &ids)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .zip(inputs)
        .map(|(&id, t)| {
            tape.grad(id)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();

    let eval = |perturbed: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &ids)?;
        Ok(tape.item(loss))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = inputs.to_vec();
    let mut max_rel_error = 0.0f64;
    let mut checked = 0;
    for (which, input) in inputs.iter().enumerate() {
        let coords: Vec<usize> = match max_coords {
            Some(m) if m < input.len() => sample(&mut rng, input.len(), m).into_vec(),
            _ => (0..input.len()).collect(),
        };
        for c in coords {
            let orig = input.data()[c];
            work[which].data_mut()[c] = orig + step;
            let plus = eval(&work)?;
            work[which].data_mut()[c] = orig - step;
            let minus = eval(&work)?;
            work[which].data_mut()[c] = orig;
            let fd = (plus - minus) / (2.0 * step);
            let err = (analytic[which][c] - fd).abs() / fd.abs().max(1.0);
            max_rel_error = max_rel_error.max(err);
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        checked,
    })
}

/// Check an MSE loss of a whole network against central differences, probing
/// at least `n_params` coordinates spread over randomly chosen parameter
/// tensors (one per tensor when the network has enough of them).
///
/// The forward runs in train mode; batch-norm statistics are copied per pass
/// so the probes all see the same model.
pub fn check_model_gradients(
    model: &Model<f64>,
    input: &Tensor<f64>,
    timesteps: Option<&[usize]>,
    n_params: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let total = model.params().len();
    let chosen = sample(&mut rng, total, n_params.min(total)).into_vec();
    let mut slot = vec![None; total];
    for (j, &i) in chosen.iter().enumerate() {
        slot[i] = Some(j);
    }
    let probe = model.predict(input, timesteps)?;
    let target = Tensor::from_fn(probe.shape().to_vec(), |_| StandardNormal.sample(&mut rng));
    let inputs: Vec<Tensor<f64>> = chosen.iter().map(|&i| model.params()[i].clone()).collect();
    check_gradients(
        &inputs,
        |tape, ids| {
            let vars: Vec<VarId> = model
                .params()
                .iter()
                .zip(&slot)
                .map(|(p, s)| match s {
                    Some(j) => ids[*j],
                    None => tape.constant(p.clone()),
                })
                .collect();
            let x = tape.constant(input.clone());
            let mut stats = model.stats().to_vec();
            let out =
                model.forward_with_stats(tape, &vars, x, timesteps, Mode::Train, &mut stats)?;
            let t = tape.constant(target.clone());
            tape.mse_loss(out.output, t)
        },
        step,
        Some(n_params.div_ceil(chosen.len().max(1))),
        seed,
    )
}
