use rayon::prelude::*;

use crate::baselines::{interpolate_linear, interpolate_nearest, NearestPolicy};
use crate::diffusion::{sample_batch, NoiseSchedule};
use crate::error::{Error, Result};
use crate::metrics::{psnr, ssim, MetricsReport, SampleMetrics};
use crate::models::{Model, Network};
use crate::tensor::Tensor;
use crate::volume::{derive_seed, Image, TripletSample};

/// Pairs per forward pass. Fixed so that batch composition, and therefore
/// every result, is independent of the worker count.
const CHUNK: usize = 8;

/// How the middle slice is produced.
#[derive(Clone, Copy)]
pub enum Method<'a> {
    Linear,
    Nearest(NearestPolicy),
    /// One forward pass of a deterministic or adversarially trained predictor.
    Model(&'a Model),
    /// One reverse-diffusion sample per pair; pair `i` uses seed
    /// `mix(seed, i)`.
    Ddpm {
        model: &'a Model,
        schedule: &'a NoiseSchedule,
        seed: u64,
    },
}

impl<'a> Method<'a> {
    /// The right method for a trained predictor.
    pub fn for_model(model: &'a Model, schedule: &'a NoiseSchedule, seed: u64) -> Self {
        if model.network() == Network::DdpmUnet {
            Method::Ddpm {
                model,
                schedule,
                seed,
            }
        } else {
            Method::Model(model)
        }
    }
}

fn pair_tensor(pairs: &[(&Image, &Image)]) -> Result<Tensor> {
    let (h, w) = (pairs[0].0.height, pairs[0].0.width);
    let mut data = Vec::with_capacity(pairs.len() * 2 * h * w);
    for (lo, up) in pairs {
        lo.check_same(up, "prediction input")?;
        if (lo.height, lo.width) != (h, w) {
            return Err(Error::shape("prediction batch mixes slice extents"));
        }
        data.extend_from_slice(&lo.data);
        data.extend_from_slice(&up.data);
    }
    Tensor::new(vec![pairs.len(), 2, h, w], data)
}

fn split_images(t: &Tensor) -> Result<Vec<Image>> {
    let [b, _, h, w] = t.dims4()?;
    let plane = h * w;
    (0..b)
        .map(|i| Image::new(h, w, t.data()[i * plane..(i + 1) * plane].to_vec()))
        .collect()
}

fn predict_chunk(method: &Method<'_>, pairs: &[(&Image, &Image)], offset: usize) -> Result<Vec<Image>> {
    match *method {
        Method::Linear => pairs.iter().map(|(a, b)| interpolate_linear(a, b)).collect(),
        Method::Nearest(p) => pairs.iter().map(|(a, b)| interpolate_nearest(a, b, p)).collect(),
        Method::Model(model) => split_images(&model.predict(&pair_tensor(pairs)?, None)?),
        Method::Ddpm {
            model,
            schedule,
            seed,
        } => {
            let seeds: Vec<u64> = (0..pairs.len())
                .map(|i| derive_seed(seed, (offset + i) as u64))
                .collect();
            split_images(&sample_batch(model, &pair_tensor(pairs)?, schedule, &seeds, true)?)
        }
    }
}

/// Predict the middle slice of every `(lower, upper)` pair, in order.
///
/// `threads > 1` spreads fixed-size chunks over a worker pool; the output is
/// the same for any thread count.
pub fn predict_pairs(
    method: &Method<'_>,
    pairs: &[(&Image, &Image)],
    threads: usize,
) -> Result<Vec<Image>> {
    let chunks: Vec<(usize, &[(&Image, &Image)])> = pairs
        .chunks(CHUNK)
        .enumerate()
        .map(|(i, c)| (i * CHUNK, c))
        .collect();
    let run = |&(offset, chunk): &(usize, &[(&Image, &Image)])| predict_chunk(method, chunk, offset);
    let per_chunk: Vec<Vec<Image>> = if threads <= 1 {
        chunks.iter().map(run).collect::<Result<_>>()?
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::arg(format!("cannot start {threads} workers: {e}")))?;
        pool.install(|| chunks.par_iter().map(run).collect::<Result<_>>())?
    };
    Ok(per_chunk.into_iter().flatten().collect())
}

/// Predict every triplet's target and score it with PSNR and SSIM.
pub fn evaluate(
    name: &str,
    method: &Method<'_>,
    samples: &[TripletSample],
    k: usize,
    threads: usize,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::arg("evaluation set is empty"));
    }
    let pairs: Vec<(&Image, &Image)> = samples.iter().map(|s| (&s.lower, &s.upper)).collect();
    let preds = predict_pairs(method, &pairs, threads)?;
    let records = samples
        .iter()
        .zip(&preds)
        .map(|(s, p)| {
            Ok(SampleMetrics {
                patient_id: s.patient_id.clone(),
                slice_index: s.slice_index,
                psnr_db: psnr(p, &s.target, 1.0)?,
                ssim: ssim(p, &s.target)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::new(name, k, records)
}
