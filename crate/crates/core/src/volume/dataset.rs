use std::collections::HashSet;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::phantom::generate_phantom_named;
use super::{extract_triplets, load_volume, PhantomParams, TripletSample, Volume};
use crate::error::{Error, Result};

/// Quality-control threshold: volumes with fewer slices are dropped.
pub const DEFAULT_MIN_SLICES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Patient-level partition into train/val/test.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl SplitManifest {
    pub fn ids(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

/// Shuffle patients with `seed`, then cut contiguous train/val/test blocks.
///
/// Train and val get `floor(ratio * n)` patients, test gets the remainder.
pub fn make_splits(patient_ids: &[String], ratios: [f64; 3], seed: u64) -> Result<SplitManifest> {
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
        return Err(Error::arg(format!(
            "split ratios {ratios:?} must be in [0,1] and sum to 1"
        )));
    }
    let n = patient_ids.len();
    if n < 3 {
        return Err(Error::arg(format!(
            "need at least 3 patients for 3 splits, got {n}"
        )));
    }
    let unique: HashSet<&String> = patient_ids.iter().collect();
    if unique.len() != n {
        return Err(Error::arg("patient ids must be unique"));
    }
    let mut ids = patient_ids.to_vec();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    // tolerance keeps e.g. 0.15 * 20 at 3 rather than 2.999..
    let count = |r: f64| ((r * n as f64) + 1e-9).floor() as usize;
    let n_train = count(ratios[0]).min(n);
    let n_val = count(ratios[1]).min(n - n_train);
    let test = ids.split_off(n_train + n_val);
    let val = ids.split_off(n_train);
    Ok(SplitManifest {
        train: ids,
        val,
        test,
        ratios,
        seed,
    })
}

/// A set of normalized volumes, one per patient.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub volumes: Vec<Volume>,
}

impl Dataset {
    pub fn new(volumes: Vec<Volume>) -> Self {
        Self { volumes }
    }

    /// `count` phantoms with seeds derived from `params.seed`.
    pub fn phantoms(params: &PhantomParams, count: usize) -> Result<Self> {
        let volumes = (0..count)
            .map(|i| {
                let p = PhantomParams {
                    seed: derive_seed(params.seed, i as u64),
                    ..params.clone()
                };
                generate_phantom_named(&p, format!("phantom-{i:03}"))
            })
            .collect::<Result<_>>()?;
        Ok(Self { volumes })
    }

    /// Every `*.svol` file in `dir`, in file-name order.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<_> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "svol"))
            .collect();
        paths.sort();
        let volumes = paths.iter().map(load_volume).collect::<Result<_>>()?;
        Ok(Self { volumes })
    }

    /// Drop volumes with fewer than `min_slices` slices.
    pub fn filter_min_slices(mut self, min_slices: usize) -> Self {
        self.volumes.retain(|v| {
            let keep = v.n_slices >= min_slices;
            if !keep {
                log::info!(
                    "excluding {}: {} slices < {min_slices}",
                    v.patient_id,
                    v.n_slices
                );
            }
            keep
        });
        self
    }

    pub fn patient_ids(&self) -> Vec<String> {
        self.volumes.iter().map(|v| v.patient_id.clone()).collect()
    }

    pub fn split(&self, ratios: [f64; 3], seed: u64) -> Result<SplitManifest> {
        make_splits(&self.patient_ids(), ratios, seed)
    }

    /// Triplets at gap `k` from the patients of one split, in manifest order.
    pub fn triplets(
        &self,
        manifest: &SplitManifest,
        split: Split,
        k: usize,
    ) -> Result<Vec<TripletSample>> {
        let mut out = Vec::new();
        for id in manifest.ids(split) {
            let v = self
                .volumes
                .iter()
                .find(|v| &v.patient_id == id)
                .ok_or_else(|| Error::arg(format!("patient {id} not in dataset")))?;
            out.extend(extract_triplets(v, k)?);
        }
        Ok(out)
    }
}

/// SplitMix64 step; mixes a master seed with an index.
pub(crate) fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
