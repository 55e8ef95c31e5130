//! Strict TOML experiment configuration.
//!
//! A config file may leave out any key except `model.architecture` (when a
//! `[model]` table is present). Missing keys are filled from the defaults of
//! the chosen scale and architecture, and the fully resolved document is
//! written next to every command's outputs so the run can be repeated from it.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::baselines::NearestPolicy;
use crate::diffusion::ScheduleConfig;
use crate::error::{Error, Result};
use crate::models::{Architecture, ModelConfig};
use crate::training::TrainConfig;
use crate::volume::{
    normalize_minmax, Dataset, PhantomParams, SplitManifest, DEFAULT_MIN_SLICES,
};

pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.toml";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    /// Reduced widths and short schedules for one CPU core.
    #[default]
    Desk,
    /// Full-size networks and schedules.
    Paper,
}

impl Scale {
    fn model(self, arch: Architecture) -> ModelConfig {
        match self {
            Scale::Desk => ModelConfig::desk(arch),
            Scale::Paper => ModelConfig::paper(arch),
        }
    }

    fn train(self, arch: Architecture, seed: u64) -> TrainConfig {
        let base = match self {
            Scale::Desk => TrainConfig::desk(arch),
            Scale::Paper => TrainConfig::paper(arch),
        };
        TrainConfig { seed, ..base }
    }

    fn schedule(self) -> ScheduleConfig {
        match self {
            Scale::Desk => ScheduleConfig::desk(),
            Scale::Paper => ScheduleConfig::paper(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Slice gap between each input slice and the target.
    pub k: usize,
    /// Train/val/test patient fractions.
    pub split: [f64; 3],
    /// Seed of the patient split.
    pub seed: u64,
    pub min_slices: usize,
    /// Phantoms to generate when no volume directory is given.
    pub n_volumes: usize,
    /// Directory of `.svol` volumes; phantoms are generated when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volume_dir: Option<PathBuf>,
    pub phantom: PhantomParams,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Seed of the reverse-diffusion noise.
    pub seed: u64,
    pub nearest_policy: NearestPolicy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblateConfig {
    pub ks: Vec<usize>,
    pub architectures: Vec<Architecture>,
    /// Per-architecture network settings, keyed by architecture name.
    pub model: BTreeMap<String, ModelConfig>,
    /// Per-architecture training settings, keyed by architecture name.
    pub train: BTreeMap<String, TrainConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub scale: Scale,
    /// Default for every other seed in the document.
    pub seed: u64,
    pub output: PathBuf,
    pub data: DataConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelConfig>,
    pub train: TrainConfig,
    pub diffusion: ScheduleConfig,
    pub eval: EvalConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablate: Option<AblateConfig>,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub scale: Option<Scale>,
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
}

const OPTIONAL_KEYS: &[&str] = &["data.volume_dir"];
const SEED_KEYS: &[&[&str]] = &[
    &["data", "seed"],
    &["data", "phantom", "seed"],
    &["train", "seed"],
    &["eval", "seed"],
];

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn to_value<T: Serialize>(v: &T) -> Value {
    Value::try_from(v).expect("config types serialize to TOML")
}

fn lookup<'a>(t: &'a Table, path: &[&str]) -> Option<&'a Value> {
    let (last, head) = path.split_last()?;
    let mut cur = t;
    for k in head {
        cur = cur.get(*k)?.as_table()?;
    }
    cur.get(*last)
}

fn remove(t: &mut Table, path: &[&str]) {
    let Some((last, head)) = path.split_last() else { return };
    let mut cur = t;
    for k in head {
        match cur.get_mut(*k).and_then(Value::as_table_mut) {
            Some(next) => cur = next,
            None => return,
        }
    }
    cur.remove(*last);
}

fn merge(base: &mut Table, over: &Table) {
    for (k, v) in over {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o),
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
}

fn line_of(text: &str, key: &str) -> Option<usize> {
    text.lines().position(|l| {
        let l = l.trim_start();
        l.strip_prefix(key)
            .is_some_and(|rest| rest.trim_start().starts_with('=') || rest.starts_with('.'))
    })
}

/// Reject keys of `raw` that have no counterpart in `allowed`.
fn check_keys(raw: &Table, allowed: &Table, prefix: &str, text: &str) -> Result<()> {
    for (k, v) in raw {
        let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match allowed.get(k) {
            Some(Value::Table(a)) => {
                if let Value::Table(r) = v {
                    check_keys(r, a, &path, text)?;
                }
            }
            Some(_) => {}
            None if OPTIONAL_KEYS.contains(&path.as_str()) => {}
            None => {
                let at = line_of(text, k).map(|l| format!(" (line {})", l + 1)).unwrap_or_default();
                return Err(config_err(format!("unknown key `{path}`{at}")));
            }
        }
    }
    Ok(())
}

fn parse_arch(v: &Value, field: &str) -> Result<Architecture> {
    let s = v
        .as_str()
        .ok_or_else(|| config_err(format!("`{field}` must be a string")))?;
    Architecture::parse(s).ok_or_else(|| {
        let names: Vec<_> = Architecture::ALL.iter().map(|a| a.name()).collect();
        config_err(format!("`{field}`: unknown architecture `{s}`, expected one of {}", names.join(", ")))
    })
}

impl ExperimentConfig {
    /// Every default for `scale`, with the model section present only when
    /// the architecture is known.
    pub fn defaults(scale: Scale, architecture: Option<Architecture>, seed: u64) -> Self {
        let phantom = PhantomParams {
            seed,
            ..match scale {
                Scale::Desk => PhantomParams::default(),
                Scale::Paper => PhantomParams {
                    height: 256,
                    width: 256,
                    ..PhantomParams::default()
                },
            }
        };
        let train_arch = architecture.unwrap_or(Architecture::Unet);
        Self {
            scale,
            seed,
            output: PathBuf::from("runs"),
            data: DataConfig {
                k: 1,
                split: [0.7, 0.15, 0.15],
                seed,
                min_slices: DEFAULT_MIN_SLICES,
                n_volumes: 20,
                volume_dir: None,
                phantom,
            },
            model: architecture.map(|a| scale.model(a)),
            train: scale.train(train_arch, seed),
            diffusion: scale.schedule(),
            eval: EvalConfig {
                seed,
                nearest_policy: NearestPolicy::default(),
            },
            ablate: None,
        }
    }

    fn ablate_defaults(scale: Scale, archs: &[Architecture], seed: u64) -> AblateConfig {
        AblateConfig {
            ks: vec![2, 1],
            architectures: archs.to_vec(),
            model: archs.iter().map(|&a| (a.name().to_string(), scale.model(a))).collect(),
            train: archs
                .iter()
                .map(|&a| (a.name().to_string(), scale.train(a, seed)))
                .collect(),
        }
    }

    /// Parse `text` (or nothing) and fill every missing key.
    pub fn resolve(text: Option<&str>, ov: &Overrides) -> Result<Self> {
        let text = text.unwrap_or("");
        let mut raw: Table = toml::from_str(text).map_err(|e| config_err(e.to_string().trim_end()))?;

        let scale = match (ov.scale, raw.get("scale")) {
            (Some(s), _) => s,
            (None, Some(v)) => Scale::deserialize(v.clone())
                .map_err(|_| config_err(format!("`scale` must be \"desk\" or \"paper\", got {v}")))?,
            (None, None) => Scale::default(),
        };
        raw.insert("scale".into(), to_value(&scale));

        if let Some(seed) = ov.seed {
            for path in SEED_KEYS {
                remove(&mut raw, path);
            }
            if let Some(Value::Table(ab)) = raw.get_mut("ablate") {
                if let Some(Value::Table(tr)) = ab.get_mut("train") {
                    for (_, t) in tr.iter_mut() {
                        let Some(t) = t.as_table_mut() else { continue };
                        t.remove("seed");
                    }
                }
            }
            raw.insert("seed".into(), Value::Integer(seed as i64));
        }
        let seed = match raw.get("seed") {
            None => 0,
            Some(Value::Integer(s)) if *s >= 0 => *s as u64,
            Some(v) => return Err(config_err(format!("`seed` must be a non-negative integer, got {v}"))),
        };

        let architecture = match raw.get("model") {
            None => None,
            Some(Value::Table(m)) => Some(parse_arch(
                m.get("architecture")
                    .ok_or_else(|| config_err("missing field `model.architecture`"))?,
                "model.architecture",
            )?),
            Some(_) => return Err(config_err("`model` must be a table")),
        };

        let mut defaults = match to_value(&Self::defaults(scale, architecture, seed)) {
            Value::Table(t) => t,
            _ => unreachable!(),
        };
        if raw.contains_key("ablate") {
            let archs = match lookup(&raw, &["ablate", "architectures"]) {
                Some(Value::Array(a)) => a
                    .iter()
                    .map(|v| parse_arch(v, "ablate.architectures"))
                    .collect::<Result<Vec<_>>>()?,
                Some(_) => return Err(config_err("`ablate.architectures` must be an array")),
                None => vec![Architecture::Edsr, Architecture::Unet],
            };
            defaults.insert("ablate".into(), to_value(&Self::ablate_defaults(scale, &archs, seed)));
        }
        check_keys(&raw, &defaults, "", text)?;

        merge(&mut defaults, &raw);
        let mut cfg = Self::deserialize(Value::Table(defaults))
            .map_err(|e| config_err(e.to_string().trim_end()))?;
        if let Some(out) = &ov.output {
            cfg.output = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self> {
        match path {
            None => Self::resolve(None, ov),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| config_err(format!("cannot read {}: {e}", p.display())))?;
                Self::resolve(Some(&text), ov).map_err(|e| match e {
                    Error::Config(m) => config_err(format!("{}: {m}", p.display())),
                    e => e,
                })
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>, section: &str| {
            r.map_err(|e| match e {
                Error::Config(m) => config_err(m),
                e => config_err(format!("[{section}] {e}")),
            })
        };
        let d = &self.data;
        let sum: f64 = d.split.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || d.split.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(config_err(format!(
                "`data.split` {:?} must be fractions summing to 1",
                d.split
            )));
        }
        if d.k == 0 {
            return Err(config_err("`data.k` must be at least 1"));
        }
        if d.volume_dir.is_none() && d.n_volumes < 3 {
            return Err(config_err("`data.n_volumes` must be at least 3"));
        }
        wrap(d.phantom.validate(), "data.phantom")?;
        if let Some(m) = &self.model {
            wrap(m.validate(), "model")?;
        }
        wrap(self.train.validate(), "train")?;
        wrap(self.diffusion.build().map(|_| ()), "diffusion")?;
        if let Some(ab) = &self.ablate {
            if ab.ks.is_empty() || ab.ks.contains(&0) || ab.architectures.is_empty() {
                return Err(config_err(
                    "`ablate.ks` and `ablate.architectures` must be non-empty, with gaps >= 1",
                ));
            }
            for (name, m) in &ab.model {
                if m.architecture.name() != name {
                    return Err(config_err(format!(
                        "`ablate.model.{name}` has architecture {}",
                        m.architecture.name()
                    )));
                }
                wrap(m.validate(), &format!("ablate.model.{name}"))?;
            }
            for t in ab.train.values() {
                wrap(t.validate(), "ablate.train")?;
            }
        }
        Ok(())
    }

    /// The model section, required by training.
    pub fn model_config(&self) -> Result<&ModelConfig> {
        self.model
            .as_ref()
            .ok_or_else(|| config_err("missing field `model.architecture`"))
    }

    /// `(model, train)` settings of every ablated architecture, in order.
    pub fn ablation_runs(&self) -> Result<(Vec<usize>, Vec<(ModelConfig, TrainConfig)>)> {
        let ab = self
            .ablate
            .as_ref()
            .ok_or_else(|| config_err("missing table `[ablate]`"))?;
        let runs = ab
            .architectures
            .iter()
            .map(|a| {
                let model = ab.model.get(a.name()).cloned();
                let train = ab.train.get(a.name()).cloned();
                model.zip(train).ok_or_else(|| {
                    config_err(format!("no settings for ablated architecture `{}`", a.name()))
                })
            })
            .collect::<Result<_>>()?;
        Ok((ab.ks.clone(), runs))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config types serialize to TOML")
    }

    /// Write the resolved document into `dir`.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        let path = dir.join(RESOLVED_CONFIG_FILE);
        crate::volume::write_atomic(&path, self.to_toml().as_bytes())?;
        Ok(path)
    }

    /// Load or generate the volumes and split them by patient.
    pub fn dataset(&self) -> Result<(Dataset, SplitManifest)> {
        let d = &self.data;
        let ds = match &d.volume_dir {
            Some(dir) => {
                let loaded = Dataset::load_dir(dir)?;
                Dataset::new(loaded.volumes.iter().map(normalize_minmax).collect())
            }
            None => Dataset::phantoms(&d.phantom, d.n_volumes)?,
        }
        .filter_min_slices(d.min_slices);
        let manifest = ds.split(d.split, d.seed)?;
        Ok((ds, manifest))
    }
}
