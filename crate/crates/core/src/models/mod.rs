//! Network architectures: EDSR-style residual CNN, U-Net, PatchGAN
//! discriminators, the attention-augmented generator and the timestep
//! conditioned noise-prediction U-Net.

mod checkpoint;
mod ddpm_unet;
mod discriminator;
mod edsr;
mod layers;
mod unet;


pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use ddpm_unet::sinusoidal_time_embedding;
pub use discriminator::{score_map_extent, DiscriminatorVariant};

use std::fmt;

use serde::{Deserialize, Serialize};

use self::ddpm_unet::DdpmUNet;
use self::discriminator::PatchDiscriminator;
use self::edsr::ResNet;
use self::layers::{Builder, Ctx};
use self::unet::UNet;
use crate::autodiff::{Mode, RunningStats, Tape, VarId};
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Experiment-level architecture tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Edsr,
    Unet,
    GanBasic,
    GanImproved,
    DdpmUnet,
}

impl Architecture {
    pub const ALL: [Architecture; 5] = [
        Self::Edsr,
        Self::Unet,
        Self::GanBasic,
        Self::GanImproved,
        Self::DdpmUnet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Edsr => "edsr",
            Self::Unet => "unet",
            Self::GanBasic => "gan_basic",
            Self::GanImproved => "gan_improved",
            Self::DdpmUnet => "ddpm_unet",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == s)
    }

    /// The network that produces the interpolated slice.
    pub fn predictor(self) -> Network {
        match self {
            Self::Edsr | Self::GanBasic => Network::Edsr,
            Self::Unet => Network::Unet,
            Self::GanImproved => Network::GeneratorImproved,
            Self::DdpmUnet => Network::DdpmUnet,
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A concrete network topology; this is what a checkpoint records.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Network {
    Edsr,
    GeneratorImproved,
    Unet,
    Discriminator(DiscriminatorVariant),
    DdpmUnet,
}

impl Network {
    pub fn name(self) -> &'static str {
        match self {
            Self::Edsr => "edsr",
            Self::GeneratorImproved => "generator_improved",
            Self::Unet => "unet",
            Self::Discriminator(DiscriminatorVariant::Basic) => "discriminator_basic",
            Self::Discriminator(DiscriminatorVariant::Improved) => "discriminator_improved",
            Self::DdpmUnet => "ddpm_unet",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            Self::Edsr,
            Self::GeneratorImproved,
            Self::Unet,
            Self::Discriminator(DiscriminatorVariant::Basic),
            Self::Discriminator(DiscriminatorVariant::Improved),
            Self::DdpmUnet,
        ]
        .into_iter()
        .find(|n| n.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub base_channels: usize,
    pub n_res_blocks: usize,
    /// 3x3 convs per residual block.
    pub res_block_convs: usize,
    pub unet_levels: usize,
    pub time_embed_dim: usize,
    /// Query/key width divisor for self-attention.
    pub attention_reduction: usize,
    pub input_channels: usize,
    pub output_channels: usize,
}

impl ModelConfig {
    /// Full-size widths.
    pub fn paper(architecture: Architecture) -> Self {
        Self {
            architecture,
            base_channels: if architecture == Architecture::DdpmUnet { 160 } else { 64 },
            n_res_blocks: if architecture == Architecture::GanImproved { 16 } else { 8 },
            res_block_convs: 1,
            unet_levels: 2,
            time_embed_dim: 256,
            attention_reduction: 8,
            input_channels: 2,
            output_channels: 1,
        }
    }

    /// Same topology with 16 base channels (and a 64-wide time embedding).
    pub fn desk(architecture: Architecture) -> Self {
        Self {
            base_channels: 16,
            time_embed_dim: 64,
            ..Self::paper(architecture)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("base_channels", self.base_channels),
            ("res_block_convs", self.res_block_convs),
            ("unet_levels", self.unet_levels),
            ("time_embed_dim", self.time_embed_dim),
            ("attention_reduction", self.attention_reduction),
            ("input_channels", self.input_channels),
            ("output_channels", self.output_channels),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be positive")));
            }
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::Config("model.time_embed_dim must be even".into()));
        }
        if self.unet_levels > 6 {
            return Err(Error::Config("model.unet_levels must be at most 6".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum Net {
    ResNet(ResNet),
    UNet(UNet),
    Discriminator(PatchDiscriminator),
    Ddpm(DdpmUNet),
}

/// Result of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub output: VarId,
    /// Hidden activations (discriminators only), input side first.
    pub features: Vec<VarId>,
}

/// A network plus its named parameters and batch-norm running statistics.
#[derive(Clone, Debug)]
pub struct Model<T: Element = f32> {
    config: ModelConfig,
    network: Network,
    net: Net,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    stat_names: Vec<String>,
    stats: Vec<RunningStats<T>>,
}

pub fn build_network<T: Element>(network: Network, config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    config.validate()?;
    let mut b = Builder::new(seed);
    let net = match network {
        Network::Edsr => Net::ResNet(ResNet::build(&mut b, config, false)),
        Network::GeneratorImproved => Net::ResNet(ResNet::build(&mut b, config, true)),
        Network::Unet => Net::UNet(UNet::build(&mut b, config)),
        Network::Discriminator(v) => Net::Discriminator(PatchDiscriminator::build(&mut b, config, v)),
        Network::DdpmUnet => Net::Ddpm(DdpmUNet::build(&mut b, config)),
    };
    Ok(Model {
        config: config.clone(),
        network,
        net,
        names: b.names,
        params: b.params,
        stat_names: b.stat_names,
        stats: b.stats,
    })
}

/// The predictor network for `config.architecture`.
pub fn build_model<T: Element>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    build_network(config.architecture.predictor(), config, seed)
}

pub fn build_edsr<T: Element>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    build_network(Network::Edsr, config, seed)
}

pub fn build_unet<T: Element>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    build_network(Network::Unet, config, seed)
}

pub fn build_generator_improved<T: Element>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    build_network(Network::GeneratorImproved, config, seed)
}

pub fn build_discriminator<T: Element>(
    variant: DiscriminatorVariant,
    config: &ModelConfig,
    seed: u64,
) -> Result<Model<T>> {
    build_network(Network::Discriminator(variant), config, seed)
}

pub fn build_ddpm_unet<T: Element>(config: &ModelConfig, seed: u64) -> Result<Model<T>> {
    build_network(Network::DdpmUnet, config, seed)
}

pub fn count_parameters<T: Element>(model: &Model<T>) -> usize {
    model.params.iter().map(Tensor::len).sum()
}

impl<T: Element> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn network(&self) -> Network {
        self.network
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn stat_names(&self) -> &[String] {
        &self.stat_names
    }

    pub fn stats(&self) -> &[RunningStats<T>] {
        &self.stats
    }

    pub fn stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.stats
    }

    /// Total element count of the parameters whose name starts with `prefix`.
    pub fn count_parameters_with_prefix(&self, prefix: &str) -> usize {
        self.names
            .iter()
            .zip(&self.params)
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, p)| p.len())
            .sum()
    }

    /// Record every parameter on `tape`, in registry order.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<VarId> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.clone(), requires_grad))
            .collect()
    }

    /// Gradients of the bound parameters after `tape.backward`; zeros where
    /// the loss does not depend on a parameter.
    pub fn grads(&self, tape: &Tape<T>, vars: &[VarId]) -> Vec<Tensor<T>> {
        self.params
            .iter()
            .zip(vars)
            .map(|(p, &v)| match tape.grad(v) {
                Some(g) => Tensor::new(p.shape().to_vec(), g.to_vec()).expect("grad shape"),
                None => Tensor::zeros(p.shape().to_vec()),
            })
            .collect()
    }

    fn check_input(&self, shape: &[usize], timesteps: Option<&[usize]>) -> Result<()> {
        let [_, c, h, w] = match *shape {
            [b, c, h, w] => [b, c, h, w],
            _ => return Err(Error::shape(format!("model input must be 4-D, got {shape:?}"))),
        };
        let cfg = &self.config;
        let expected_c = match self.network {
            Network::Edsr | Network::GeneratorImproved | Network::Unet => cfg.input_channels,
            Network::Discriminator(_) => cfg.output_channels,
            Network::DdpmUnet => cfg.input_channels + cfg.output_channels,
        };
        if c != expected_c {
            return Err(Error::shape(format!(
                "{} expects {expected_c} input channels, got {c}",
                self.network.name()
            )));
        }
        match self.network {
            Network::Unet | Network::DdpmUnet => {
                let m = 1usize << cfg.unet_levels;
                if h % m != 0 || w % m != 0 || h == 0 || w == 0 {
                    return Err(Error::arg(format!(
                        "{} needs extents divisible by {m}, got {h}x{w}",
                        self.network.name()
                    )));
                }
            }
            Network::Discriminator(v) => {
                let min = match v {
                    DiscriminatorVariant::Basic => 16,
                    DiscriminatorVariant::Improved => 32,
                };
                if h < min || w < min {
                    return Err(Error::arg(format!(
                        "{} input must be at least {min}x{min}, got {h}x{w}",
                        self.network.name()
                    )));
                }
            }
            _ => {}
        }
        if self.network == Network::DdpmUnet && timesteps.is_none() {
            return Err(Error::arg("ddpm_unet forward needs timesteps"));
        }
        Ok(())
    }

    /// Forward pass with explicit batch-norm statistics (updated in train mode).
    pub fn forward_with_stats(
        &self,
        tape: &mut Tape<T>,
        vars: &[VarId],
        x: VarId,
        timesteps: Option<&[usize]>,
        mode: Mode,
        stats: &mut [RunningStats<T>],
    ) -> Result<Forward> {
        if vars.len() != self.params.len() || stats.len() != self.stat_names.len() {
            return Err(Error::arg(format!(
                "bound {} parameters / {} stats, model has {} / {}",
                vars.len(),
                stats.len(),
                self.params.len(),
                self.stat_names.len()
            )));
        }
        self.check_input(tape.shape(x), timesteps)?;
        let mut cx = Ctx {
            tape,
            vars,
            stats,
            mode,
        };
        let (output, features) = match &self.net {
            Net::ResNet(n) => (n.forward(&mut cx, x)?, Vec::new()),
            Net::UNet(n) => (n.forward(&mut cx, x)?, Vec::new()),
            Net::Discriminator(n) => n.forward(&mut cx, x)?,
            Net::Ddpm(n) => (n.forward(&mut cx, x, timesteps.unwrap_or(&[]))?, Vec::new()),
        };
        Ok(Forward { output, features })
    }

    /// Forward pass using (and, in train mode, updating) the model's own statistics.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        vars: &[VarId],
        x: VarId,
        timesteps: Option<&[usize]>,
        mode: Mode,
    ) -> Result<Forward> {
        let mut stats = std::mem::take(&mut self.stats);
        let out = self.forward_with_stats(tape, vars, x, timesteps, mode, &mut stats);
        self.stats = stats;
        out
    }

    /// Eval-mode inference on a batch, no gradients recorded.
    pub fn predict(&self, x: &Tensor<T>, timesteps: Option<&[usize]>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(x.clone());
        let mut stats = self.stats.clone();
        let out = self.forward_with_stats(&mut tape, &vars, x, timesteps, Mode::Eval, &mut stats)?;
        Ok(tape.value(out.output).clone())
    }

    /// Copy parameters and statistics from a model of the same topology.
    pub fn load_state_from(&mut self, other: &Model<T>) -> Result<()> {
        if other.names != self.names
            || other
                .params
                .iter()
                .zip(&self.params)
                .any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::Checkpoint("parameter layout differs".into()));
        }
        self.params.clone_from(&other.params);
        self.stats.clone_from(&other.stats);
        Ok(())
    }

    /// Element-type conversion, for running a trained model in `f64`.
    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            network: self.network,
            net: self.net.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            stat_names: self.stat_names.clone(),
            stats: self
                .stats
                .iter()
                .map(|s| RunningStats {
                    mean: s.mean.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                    var: s.var.iter().map(|v| U::from_f64_lossy(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}
