use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Builder, Conv, Ctx};
use super::ModelConfig;
use crate::autodiff::VarId;
use crate::error::Result;
use crate::tensor::Element;

pub(crate) const LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DiscriminatorVariant {
    Basic,
    Improved,
}

/// PatchGAN: strided 4x4 convs with LeakyReLU, then a stride-1 4x4 conv to a
/// one-channel score map. It sees only the candidate slice.
#[derive(Clone, Debug)]
pub(crate) struct PatchDiscriminator {
    layers: Vec<(Conv, Option<BatchNorm>)>,
    score: Conv,
}

impl PatchDiscriminator {
    pub fn build<T: Element>(
        b: &mut Builder<T>,
        cfg: &ModelConfig,
        variant: DiscriminatorVariant,
    ) -> Self {
        let depth = match variant {
            DiscriminatorVariant::Basic => 3,
            DiscriminatorVariant::Improved => 4,
        };
        let mut layers = Vec::with_capacity(depth);
        let mut cin = cfg.output_channels;
        for i in 0..depth {
            let cout = cfg.base_channels << i;
            let conv = b.conv(&format!("layers.{i}.conv"), cin, cout, 4, 2, 1);
            let bn = (variant == DiscriminatorVariant::Improved && i > 0)
                .then(|| b.batchnorm(&format!("layers.{i}.bn"), cout));
            layers.push((conv, bn));
            cin = cout;
        }
        let score = b.conv("score", cin, 1, 4, 1, 1);
        Self { layers, score }
    }

    /// Returns the score map and the post-activation output of every hidden layer.
    pub fn forward<T: Element>(
        &self,
        cx: &mut Ctx<'_, T>,
        x: VarId,
    ) -> Result<(VarId, Vec<VarId>)> {
        let mut features = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (conv, bn) in &self.layers {
            h = cx.conv(conv, h)?;
            if let Some(bn) = bn {
                h = cx.batchnorm(bn, h)?;
            }
            h = cx.tape.leaky_relu(h, LEAKY_SLOPE);
            features.push(h);
        }
        Ok((cx.conv(&self.score, h)?, features))
    }
}

/// Score-map side length for an input of side `n`.
pub fn score_map_extent(n: usize, variant: DiscriminatorVariant) -> usize {
    let strided = match variant {
        DiscriminatorVariant::Basic => 3,
        DiscriminatorVariant::Improved => 4,
    };
    let mut s = n;
    for _ in 0..strided {
        s = (s + 2 - 4) / 2 + 1;
    }
    s + 2 - 4 + 1
}
