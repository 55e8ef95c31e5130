use super::layers::{Attention, Builder, Conv, Ctx};
use super::ModelConfig;
use crate::autodiff::VarId;
use crate::error::Result;
use crate::tensor::Element;

/// Residual CNN: entry conv, residual blocks, entry-feature skip, exit conv.
/// The improved generator adds self-attention after the blocks and a 3x3 conv
/// before the exit.
#[derive(Clone, Debug)]
pub(crate) struct ResNet {
    entry: Conv,
    blocks: Vec<Vec<Conv>>,
    attention: Option<Attention>,
    pre_exit: Option<Conv>,
    exit: Conv,
}

impl ResNet {
    pub fn build<T: Element>(b: &mut Builder<T>, cfg: &ModelConfig, improved: bool) -> Self {
        let c = cfg.base_channels;
        let entry = b.conv3("entry", cfg.input_channels, c);
        let blocks = (0..cfg.n_res_blocks)
            .map(|i| {
                (0..cfg.res_block_convs)
                    .map(|j| b.conv3(&format!("blocks.{i}.conv{j}"), c, c))
                    .collect()
            })
            .collect();
        let (attention, pre_exit) = if improved {
            (
                Some(b.attention("attention", c, cfg.attention_reduction)),
                Some(b.conv3("pre_exit", c, c)),
            )
        } else {
            (None, None)
        };
        let exit = b.conv3("exit", c, cfg.output_channels);
        Self {
            entry,
            blocks,
            attention,
            pre_exit,
            exit,
        }
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: VarId) -> Result<VarId> {
        let e = cx.conv(&self.entry, x)?;
        let mut h = e;
        for block in &self.blocks {
            let mut r = h;
            for conv in block {
                r = cx.conv_relu(conv, r)?;
            }
            h = cx.tape.add(h, r)?;
        }
        h = cx.tape.add(h, e)?;
        if let Some(att) = &self.attention {
            h = cx.attention(att, h)?;
        }
        if let Some(pre) = &self.pre_exit {
            h = cx.conv_relu(pre, h)?;
        }
        cx.conv(&self.exit, h)
    }
}
