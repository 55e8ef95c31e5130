use super::layers::{Builder, Conv, ConvT, Ctx};
use super::ModelConfig;
use crate::autodiff::VarId;
use crate::error::Result;
use crate::tensor::Element;

/// Two 3x3 conv + ReLU stages.
#[derive(Clone, Debug)]
struct DoubleConv(Conv, Conv);

impl DoubleConv {
    fn build<T: Element>(b: &mut Builder<T>, name: &str, cin: usize, cout: usize) -> Self {
        Self(
            b.conv3(&format!("{name}.conv0"), cin, cout),
            b.conv3(&format!("{name}.conv1"), cout, cout),
        )
    }

    fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: VarId) -> Result<VarId> {
        let h = cx.conv_relu(&self.0, x)?;
        cx.conv_relu(&self.1, h)
    }
}

/// Encoder levels with max-pooling, a bottleneck, transposed-conv upsampling
/// with concatenated skips, and a final 1x1 conv.
///
/// Parameter names start with `enc`, `bottleneck`, `dec` or `final`, which is
/// what the per-stage subtotals group by.
#[derive(Clone, Debug)]
pub(crate) struct UNet {
    enc: Vec<DoubleConv>,
    bottleneck: DoubleConv,
    up: Vec<ConvT>,
    dec: Vec<DoubleConv>,
    last: Conv,
}

impl UNet {
    pub fn build<T: Element>(b: &mut Builder<T>, cfg: &ModelConfig) -> Self {
        let c = cfg.base_channels;
        let levels = cfg.unet_levels;
        let width = |l: usize| c << l;
        let mut enc = Vec::with_capacity(levels);
        let mut cin = cfg.input_channels;
        for l in 0..levels {
            enc.push(DoubleConv::build(b, &format!("enc{l}"), cin, width(l)));
            cin = width(l);
        }
        let bottleneck = DoubleConv::build(b, "bottleneck", cin, width(levels));
        let mut up = Vec::with_capacity(levels);
        let mut dec = Vec::with_capacity(levels);
        for l in (0..levels).rev() {
            up.push(b.conv_t(&format!("dec{l}.up"), width(l + 1), width(l)));
            dec.push(DoubleConv::build(b, &format!("dec{l}"), 2 * width(l), width(l)));
        }
        let last = b.conv("final", c, cfg.output_channels, 1, 1, 0);
        Self {
            enc,
            bottleneck,
            up,
            dec,
            last,
        }
    }

    pub fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: VarId) -> Result<VarId> {
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut h = x;
        for stage in &self.enc {
            h = stage.forward(cx, h)?;
            skips.push(h);
            h = cx.tape.maxpool2d(h)?;
        }
        h = self.bottleneck.forward(cx, h)?;
        for (up, stage) in self.up.iter().zip(&self.dec) {
            let u = cx.conv_t(up, h)?;
            let skip = skips.pop().expect("one skip per level");
            h = cx.tape.concat_channels(u, skip)?;
            h = stage.forward(cx, h)?;
        }
        cx.conv(&self.last, h)
    }
}
