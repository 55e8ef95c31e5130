use super::layers::{Attention, Builder, Conv, ConvT, Ctx, Linear};
use super::ModelConfig;
use crate::autodiff::VarId;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Half sines then half cosines of `t * 10000^(-i / (dim/2))`.
pub fn sinusoidal_time_embedding(t: usize, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::arg(format!(
            "time embedding dimension must be even and positive, got {dim}"
        )));
    }
    let half = dim / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp())
        .collect();
    let t = t as f64;
    Ok(freqs
        .iter()
        .map(|f| (t * f).sin())
        .chain(freqs.iter().map(|f| (t * f).cos()))
        .collect())
}

/// Conv-ReLU, plus a per-channel bias projected from the time embedding,
/// conv-ReLU, with a 1x1 projection on the skip when the width changes.
#[derive(Clone, Debug)]
struct ResBlock {
    conv0: Conv,
    time: Linear,
    conv1: Conv,
    skip: Option<Conv>,
}

impl ResBlock {
    fn build<T: Element>(
        b: &mut Builder<T>,
        name: &str,
        cin: usize,
        cout: usize,
        tdim: usize,
    ) -> Self {
        Self {
            conv0: b.conv3(&format!("{name}.conv0"), cin, cout),
            time: b.linear(&format!("{name}.time"), tdim, cout),
            conv1: b.conv3(&format!("{name}.conv1"), cout, cout),
            skip: (cin != cout).then(|| b.conv(&format!("{name}.skip"), cin, cout, 1, 1, 0)),
        }
    }

    fn forward<T: Element>(&self, cx: &mut Ctx<'_, T>, x: VarId, temb: VarId) -> Result<VarId> {
        let h = cx.conv_relu(&self.conv0, x)?;
        let bias = cx.linear(&self.time, temb)?;
        let h = cx.tape.add_channel_bias(h, bias)?;
        let h = cx.conv_relu(&self.conv1, h)?;
        let s = match &self.skip {
            Some(skip) => cx.conv(skip, x)?,
            None => x,
        };
        cx.tape.add(h, s)
    }
}

/// Noise-prediction U-Net conditioned on the timestep. Input channels are the
/// noisy target followed by the two neighbour slices.
#[derive(Clone, Debug)]
pub(crate) struct DdpmUNet {
    time_dim: usize,
    time_in: Linear,
    time_out: Linear,
    enc: Vec<ResBlock>,
    mid0: ResBlock,
    attention: Attention,
    mid1: ResBlock,
    up: Vec<ConvT>,
    dec: Vec<ResBlock>,
    last: Conv,
}

impl DdpmUNet {
    pub fn build<T: Element>(b: &mut Builder<T>, cfg: &ModelConfig) -> Self {
        let c = cfg.base_channels;
        let td = cfg.time_embed_dim;
        let levels = cfg.unet_levels;
        let width = |l: usize| c << l;
        let time_in = b.linear("time.0", td, 4 * td);
        let time_out = b.linear("time.1", 4 * td, td);
        let mut enc = Vec::with_capacity(levels);
        let mut cin = cfg.input_channels + cfg.output_channels;
        for l in 0..levels {
            enc.push(ResBlock::build(b, &format!("enc{l}"), cin, width(l), td));
            cin = width(l);
        }
        let mid0 = ResBlock::build(b, "mid.0", cin, width(levels), td);
        let attention = b.attention("mid.attention", width(levels), cfg.attention_reduction);
        let mid1 = ResBlock::build(b, "mid.1", width(levels), width(levels), td);
        let mut up = Vec::with_capacity(levels);
        let mut dec = Vec::with_capacity(levels);
        for l in (0..levels).rev() {
            up.push(b.conv_t(&format!("dec{l}.up"), width(l + 1), width(l)));
            dec.push(ResBlock::build(b, &format!("dec{l}"), 2 * width(l), width(l), td));
        }
        let last = b.conv("final", c, cfg.output_channels, 1, 1, 0);
        Self {
            time_dim: td,
            time_in,
            time_out,
            enc,
            mid0,
            attention,
            mid1,
            up,
            dec,
            last,
        }
    }

    pub fn forward<T: Element>(
        &self,
        cx: &mut Ctx<'_, T>,
        x: VarId,
        timesteps: &[usize],
    ) -> Result<VarId> {
        let batch = cx.tape.shape(x)[0];
        if timesteps.len() != batch {
            return Err(Error::shape(format!(
                "{} timesteps for a batch of {batch}",
                timesteps.len()
            )));
        }
        let mut emb = Vec::with_capacity(batch * self.time_dim);
        for &t in timesteps {
            emb.extend(
                sinusoidal_time_embedding(t, self.time_dim)?
                    .into_iter()
                    .map(T::from_f64_lossy),
            );
        }
        let emb = cx.tape.constant(Tensor::new(vec![batch, self.time_dim], emb)?);
        let temb = cx.linear(&self.time_in, emb)?;
        let temb = cx.tape.relu(temb);
        let temb = cx.linear(&self.time_out, temb)?;
        let temb = cx.tape.relu(temb);

        let mut skips = Vec::with_capacity(self.enc.len());
        let mut h = x;
        for block in &self.enc {
            h = block.forward(cx, h, temb)?;
            skips.push(h);
            h = cx.tape.maxpool2d(h)?;
        }
        h = self.mid0.forward(cx, h, temb)?;
        h = cx.attention(&self.attention, h)?;
        h = self.mid1.forward(cx, h, temb)?;
        for (up, block) in self.up.iter().zip(&self.dec) {
            let u = cx.conv_t(up, h)?;
            let skip = skips.pop().expect("one skip per level");
            h = cx.tape.concat_channels(u, skip)?;
            h = block.forward(cx, h, temb)?;
        }
        cx.conv(&self.last, h)
    }
}
