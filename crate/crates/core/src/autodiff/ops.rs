use super::kernels::{self, ConvGeom};
use super::{Mode, Op, RunningStats, Tape, VarId};
use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, MatRef, Tensor};

/// Output of [`Tape::self_attention`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: VarId,
    /// `[B, N, N]` softmax weights, row `i` = distribution of query `i` over keys.
    pub weights: VarId,
}

fn same_shape<T: Element>(tape: &Tape<T>, a: VarId, b: VarId, what: &str) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            tape.shape(a),
            tape.shape(b)
        )));
    }
    Ok(())
}

fn dims3(shape: &[usize]) -> Result<[usize; 3]> {
    match *shape {
        [b, m, n] => Ok([b, m, n]),
        _ => Err(Error::shape(format!("expected 3-D tensor, got {shape:?}"))),
    }
}

impl<T: Element> Tape<T> {
    fn rg(&self, ids: &[VarId]) -> bool {
        ids.iter().any(|&id| self.requires_grad(id))
    }

    fn unary(&mut self, x: VarId, f: impl Fn(T) -> T, op: Op<T>) -> VarId {
        let value = self.value(x).map(f);
        let rg = self.requires_grad(x);
        self.push(value, rg, op)
    }

    /// Cross-correlation. `x: [B,Cin,H,W]`, `w: [Cout,Cin,kh,kw]`, `b: [Cout]`.
    pub fn conv2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
        padding: usize,
    ) -> Result<VarId> {
        let [batch, cin, h, wd] = self.value(x).dims4()?;
        let [cout, wcin, kh, kw] = self.value(w).dims4()?;
        if cin != wcin {
            return Err(Error::shape(format!(
                "conv2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(format!(
                    "conv2d: bias shape {:?}, expected [{cout}]",
                    self.shape(b)
                )));
            }
        }
        let g = ConvGeom::new(cin, h, wd, kh, kw, stride, padding)?;
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            batch,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            cout,
            &g,
        );
        let value = Tensor::new(vec![batch, cout, g.out_h, g.out_w], out)?;
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.rg(&ids);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            },
        ))
    }

    /// Transposed convolution without padding. `w: [Cin,Cout,kh,kw]`.
    pub fn conv_transpose2d(
        &mut self,
        x: VarId,
        w: VarId,
        b: Option<VarId>,
        stride: usize,
    ) -> Result<VarId> {
        if stride == 0 {
            return Err(Error::arg("stride must be positive"));
        }
        let [batch, cin, h, wd] = self.value(x).dims4()?;
        let [wcin, cout, kh, kw] = self.value(w).dims4()?;
        if cin != wcin {
            return Err(Error::shape(format!(
                "conv_transpose2d: input has {cin} channels, weight expects {wcin}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(format!(
                    "conv_transpose2d: bias shape {:?}, expected [{cout}]",
                    self.shape(b)
                )));
            }
        }
        let (oh, ow) = ((h - 1) * stride + kh, (wd - 1) * stride + kw);
        let g = ConvGeom::new(cout, oh, ow, kh, kw, stride, 0)?;
        debug_assert_eq!((g.out_h, g.out_w), (h, wd));
        let out = kernels::conv_transpose2d_forward(
            self.value(x).data(),
            batch,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            cin,
            &g,
        );
        let value = Tensor::new(vec![batch, cout, oh, ow], out)?;
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.rg(&ids);
        Ok(self.push(value, rg, Op::ConvTranspose2d { x, w, b, stride }))
    }

    /// 2x2 max pooling with stride 2.
    pub fn maxpool2d(&mut self, x: VarId) -> Result<VarId> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::arg(format!(
                "maxpool2d needs even extents, got {h}x{w}"
            )));
        }
        let (out, argmax) = kernels::maxpool2_forward(self.value(x).data(), b * c, h, w);
        let value = Tensor::new(vec![b, c, h / 2, w / 2], out)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::MaxPool2 { x, argmax }))
    }

    pub fn relu(&mut self, x: VarId) -> VarId {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn leaky_relu(&mut self, x: VarId, slope: f64) -> VarId {
        let s = T::from_f64_lossy(slope);
        self.unary(
            x,
            move |v| if v > T::zero() { v } else { v * s },
            Op::LeakyRelu(x, s),
        )
    }

    pub fn sigmoid(&mut self, x: VarId) -> VarId {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn scale(&mut self, x: VarId, factor: f64) -> VarId {
        let f = T::from_f64_lossy(factor);
        self.unary(x, move |v| v * f, Op::Scale(x, f))
    }

    pub fn reshape(&mut self, x: VarId, shape: impl Into<Vec<usize>>) -> Result<VarId> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Reshape(x)))
    }

    /// Batch normalization over `(B, H, W)` per channel.
    ///
    /// In train mode the batch statistics normalize the input and are folded into
    /// `stats` with the given momentum (unbiased variance). Eval mode uses `stats`.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: VarId,
        gamma: VarId,
        beta: VarId,
        stats: &mut RunningStats<T>,
        mode: Mode,
        momentum: f64,
        eps: f64,
    ) -> Result<VarId> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if b == 0 {
            return Err(Error::arg("batchnorm2d on an empty batch"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || stats.mean.len() != c {
            return Err(Error::shape(format!(
                "batchnorm2d: {c} channels but gamma {:?}, beta {:?}, stats {}",
                self.shape(gamma),
                self.shape(beta),
                stats.mean.len()
            )));
        }
        let plane = h * w;
        let count = b * plane;
        let eps = T::from_f64_lossy(eps);
        let xs = self.value(x).data();
        let (mean, var) = match mode {
            Mode::Train => {
                let n = T::from_usize(count).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let vals = (0..b).flat_map(|bi| {
                        xs[(bi * c + ch) * plane..(bi * c + ch + 1) * plane].iter()
                    });
                    let m = vals.clone().copied().sum::<T>() / n;
                    let v = vals.map(|&v| (v - m) * (v - m)).sum::<T>() / n;
                    mean[ch] = m;
                    var[ch] = v;
                }
                let mom = T::from_f64_lossy(momentum);
                let unbias = if count > 1 {
                    n / T::from_usize(count - 1).unwrap()
                } else {
                    T::one()
                };
                for ch in 0..c {
                    stats.mean[ch] = (T::one() - mom) * stats.mean[ch] + mom * mean[ch];
                    stats.var[ch] = (T::one() - mom) * stats.var[ch] + mom * var[ch] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gm = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![T::zero(); xs.len()];
        let mut out = vec![T::zero(); xs.len()];
        for bi in 0..b {
            for ch in 0..c {
                let off = (bi * c + ch) * plane;
                for i in off..off + plane {
                    let xh = (xs[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = gm[ch] * xh + bt[ch];
                }
            }
        }
        let value = Tensor::new(vec![b, c, h, w], out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == Mode::Train,
            },
        ))
    }

    /// Stack channels of `a` then `b`.
    pub fn concat_channels(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        let [ba, ca, ha, wa] = self.value(a).dims4()?;
        let [bb, cb, hb, wb] = self.value(b).dims4()?;
        if (ba, ha, wa) != (bb, hb, wb) {
            return Err(Error::shape(format!(
                "concat_channels: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let plane = ha * wa;
        let mut data = Vec::with_capacity(ba * (ca + cb) * plane);
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..ba {
            data.extend_from_slice(&da[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&db[i * cb * plane..(i + 1) * cb * plane]);
        }
        let value = Tensor::new(vec![ba, ca + cb, ha, wa], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::ConcatChannels(a, b)))
    }

    /// Channels `start..start + len` of a 4-D tensor.
    pub fn slice_channels(&mut self, x: VarId, start: usize, len: usize) -> Result<VarId> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if start + len > c {
            return Err(Error::shape(format!(
                "slice_channels {start}..{} of {c}",
                start + len
            )));
        }
        let plane = h * w;
        let xs = self.value(x).data();
        let mut data = Vec::with_capacity(b * len * plane);
        for i in 0..b {
            let off = (i * c + start) * plane;
            data.extend_from_slice(&xs[off..off + len * plane]);
        }
        let value = Tensor::new(vec![b, len, h, w], data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::SliceChannels { x, start }))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> Result<VarId> {
        same_shape(self, a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Add(a, b)))
    }

    /// `s * x` with a learnable one-element `s`.
    pub fn mul_scalar(&mut self, x: VarId, s: VarId) -> Result<VarId> {
        if self.value(s).len() != 1 {
            return Err(Error::shape(format!(
                "mul_scalar: scale must have one element, got {:?}",
                self.shape(s)
            )));
        }
        let sv = self.item(s);
        let value = self.value(x).map(|v| sv * v);
        let rg = self.rg(&[x, s]);
        Ok(self.push(value, rg, Op::MulScalar { x, s }))
    }

    /// Add a per-sample, per-channel bias `[B, C]` to a `[B, C, H, W]` map.
    pub fn add_channel_bias(&mut self, x: VarId, bias: VarId) -> Result<VarId> {
        let [b, c, h, w] = self.value(x).dims4()?;
        if self.shape(bias) != [b, c] {
            return Err(Error::shape(format!(
                "add_channel_bias: bias {:?} for input {:?}",
                self.shape(bias),
                self.shape(x)
            )));
        }
        let plane = h * w;
        let bs = self.value(bias).data();
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bs[i / plane])
            .collect();
        let value = Tensor::new(vec![b, c, h, w], data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, rg, Op::AddChannelBias { x, bias }))
    }

    /// `x: [B, in]`, `w: [out, in]`, `b: [out]` -> `[B, out]`.
    pub fn linear(&mut self, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
        let (bsz, fin) = match *self.shape(x) {
            [bsz, fin] => (bsz, fin),
            ref s => return Err(Error::shape(format!("linear: input must be 2-D, got {s:?}"))),
        };
        let (fout, win) = match *self.shape(w) {
            [o, i] => (o, i),
            ref s => return Err(Error::shape(format!("linear: weight must be 2-D, got {s:?}"))),
        };
        if fin != win || self.shape(b) != [fout] {
            return Err(Error::shape(format!(
                "linear: input {:?}, weight {:?}, bias {:?}",
                self.shape(x),
                self.shape(w),
                self.shape(b)
            )));
        }
        let mut out: Vec<T> = (0..bsz)
            .flat_map(|_| self.value(b).data().iter().copied())
            .collect();
        gemm(
            MatRef::new(self.value(x).data(), bsz, fin),
            MatRef::new(self.value(w).data(), fout, fin).t(),
            T::one(),
            &mut out,
        );
        let value = Tensor::new(vec![bsz, fout], out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(value, rg, Op::Linear { x, w, b }))
    }

    /// Batched matmul `op(a) * op(b)` on 3-D tensors, `op` = optional transpose.
    pub fn bmm(&mut self, a: VarId, b: VarId, ta: bool, tb: bool) -> Result<VarId> {
        let [ba, ar, ac] = dims3(self.shape(a))?;
        let [bb, br, bc] = dims3(self.shape(b))?;
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if ba != bb || k != k2 {
            return Err(Error::shape(format!(
                "bmm: {:?}{} x {:?}{}",
                self.shape(a),
                if ta { "^T" } else { "" },
                self.shape(b),
                if tb { "^T" } else { "" }
            )));
        }
        let mut out = vec![T::zero(); ba * m * n];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for i in 0..ba {
            let mut ma = MatRef::new(&da[i * ar * ac..(i + 1) * ar * ac], ar, ac);
            let mut mb = MatRef::new(&db[i * br * bc..(i + 1) * br * bc], br, bc);
            if ta {
                ma = ma.t();
            }
            if tb {
                mb = mb.t();
            }
            gemm(ma, mb, T::zero(), &mut out[i * m * n..(i + 1) * m * n]);
        }
        let value = Tensor::new(vec![ba, m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Bmm { a, b, ta, tb }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: VarId) -> Result<VarId> {
        let last = *self
            .shape(x)
            .last()
            .ok_or_else(|| Error::shape("softmax of a 0-D tensor"))?;
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(last) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, rg, Op::Softmax(x)))
    }

    /// Self-attention over the `H*W` positions of a `[B, C, H, W]` map.
    ///
    /// Query/key/value are 1x1 convolutions (`wq`,`wk`: `[C/r, C, 1, 1]`,
    /// `wv`: `[C, C, 1, 1]`); the attended values are scaled by the one-element
    /// gate `gamma` and added back onto the input.
    #[allow(clippy::too_many_arguments)]
    pub fn self_attention(
        &mut self,
        x: VarId,
        wq: VarId,
        bq: VarId,
        wk: VarId,
        bk: VarId,
        wv: VarId,
        bv: VarId,
        gamma: VarId,
    ) -> Result<AttentionOutput> {
        let [b, c, h, w] = self.value(x).dims4()?;
        let n = h * w;
        let q = self.conv2d(x, wq, Some(bq), 1, 0)?;
        let k = self.conv2d(x, wk, Some(bk), 1, 0)?;
        let v = self.conv2d(x, wv, Some(bv), 1, 0)?;
        let cq = self.shape(q)[1];
        if self.shape(k)[1] != cq || self.shape(v)[1] != c {
            return Err(Error::shape(format!(
                "self_attention: query {:?}, key {:?}, value {:?} for input {:?}",
                self.shape(q),
                self.shape(k),
                self.shape(v),
                self.shape(x)
            )));
        }
        let q = self.reshape(q, vec![b, cq, n])?;
        let k = self.reshape(k, vec![b, cq, n])?;
        let v = self.reshape(v, vec![b, c, n])?;
        // energy[i, j] = q_i . k_j
        let energy = self.bmm(q, k, true, false)?;
        let weights = self.softmax(energy)?;
        // out[c, i] = sum_j v[c, j] * weights[i, j]
        let attended = self.bmm(v, weights, false, true)?;
        let attended = self.reshape(attended, vec![b, c, h, w])?;
        let gated = self.mul_scalar(attended, gamma)?;
        let output = self.add(gated, x)?;
        Ok(AttentionOutput { output, weights })
    }

    pub fn sum(&mut self, x: VarId) -> VarId {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: VarId) -> VarId {
        let v = self.value(x);
        let s = v.data().iter().copied().sum::<T>() / T::from_usize(v.len()).unwrap();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    /// Mean absolute error.
    pub fn l1_loss(&mut self, pred: VarId, target: VarId) -> Result<VarId> {
        same_shape(self, pred, target, "l1_loss")?;
        let n = T::from_usize(self.value(pred).len()).unwrap();
        let s = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&p, &t)| (p - t).abs())
            .sum::<T>()
            / n;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Tensor::scalar(s), rg, Op::L1 { pred, target }))
    }

    /// Mean squared error.
    pub fn mse_loss(&mut self, pred: VarId, target: VarId) -> Result<VarId> {
        same_shape(self, pred, target, "mse_loss")?;
        let n = T::from_usize(self.value(pred).len()).unwrap();
        let s = self
            .value(pred)
            .data()
            .iter()
            .zip(self.value(target).data())
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum::<T>()
            / n;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(Tensor::scalar(s), rg, Op::Mse { pred, target }))
    }

    /// Mean binary cross-entropy on logits, stable form
    /// `max(x, 0) - x*z + ln(1 + exp(-|x|))`.
    pub fn bce_with_logits(&mut self, logits: VarId, labels: VarId) -> Result<VarId> {
        same_shape(self, logits, labels, "bce_with_logits")?;
        let n = T::from_usize(self.value(logits).len()).unwrap();
        let s = self
            .value(logits)
            .data()
            .iter()
            .zip(self.value(labels).data())
            .map(|(&x, &z)| x.max(T::zero()) - x * z + (-x.abs()).exp().ln_1p())
            .sum::<T>()
            / n;
        let rg = self.rg(&[logits, labels]);
        Ok(self.push(Tensor::scalar(s), rg, Op::BceWithLogits { logits, labels }))
    }

    /// Gradient contributions of node `i` to its inputs, given its output gradient.
    pub(super) fn local_grads(&self, i: usize, g: &[T]) -> Result<Vec<(VarId, Vec<T>)>> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |id: VarId| self.value(id);
        let need = |id: VarId| self.requires_grad(id);
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::Conv2d {
                x,
                w,
                b,
                stride,
                padding,
            } => {
                let [batch, cin, h, wd] = val(x).dims4()?;
                let [cout, _, kh, kw] = val(w).dims4()?;
                let geom = ConvGeom::new(cin, h, wd, kh, kw, stride, padding)?;
                let grads = kernels::conv2d_backward(
                    val(x).data(),
                    batch,
                    val(w).data(),
                    cout,
                    &geom,
                    g,
                    need(x),
                    need(w),
                    b.is_some_and(need),
                );
                res.extend(grads.input.map(|d| (x, d)));
                res.extend(grads.weight.map(|d| (w, d)));
                if let (Some(b), Some(d)) = (b, grads.bias) {
                    res.push((b, d));
                }
            }
            &Op::ConvTranspose2d { x, w, b, stride } => {
                let [batch, cin, _, _] = val(x).dims4()?;
                let [_, cout, kh, kw] = val(w).dims4()?;
                let [_, _, oh, ow] = out.dims4()?;
                let geom = ConvGeom::new(cout, oh, ow, kh, kw, stride, 0)?;
                let grads = kernels::conv_transpose2d_backward(
                    val(x).data(),
                    batch,
                    val(w).data(),
                    cin,
                    &geom,
                    g,
                    need(x),
                    need(w),
                    b.is_some_and(need),
                );
                res.extend(grads.input.map(|d| (x, d)));
                res.extend(grads.weight.map(|d| (w, d)));
                if let (Some(b), Some(d)) = (b, grads.bias) {
                    res.push((b, d));
                }
            }
            Op::MaxPool2 { x, argmax } => {
                let mut d = vec![T::zero(); val(*x).len()];
                for (&src, &gv) in argmax.iter().zip(g) {
                    d[src] = d[src] + gv;
                }
                res.push((*x, d));
            }
            &Op::Relu(x) => {
                let d = val(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                res.push((x, d));
            }
            &Op::LeakyRelu(x, slope) => {
                let d = val(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &gv)| if v > T::zero() { gv } else { gv * slope })
                    .collect();
                res.push((x, d));
            }
            &Op::Sigmoid(x) => {
                let d = out
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &gv)| gv * y * (T::one() - y))
                    .collect();
                res.push((x, d));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let [b, c, h, w] = val(*x).dims4()?;
                let plane = h * w;
                let gm = val(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let off = (bi * c + ch) * plane;
                        for j in off..off + plane {
                            dgamma[ch] = dgamma[ch] + g[j] * xhat[j];
                            dbeta[ch] = dbeta[ch] + g[j];
                        }
                    }
                }
                if need(*x) {
                    let mut dx = vec![T::zero(); g.len()];
                    let n = T::from_usize(b * plane).unwrap();
                    for ch in 0..c {
                        let scale = gm[ch] * inv_std[ch];
                        for bi in 0..b {
                            let off = (bi * c + ch) * plane;
                            for j in off..off + plane {
                                dx[j] = if *train {
                                    // dxhat = g * gamma; sums of dxhat are gamma * dbeta, gamma * dgamma
                                    scale * (g[j] - dbeta[ch] / n - xhat[j] * dgamma[ch] / n)
                                } else {
                                    scale * g[j]
                                };
                            }
                        }
                    }
                    res.push((*x, dx));
                }
                res.push((*gamma, dgamma));
                res.push((*beta, dbeta));
            }
            &Op::ConcatChannels(a, b) => {
                let [bsz, ca, h, w] = val(a).dims4()?;
                let cb = val(b).dims4()?[1];
                let plane = h * w;
                let mut da = Vec::with_capacity(bsz * ca * plane);
                let mut db = Vec::with_capacity(bsz * cb * plane);
                for item in g.chunks((ca + cb) * plane) {
                    da.extend_from_slice(&item[..ca * plane]);
                    db.extend_from_slice(&item[ca * plane..]);
                }
                res.push((a, da));
                res.push((b, db));
            }
            &Op::SliceChannels { x, start } => {
                let [bsz, c, h, w] = val(x).dims4()?;
                let len = out.dims4()?[1];
                let plane = h * w;
                let mut d = vec![T::zero(); val(x).len()];
                for i in 0..bsz {
                    let off = (i * c + start) * plane;
                    d[off..off + len * plane]
                        .copy_from_slice(&g[i * len * plane..(i + 1) * len * plane]);
                }
                res.push((x, d));
            }
            &Op::Add(a, b) => {
                res.push((a, g.to_vec()));
                res.push((b, g.to_vec()));
            }
            &Op::Scale(x, f) => res.push((x, g.iter().map(|&v| v * f).collect())),
            &Op::MulScalar { x, s } => {
                let sv = val(s).data()[0];
                if need(x) {
                    res.push((x, g.iter().map(|&v| v * sv).collect()));
                }
                let ds = val(x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| xv * gv)
                    .sum::<T>();
                res.push((s, vec![ds]));
            }
            &Op::AddChannelBias { x, bias } => {
                let [_, _, h, w] = val(x).dims4()?;
                let db = g.chunks(h * w).map(|ch| ch.iter().copied().sum()).collect();
                res.push((x, g.to_vec()));
                res.push((bias, db));
            }
            &Op::Linear { x, w, b } => {
                let (bsz, fin) = (val(x).shape()[0], val(x).shape()[1]);
                let fout = val(w).shape()[0];
                if need(x) {
                    let mut dx = vec![T::zero(); bsz * fin];
                    gemm(
                        MatRef::new(g, bsz, fout),
                        MatRef::new(val(w).data(), fout, fin),
                        T::zero(),
                        &mut dx,
                    );
                    res.push((x, dx));
                }
                if need(w) {
                    let mut dw = vec![T::zero(); fout * fin];
                    gemm(
                        MatRef::new(g, bsz, fout).t(),
                        MatRef::new(val(x).data(), bsz, fin),
                        T::zero(),
                        &mut dw,
                    );
                    res.push((w, dw));
                }
                let mut db = vec![T::zero(); fout];
                for row in g.chunks(fout) {
                    for (acc, &v) in db.iter_mut().zip(row) {
                        *acc = *acc + v;
                    }
                }
                res.push((b, db));
            }
            &Op::Bmm { a, b, ta, tb } => {
                let [batch, ar, ac] = dims3(val(a).shape())?;
                let [_, br, bc] = dims3(val(b).shape())?;
                let [_, m, n] = dims3(out.shape())?;
                let (da_all, db_all) = (val(a).data(), val(b).data());
                let mut ga = need(a).then(|| vec![T::zero(); da_all.len()]);
                let mut gb = need(b).then(|| vec![T::zero(); db_all.len()]);
                for i in 0..batch {
                    let gc = MatRef::new(&g[i * m * n..(i + 1) * m * n], m, n);
                    let mut ma = MatRef::new(&da_all[i * ar * ac..(i + 1) * ar * ac], ar, ac);
                    let mut mb = MatRef::new(&db_all[i * br * bc..(i + 1) * br * bc], br, bc);
                    if ta {
                        ma = ma.t();
                    }
                    if tb {
                        mb = mb.t();
                    }
                    if let Some(ga) = ga.as_mut() {
                        let dst = &mut ga[i * ar * ac..(i + 1) * ar * ac];
                        if ta {
                            gemm(mb, gc.t(), T::zero(), dst);
                        } else {
                            gemm(gc, mb.t(), T::zero(), dst);
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        let dst = &mut gb[i * br * bc..(i + 1) * br * bc];
                        if tb {
                            gemm(gc.t(), ma, T::zero(), dst);
                        } else {
                            gemm(ma.t(), gc, T::zero(), dst);
                        }
                    }
                }
                res.extend(ga.map(|d| (a, d)));
                res.extend(gb.map(|d| (b, d)));
            }
            &Op::Softmax(x) => {
                let last = *out.shape().last().unwrap();
                let mut d = vec![T::zero(); g.len()];
                for ((dr, yr), gr) in d
                    .chunks_mut(last)
                    .zip(out.data().chunks(last))
                    .zip(g.chunks(last))
                {
                    let dot = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum::<T>();
                    for ((dv, &y), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *dv = y * (gv - dot);
                    }
                }
                res.push((x, d));
            }
            &Op::Reshape(x) => res.push((x, g.to_vec())),
            &Op::Sum(x) => res.push((x, vec![g[0]; val(x).len()])),
            &Op::Mean(x) => {
                let n = T::from_usize(val(x).len()).unwrap();
                res.push((x, vec![g[0] / n; val(x).len()]));
            }
            &Op::L1 { pred, target } => {
                let n = T::from_usize(val(pred).len()).unwrap();
                let d: Vec<T> = val(pred)
                    .data()
                    .iter()
                    .zip(val(target).data())
                    .map(|(&p, &t)| {
                        let diff = p - t;
                        let s = if diff > T::zero() {
                            T::one()
                        } else if diff < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        s * g[0] / n
                    })
                    .collect();
                if need(target) {
                    res.push((target, d.iter().map(|&v| -v).collect()));
                }
                res.push((pred, d));
            }
            &Op::Mse { pred, target } => {
                let n = T::from_usize(val(pred).len()).unwrap();
                let two = T::from_f64_lossy(2.0);
                let d: Vec<T> = val(pred)
                    .data()
                    .iter()
                    .zip(val(target).data())
                    .map(|(&p, &t)| two * (p - t) * g[0] / n)
                    .collect();
                if need(target) {
                    res.push((target, d.iter().map(|&v| -v).collect()));
                }
                res.push((pred, d));
            }
            &Op::BceWithLogits { logits, labels } => {
                let n = T::from_usize(val(logits).len()).unwrap();
                let xs = val(logits).data();
                let zs = val(labels).data();
                let d = xs
                    .iter()
                    .zip(zs)
                    .map(|(&x, &z)| (sigmoid(x) - z) * g[0] / n)
                    .collect();
                if need(labels) {
                    res.push((labels, xs.iter().map(|&x| -x * g[0] / n).collect()));
                }
                res.push((logits, d));
            }
        }
        Ok(res)
    }
}

fn sigmoid<T: Element>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
