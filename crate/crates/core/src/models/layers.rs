//! Parameter registry, initialization and the layer building blocks shared by
//! every architecture. Layers only hold indices into the registry; a forward
//! pass looks their values up in the tape variables bound for that pass.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Mode, RunningStats, Tape, VarId};
use crate::error::Result;
use crate::tensor::{Element, Tensor};

pub(crate) const BN_MOMENTUM: f64 = 0.1;
pub(crate) const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub(crate) struct Conv {
    pub w: usize,
    pub b: Option<usize>,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct ConvT {
    pub w: usize,
    pub b: usize,
    pub stride: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct BatchNorm {
    pub gamma: usize,
    pub beta: usize,
    pub stats: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: usize,
    pub b: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct Attention {
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub gamma: usize,
}

/// Collects named parameters and batch-norm statistics while a network is
/// being constructed.
pub(crate) struct Builder<T: Element> {
    pub names: Vec<String>,
    pub params: Vec<Tensor<T>>,
    pub stat_names: Vec<String>,
    pub stats: Vec<RunningStats<T>>,
    rng: ChaCha8Rng,
}

impl<T: Element> Builder<T> {
    pub fn new(seed: u64) -> Self {
        Self {
            names: Vec::new(),
            params: Vec::new(),
            stat_names: Vec::new(),
            stats: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn push(&mut self, name: String, value: Tensor<T>) -> usize {
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.params.push(value);
        self.params.len() - 1
    }

    fn uniform(&mut self, shape: Vec<usize>, fan_in: usize) -> Tensor<T> {
        let bound = (1.0 / fan_in as f64).sqrt();
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
    }

    pub fn conv(
        &mut self,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        padding: usize,
    ) -> Conv {
        let w = self.uniform(vec![cout, cin, k, k], cin * k * k);
        let w = self.push(format!("{name}.weight"), w);
        let b = self.push(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        Conv {
            w,
            b: Some(b),
            stride,
            padding,
        }
    }

    /// 3x3, stride 1, padding 1.
    pub fn conv3(&mut self, name: &str, cin: usize, cout: usize) -> Conv {
        self.conv(name, cin, cout, 3, 1, 1)
    }

    /// 2x2, stride 2 upsampling.
    pub fn conv_t(&mut self, name: &str, cin: usize, cout: usize) -> ConvT {
        let w = self.uniform(vec![cin, cout, 2, 2], cin);
        let w = self.push(format!("{name}.weight"), w);
        let b = self.push(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        ConvT { w, b, stride: 2 }
    }

    pub fn batchnorm(&mut self, name: &str, channels: usize) -> BatchNorm {
        let gamma = self.push(format!("{name}.weight"), Tensor::full(vec![channels], T::one()));
        let beta = self.push(format!("{name}.bias"), Tensor::zeros(vec![channels]));
        self.stat_names.push(name.to_string());
        self.stats.push(RunningStats::new(channels));
        BatchNorm {
            gamma,
            beta,
            stats: self.stats.len() - 1,
        }
    }

    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Linear {
        let w = self.uniform(vec![fan_out, fan_in], fan_in);
        let w = self.push(format!("{name}.weight"), w);
        let b = self.push(format!("{name}.bias"), Tensor::zeros(vec![fan_out]));
        Linear { w, b }
    }

    /// Query/key project to `channels / reduction` (at least 1); the output
    /// gate starts at zero so the block is initially the identity.
    pub fn attention(&mut self, name: &str, channels: usize, reduction: usize) -> Attention {
        let cq = (channels / reduction.max(1)).max(1);
        let q = self.conv(&format!("{name}.query"), channels, cq, 1, 1, 0);
        let k = self.conv(&format!("{name}.key"), channels, cq, 1, 1, 0);
        let v = self.conv(&format!("{name}.value"), channels, channels, 1, 1, 0);
        let gamma = self.push(format!("{name}.gamma"), Tensor::zeros(vec![1]));
        Attention {
            wq: q.w,
            bq: q.b.expect("bias"),
            wk: k.w,
            bk: k.b.expect("bias"),
            wv: v.w,
            bv: v.b.expect("bias"),
            gamma,
        }
    }
}

/// Everything a layer needs during one forward pass.
pub(crate) struct Ctx<'a, T: Element> {
    pub tape: &'a mut Tape<T>,
    pub vars: &'a [VarId],
    pub stats: &'a mut [RunningStats<T>],
    pub mode: Mode,
}

impl<T: Element> Ctx<'_, T> {
    pub fn conv(&mut self, l: &Conv, x: VarId) -> Result<VarId> {
        let b = l.b.map(|b| self.vars[b]);
        self.tape.conv2d(x, self.vars[l.w], b, l.stride, l.padding)
    }

    pub fn conv_relu(&mut self, l: &Conv, x: VarId) -> Result<VarId> {
        let y = self.conv(l, x)?;
        Ok(self.tape.relu(y))
    }

    pub fn conv_t(&mut self, l: &ConvT, x: VarId) -> Result<VarId> {
        self.tape
            .conv_transpose2d(x, self.vars[l.w], Some(self.vars[l.b]), l.stride)
    }

    pub fn batchnorm(&mut self, l: &BatchNorm, x: VarId) -> Result<VarId> {
        self.tape.batchnorm2d(
            x,
            self.vars[l.gamma],
            self.vars[l.beta],
            &mut self.stats[l.stats],
            self.mode,
            BN_MOMENTUM,
            BN_EPS,
        )
    }

    pub fn linear(&mut self, l: &Linear, x: VarId) -> Result<VarId> {
        self.tape.linear(x, self.vars[l.w], self.vars[l.b])
    }

    pub fn attention(&mut self, l: &Attention, x: VarId) -> Result<VarId> {
        let v = self.vars;
        Ok(self
            .tape
            .self_attention(
                x, v[l.wq], v[l.bq], v[l.wk], v[l.bk], v[l.wv], v[l.bv], v[l.gamma],
            )?
            .output)
    }
}
