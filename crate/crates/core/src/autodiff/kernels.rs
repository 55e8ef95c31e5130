//! Raw forward/backward kernels for the spatial ops. Layouts are NCHW, row-major.
//!
//! Convolutions go through im2col + GEMM one batch item at a time. Batch items
//! are processed in order and weight gradients accumulate in that order, so
//! results do not depend on anything but the inputs.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Element, MatRef};

/// Geometry of one 2-D cross-correlation (or its transpose).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Geometry for a conv reading a `channels x height x width` image.
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::arg("stride must be positive"));
        }
        let ph = height + 2 * padding;
        let pw = width + 2 * padding;
        if kh == 0 || kw == 0 || ph < kh || pw < kw {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} does not fit input {height}x{width} with padding {padding}"
            )));
        }
        Ok(Self {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            padding,
            out_h: (ph - kh) / stride + 1,
            out_w: (pw - kw) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Input coordinate hit by kernel tap `k` at output position `o`, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub(crate) fn im2col<T: Element>(image: &[T], g: &ConvGeom, col: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    match g.source(oy, ki, g.height) {
                        None => line.fill(T::zero()),
                        Some(y) => {
                            let src = &plane[y * g.width..(y + 1) * g.width];
                            for (ox, v) in line.iter_mut().enumerate() {
                                *v = match g.source(ox, kj, g.width) {
                                    Some(x) => src[x],
                                    None => T::zero(),
                                };
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a column matrix back onto an image (adjoint of [`im2col`]).
pub(crate) fn col2im<T: Element>(col: &[T], g: &ConvGeom, image: &mut [T]) {
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &col[row * ncols..(row + 1) * ncols];
                for oy in 0..g.out_h {
                    let Some(y) = g.source(oy, ki, g.height) else {
                        continue;
                    };
                    let line = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let dst = &mut plane[y * g.width..(y + 1) * g.width];
                    for (ox, &v) in line.iter().enumerate() {
                        if let Some(x) = g.source(ox, kj, g.width) {
                            dst[x] = dst[x] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Forward conv2d. `input` is `[batch, g.channels, h, w]`, `weight` is `[cout, g.col_rows()]`.
pub(crate) fn conv2d_forward<T: Element>(
    input: &[T],
    batch: usize,
    weight: &[T],
    bias: Option<&[T]>,
    cout: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut col = vec![T::zero(); rows * ncols];
    let mut out = vec![T::zero(); batch * cout * ncols];
    for b in 0..batch {
        im2col(&input[b * g.image_len()..(b + 1) * g.image_len()], g, &mut col);
        let dst = &mut out[b * cout * ncols..(b + 1) * cout * ncols];
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_mut(ncols).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        gemm(
            MatRef::new(weight, cout, rows),
            MatRef::new(&col, rows, ncols),
            if bias.is_some() { T::one() } else { T::zero() },
            dst,
        );
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward<T: Element>(
    input: &[T],
    batch: usize,
    weight: &[T],
    cout: usize,
    g: &ConvGeom,
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut col = vec![T::zero(); rows * ncols];
    let mut gx = need_input.then(|| vec![T::zero(); batch * g.image_len()]);
    let mut gw = need_weight.then(|| vec![T::zero(); cout * rows]);
    let mut gb = need_bias.then(|| vec![T::zero(); cout]);
    for b in 0..batch {
        let go = &grad_out[b * cout * ncols..(b + 1) * cout * ncols];
        if let Some(gb) = gb.as_mut() {
            for (co, chunk) in go.chunks(ncols).enumerate() {
                gb[co] = gb[co] + chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(gw) = gw.as_mut() {
            im2col(&input[b * g.image_len()..(b + 1) * g.image_len()], g, &mut col);
            gemm(
                MatRef::new(go, cout, ncols),
                MatRef::new(&col, rows, ncols).t(),
                T::one(),
                gw,
            );
        }
        if let Some(gx) = gx.as_mut() {
            gemm(
                MatRef::new(weight, cout, rows).t(),
                MatRef::new(go, cout, ncols),
                T::zero(),
                &mut col,
            );
            col2im(&col, g, &mut gx[b * g.image_len()..(b + 1) * g.image_len()]);
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

/// Forward transposed conv. `g` describes the *adjoint* conv, i.e. it reads the
/// `[cout, out_h_big, out_w_big]` output image and produces `input`'s extents as
/// `g.out_h x g.out_w`. `weight` is `[cin, cout * kh * kw]`.
pub(crate) fn conv_transpose2d_forward<T: Element>(
    input: &[T],
    batch: usize,
    weight: &[T],
    bias: Option<&[T]>,
    cin: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut col = vec![T::zero(); rows * ncols];
    let mut out = vec![T::zero(); batch * g.image_len()];
    let plane = g.height * g.width;
    for b in 0..batch {
        let x = &input[b * cin * ncols..(b + 1) * cin * ncols];
        gemm(
            MatRef::new(weight, cin, rows).t(),
            MatRef::new(x, cin, ncols),
            T::zero(),
            &mut col,
        );
        let dst = &mut out[b * g.image_len()..(b + 1) * g.image_len()];
        col2im(&col, g, dst);
        if let Some(bias) = bias {
            for (co, chunk) in dst.chunks_mut(plane).enumerate() {
                for v in chunk {
                    *v = *v + bias[co];
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_transpose2d_backward<T: Element>(
    input: &[T],
    batch: usize,
    weight: &[T],
    cin: usize,
    g: &ConvGeom,
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let plane = g.height * g.width;
    let mut col = vec![T::zero(); rows * ncols];
    let mut gx = need_input.then(|| vec![T::zero(); batch * cin * ncols]);
    let mut gw = need_weight.then(|| vec![T::zero(); cin * rows]);
    let mut gb = need_bias.then(|| vec![T::zero(); g.channels]);
    for b in 0..batch {
        let go = &grad_out[b * g.image_len()..(b + 1) * g.image_len()];
        if let Some(gb) = gb.as_mut() {
            for (co, chunk) in go.chunks(plane).enumerate() {
                gb[co] = gb[co] + chunk.iter().copied().sum::<T>();
            }
        }
        if !(need_input || need_weight) {
            continue;
        }
        im2col(go, g, &mut col);
        if let Some(gx) = gx.as_mut() {
            gemm(
                MatRef::new(weight, cin, rows),
                MatRef::new(&col, rows, ncols),
                T::zero(),
                &mut gx[b * cin * ncols..(b + 1) * cin * ncols],
            );
        }
        if let Some(gw) = gw.as_mut() {
            let x = &input[b * cin * ncols..(b + 1) * cin * ncols];
            gemm(
                MatRef::new(x, cin, ncols),
                MatRef::new(&col, rows, ncols).t(),
                T::one(),
                gw,
            );
        }
    }
    ConvGrads {
        input: gx,
        weight: gw,
        bias: gb,
    }
}

/// 2x2/stride-2 max pooling. Returns values and the flat argmax index per output cell.
pub(crate) fn maxpool2_forward<T: Element>(
    input: &[T],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                // row-major scan, strict comparison keeps the first maximum
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}
