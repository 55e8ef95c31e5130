use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::check_gradients;

const FD_STEP: f64 = 1e-4;
const FD_TOL: f64 = 1e-3;
const SEEDS: u64 = 20;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values kept at least `margin` away from zero, for ops with a kink there.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], margin: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v: f64 = rng.random_range(margin..1.0);
        if rng.random_bool(0.5) {
            v
        } else {
            -v
        }
    })
}

/// Naive 6-nested-loop cross-correlation.
fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &[f64],
    stride: usize,
    pad: usize,
) -> Tensor<f64> {
    let [bs, cin, h, wd] = x.dims4().unwrap();
    let [cout, _, kh, kw] = w.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(vec![bs, cout, oh, ow]);
    for n in 0..bs {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()
                                    [((n * cin + ci) * h + iy as usize) * wd + ix as usize];
                                let wv = w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.data_mut()[((n * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    out
}

/// Scatter-accumulate transposed convolution (no padding).
fn conv_transpose_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize) -> Tensor<f64> {
    let [bs, cin, h, wd] = x.dims4().unwrap();
    let [_, cout, kh, kw] = w.dims4().unwrap();
    let (oh, ow) = ((h - 1) * stride + kh, (wd - 1) * stride + kw);
    let mut out = Tensor::zeros(vec![bs, cout, oh, ow]);
    for n in 0..bs {
        for co in 0..cout {
            for v in 0..oh * ow {
                out.data_mut()[(n * cout + co) * oh * ow + v] = b[co];
            }
        }
        for ci in 0..cin {
            for iy in 0..h {
                for ix in 0..wd {
                    let xv = x.data()[((n * cin + ci) * h + iy) * wd + ix];
                    for co in 0..cout {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let wv = w.data()[((ci * cout + co) * kh + ky) * kw + kx];
                                let (oy, ox) = (iy * stride + ky, ix * stride + kx);
                                out.data_mut()[((n * cout + co) * oh + oy) * ow + ox] += xv * wv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn run_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let mut t = Tape::new();
    let (xi, wi, bi) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
    let y = t.conv2d(xi, wi, Some(bi), stride, pad).unwrap();
    t.value(y).clone()
}

#[test]
fn conv2d_ones_center_is_nine() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let w = t.constant(Tensor::full(vec![1, 1, 3, 3], 1.0));
    let b = t.constant(Tensor::zeros(vec![1]));
    let y = t.conv2d(x, w, Some(b), 1, 1).unwrap();
    assert_eq!(t.shape(y), &[1, 1, 3, 3]);
    assert_eq!(t.value(y).data()[4], 9.0);
    assert_eq!(t.value(y).data()[0], 4.0);
}

#[test]
fn conv2d_unit_kernel_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 1, 5, 4]);
    let y = run_conv(
        &x,
        &Tensor::full(vec![1, 1, 1, 1], 1.0),
        &Tensor::zeros(vec![1]),
        1,
        0,
    );
    assert_eq!(y, x);
}

#[test]
fn conv2d_matches_naive_loops() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[1, 2, 5, 5]);
        let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
        let b = rand_tensor(&mut rng, &[3]);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let got = run_conv(&x, &w, &b, stride, pad);
            let want = conv_oracle(&x, &w, b.data(), stride, pad);
            assert_eq!(got.shape(), want.shape());
            assert!(max_abs_diff(got.data(), want.data()) < 1e-5);
        }
    }
    // same check in f32
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = rand_tensor(&mut rng, &[1, 2, 5, 5]);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let mut t = Tape::<f32>::new();
    let (xi, wi, bi) = (t.constant(x.cast()), t.constant(w.cast()), t.constant(b.cast()));
    let y = t.conv2d(xi, wi, Some(bi), 1, 1).unwrap();
    let got: Tensor<f64> = t.value(y).cast();
    let want = conv_oracle(&x, &w, b.data(), 1, 1);
    assert!(max_abs_diff(got.data(), want.data()) < 1e-5);
}

#[test]
fn conv2d_rejects_bad_arguments() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::zeros(vec![1, 2, 4, 4]));
    let w = t.constant(Tensor::zeros(vec![1, 3, 3, 3]));
    assert!(matches!(t.conv2d(x, w, None, 1, 1), Err(Error::Shape(_))));
    let w = t.constant(Tensor::zeros(vec![1, 2, 3, 3]));
    assert!(matches!(t.conv2d(x, w, None, 0, 1), Err(Error::Argument(_))));
    let w = t.constant(Tensor::zeros(vec![1, 2, 7, 7]));
    assert!(matches!(t.conv2d(x, w, None, 1, 1), Err(Error::Shape(_))));
}

#[test]
fn conv_transpose_tiles_ones() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::full(vec![1, 1, 2, 2], 1.0));
    let w = t.constant(Tensor::full(vec![1, 1, 2, 2], 1.0));
    let y = t.conv_transpose2d(x, w, None, 2).unwrap();
    assert_eq!(t.value(y), &Tensor::full(vec![1, 1, 4, 4], 1.0));
}

#[test]
fn conv_transpose_matches_scatter() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 3, 3, 4]);
        let w = rand_tensor(&mut rng, &[3, 2, 2, 2]);
        let b = rand_tensor(&mut rng, &[2]);
        for stride in [1, 2, 3] {
            let mut t = Tape::new();
            let (xi, wi, bi) = (t.constant(x.clone()), t.constant(w.clone()), t.constant(b.clone()));
            let y = t.conv_transpose2d(xi, wi, Some(bi), stride).unwrap();
            let want = conv_transpose_oracle(&x, &w, b.data(), stride);
            assert_eq!(t.shape(y), want.shape());
            assert!(max_abs_diff(t.value(y).data(), want.data()) < 1e-5);
        }
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // conv maps [1,3,8,8] -> [1,2,4,4] with weight [2,3,2,2], stride 2;
        // the transpose with the same buffer maps back.
        let x = rand_tensor(&mut rng, &[1, 3, 8, 8]);
        let y = rand_tensor(&mut rng, &[1, 2, 4, 4]);
        let w = rand_tensor(&mut rng, &[2, 3, 2, 2]);
        let mut t = Tape::new();
        let (xi, yi, wi) = (t.constant(x.clone()), t.constant(y.clone()), t.constant(w.clone()));
        let cx = t.conv2d(xi, wi, None, 2, 0).unwrap();
        let cty = t.conv_transpose2d(yi, wi, None, 2).unwrap();
        let lhs: f64 = t.value(cx).data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(t.value(cty).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-4, "{lhs} vs {rhs}");
    }
}

#[test]
fn conv_transpose_input_grad_is_conv_of_upstream() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[1, 3, 4, 4]);
    let w = rand_tensor(&mut rng, &[3, 2, 2, 2]);
    let upstream = rand_tensor(&mut rng, &[1, 2, 8, 8]);
    let mut t = Tape::new();
    let xi = t.var(x);
    let wi = t.constant(w.clone());
    let y = t.conv_transpose2d(xi, wi, None, 2).unwrap();
    // loss = <y, upstream> so dL/dy = upstream
    let up = t.constant(upstream.clone());
    let flat_y = t.reshape(y, vec![1, 1, 128]).unwrap();
    let flat_u = t.reshape(up, vec![1, 128, 1]).unwrap();
    let dot = t.bmm(flat_y, flat_u, false, false).unwrap();
    let loss = t.sum(dot);
    t.backward(loss).unwrap();
    let conv = run_conv(&upstream, &w, &Tensor::zeros(vec![3]), 2, 0);
    assert!(max_abs_diff(t.grad(xi).unwrap(), conv.data()) < 1e-12);
}

#[test]
fn maxpool_basic_and_ties() {
    let mut t = Tape::<f32>::new();
    let x = t.var(Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let y = t.maxpool2d(x).unwrap();
    assert_eq!(t.value(y).data(), &[4.0]);

    let mut t = Tape::<f32>::new();
    let x = t.var(Tensor::full(vec![1, 1, 4, 4], 0.5));
    let y = t.maxpool2d(x).unwrap();
    assert_eq!(t.value(y), &Tensor::full(vec![1, 1, 2, 2], 0.5));
    let loss = t.sum(y);
    t.backward(loss).unwrap();
    let g = t.grad(x).unwrap();
    #[rustfmt::skip]
    let want = [1.0, 0.0, 1.0, 0.0,
                0.0, 0.0, 0.0, 0.0,
                1.0, 0.0, 1.0, 0.0,
                0.0, 0.0, 0.0, 0.0];
    assert_eq!(g, &want);
}

#[test]
fn maxpool_matches_window_scan() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[2, 3, 8, 8]);
        let mut t = Tape::new();
        let xi = t.constant(x.clone());
        let y = t.maxpool2d(xi).unwrap();
        for p in 0..6 {
            for oy in 0..4 {
                for ox in 0..4 {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(x.data()[p * 64 + (2 * oy + dy) * 8 + 2 * ox + dx]);
                        }
                    }
                    assert_eq!(t.value(y).data()[p * 16 + oy * 4 + ox], m);
                }
            }
        }
    }
}

#[test]
fn maxpool_rejects_odd_extent() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::zeros(vec![1, 1, 3, 4]));
    assert!(matches!(t.maxpool2d(x), Err(Error::Argument(_))));
}

#[test]
fn activations() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::new(vec![3], vec![-1.0, 2.0, 0.0]).unwrap());
    let r = t.relu(x);
    assert_eq!(t.value(r).data(), &[0.0, 2.0, 0.0]);
    let l = t.leaky_relu(x, 0.2);
    assert_eq!(t.value(l).data(), &[-0.2, 2.0, 0.0]);
    let s = t.sigmoid(x);
    assert_eq!(t.value(s).data()[2], 0.5);
}

#[test]
fn activation_subgradients_at_zero() {
    let mut t = Tape::<f64>::new();
    let x = t.var(Tensor::zeros(vec![1]));
    let r = t.relu(x);
    let l = t.leaky_relu(x, 0.2);
    let s = t.add(r, l).unwrap();
    let loss = t.sum(s);
    t.backward(loss).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[0.2]);
}

fn bn_stats_of(values: &[f64], b: usize, c: usize, plane: usize, ch: usize) -> (f64, f64) {
    let vals: Vec<f64> = (0..b)
        .flat_map(|bi| values[(bi * c + ch) * plane..(bi * c + ch + 1) * plane].to_vec())
        .collect();
    let n = vals.len() as f64;
    let m = vals.iter().sum::<f64>() / n;
    let v = vals.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    (m, v)
}

#[test]
fn batchnorm_standardizes_then_affine() {
    // channel 0 holds {3, 7} repeated: mean 5, var 4.
    let data: Vec<f64> = (0..2 * 2 * 4)
        .map(|i| if i % 2 == 0 { 3.0 } else { 7.0 } + (i / 4 % 2) as f64 * 10.0)
        .collect();
    let x = Tensor::new(vec![2, 2, 2, 2], data).unwrap();
    let (m0, v0) = bn_stats_of(x.data(), 2, 2, 4, 0);
    assert_eq!((m0, v0), (5.0, 4.0));

    for (gamma, beta) in [(1.0, 0.0), (2.0, 3.0)] {
        let mut t = Tape::new();
        let mut stats = RunningStats::new(2);
        let xi = t.constant(x.clone());
        let g = t.constant(Tensor::full(vec![2], gamma));
        let b = t.constant(Tensor::full(vec![2], beta));
        let y = t
            .batchnorm2d(xi, g, b, &mut stats, Mode::Train, 0.1, 0.0)
            .unwrap();
        for ch in 0..2 {
            let (m, v) = bn_stats_of(t.value(y).data(), 2, 2, 4, ch);
            assert!((m - beta).abs() < 1e-12);
            assert!((v.sqrt() - gamma).abs() < 1e-12);
        }
        // running stats moved 10% of the way to the batch stats (unbiased var 4 * 8/7)
        assert!((stats.mean[0] - 0.5).abs() < 1e-12);
        assert!((stats.var[0] - (0.9 + 0.1 * 4.0 * 8.0 / 7.0)).abs() < 1e-12);
    }
}

#[test]
fn batchnorm_eval_uses_running_stats() {
    let mut t = Tape::<f64>::new();
    let mut stats = RunningStats {
        mean: vec![1.0],
        var: vec![4.0],
    };
    let x = t.constant(Tensor::full(vec![1, 1, 1, 2], 5.0));
    let g = t.constant(Tensor::full(vec![1], 1.0));
    let b = t.constant(Tensor::zeros(vec![1]));
    let y = t
        .batchnorm2d(x, g, b, &mut stats, Mode::Eval, 0.1, 0.0)
        .unwrap();
    assert_eq!(t.value(y).data(), &[2.0, 2.0]);
    assert_eq!(stats.mean, vec![1.0]);
    let empty = t.constant(Tensor::zeros(vec![0, 1, 1, 2]));
    assert!(matches!(
        t.batchnorm2d(empty, g, b, &mut stats, Mode::Train, 0.1, 1e-5),
        Err(Error::Argument(_))
    ));
}

#[test]
fn concat_and_split_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, &[1, 64, 8, 8]);
    let b = rand_tensor(&mut rng, &[1, 64, 8, 8]);
    let mut t = Tape::new();
    let (ai, bi) = (t.constant(a.clone()), t.constant(b.clone()));
    let c = t.concat_channels(ai, bi).unwrap();
    assert_eq!(t.shape(c), &[1, 128, 8, 8]);
    assert_eq!(&t.value(c).data()[..64 * 64], a.data());
    let (lo, hi) = split_channels(t.value(c), 64).unwrap();
    assert_eq!(lo, a);
    assert_eq!(hi, b);
    let bad = t.constant(Tensor::zeros(vec![1, 64, 4, 8]));
    assert!(matches!(t.concat_channels(ai, bad), Err(Error::Shape(_))));
}

fn attention_params(rng: &mut ChaCha8Rng, c: usize, gamma: f64) -> Vec<Tensor<f64>> {
    let cq = c / 8;
    vec![
        rand_tensor(rng, &[cq, c, 1, 1]),
        rand_tensor(rng, &[cq]),
        rand_tensor(rng, &[cq, c, 1, 1]),
        rand_tensor(rng, &[cq]),
        rand_tensor(rng, &[c, c, 1, 1]),
        rand_tensor(rng, &[c]),
        Tensor::scalar(gamma),
    ]
}

fn run_attention(x: &Tensor<f64>, p: &[Tensor<f64>]) -> (Tensor<f64>, Tensor<f64>) {
    let mut t = Tape::new();
    let xi = t.constant(x.clone());
    let ids: Vec<VarId> = p.iter().map(|v| t.constant(v.clone())).collect();
    let out = t
        .self_attention(xi, ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], ids[6])
        .unwrap();
    (t.value(out.output).clone(), t.value(out.weights).clone())
}

/// Explicit (HW x HW) attention matrix evaluation.
fn attention_oracle(x: &Tensor<f64>, p: &[Tensor<f64>]) -> Tensor<f64> {
    let [_, c, h, w] = x.dims4().unwrap();
    let n = h * w;
    let cq = c / 8;
    let xs = x.data();
    let proj = |wt: &Tensor<f64>, bias: &Tensor<f64>, co: usize| -> Vec<Vec<f64>> {
        (0..co)
            .map(|o| {
                (0..n)
                    .map(|pos| {
                        bias.data()[o]
                            + (0..c).map(|ci| wt.data()[o * c + ci] * xs[ci * n + pos]).sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    };
    let q = proj(&p[0], &p[1], cq);
    let k = proj(&p[2], &p[3], cq);
    let v = proj(&p[4], &p[5], c);
    let mut attn = vec![vec![0.0; n]; n];
    for i in 0..n {
        let e: Vec<f64> = (0..n).map(|j| (0..cq).map(|d| q[d][i] * k[d][j]).sum()).collect();
        let m = e.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = e.iter().map(|v| (v - m).exp()).sum();
        for j in 0..n {
            attn[i][j] = (e[j] - m).exp() / z;
        }
    }
    let gamma = p[6].data()[0];
    let mut out = x.clone();
    for ch in 0..c {
        for i in 0..n {
            let a: f64 = (0..n).map(|j| v[ch][j] * attn[i][j]).sum();
            out.data_mut()[ch * n + i] += gamma * a;
        }
    }
    out
}

#[test]
fn attention_zero_gate_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[2, 16, 4, 4]);
    let p = attention_params(&mut rng, 16, 0.0);
    let (y, _) = run_attention(&x, &p);
    assert_eq!(y, x);
}

#[test]
fn attention_rows_are_distributions() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[1, 8, 4, 4]);
    let p = attention_params(&mut rng, 8, 0.7);
    let (_, weights) = run_attention(&x, &p);
    assert_eq!(weights.shape(), &[1, 16, 16]);
    for row in weights.data().chunks(16) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(row.iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn attention_matches_dense_oracle() {
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = rand_tensor(&mut rng, &[1, 8, 4, 4]);
        let gamma = rng.random_range(-1.0..1.0);
        let p = attention_params(&mut rng, 8, gamma);
        let (y, _) = run_attention(&x, &p);
        let want = attention_oracle(&x, &p);
        assert!(max_abs_diff(y.data(), want.data()) < 1e-5);
    }
}

#[test]
fn losses_analytic_values() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::from_fn(vec![4], |i| i as f64));
    let l1 = t.l1_loss(x, x).unwrap();
    assert_eq!(t.item(l1), 0.0);
    let zero = t.constant(Tensor::zeros(vec![1]));
    let one = t.constant(Tensor::full(vec![1], 1.0));
    let bce = t.bce_with_logits(zero, one).unwrap();
    assert!((t.item(bce) - std::f64::consts::LN_2).abs() < 1e-12);
    let a = t.constant(Tensor::full(vec![8], 0.3));
    let b = t.constant(Tensor::full(vec![8], 0.2));
    let mse = t.mse_loss(a, b).unwrap();
    assert!((t.item(mse) - 0.01).abs() < 1e-12);
    let c = t.constant(Tensor::zeros(vec![3]));
    assert!(matches!(t.mse_loss(a, c), Err(Error::Shape(_))));
}

#[test]
fn backward_sum_gives_ones() {
    let mut t = Tape::<f32>::new();
    let x = t.var(Tensor::from_fn(vec![2, 3], |i| i as f32));
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert_eq!(t.grad(x).unwrap(), &[1.0; 6]);
}

#[test]
fn backward_scalar_mse_analytic() {
    // loss = (w*x - y)^2 with scalar w; grad = 2 x (w x - y)
    let (w, x, y) = (0.7f64, 1.3, -0.4);
    let mut t = Tape::new();
    let wi = t.var(Tensor::scalar(w));
    let xi = t.constant(Tensor::scalar(x));
    let yi = t.constant(Tensor::scalar(y));
    let wx = t.mul_scalar(xi, wi).unwrap();
    let loss = t.mse_loss(wx, yi).unwrap();
    t.backward(loss).unwrap();
    let want = 2.0 * x * (w * x - y);
    assert!((t.grad(wi).unwrap()[0] - want).abs() < 1e-12);
}

#[test]
fn backward_contract_errors() {
    let mut t = Tape::<f32>::new();
    let x = t.var(Tensor::zeros(vec![3]));
    assert!(matches!(t.backward(x), Err(Error::Argument(_))));
    let s = t.sum(x);
    t.backward(s).unwrap();
    assert!(matches!(t.backward(s), Err(Error::Argument(_))));

    // detached graph: no-op
    let mut t = Tape::<f32>::new();
    let c = t.constant(Tensor::zeros(vec![3]));
    let s = t.sum(c);
    t.backward(s).unwrap();
    assert!(t.grad(c).is_none());
}

#[test]
fn forward_is_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[1, 8, 4, 4]).cast::<f32>();
    let p: Vec<Tensor<f32>> = attention_params(&mut rng, 8, 0.5).iter().map(|t| t.cast()).collect();
    let run = || {
        let mut t = Tape::<f32>::new();
        let xi = t.constant(x.clone());
        let ids: Vec<VarId> = p.iter().map(|v| t.constant(v.clone())).collect();
        let a = t
            .self_attention(xi, ids[0], ids[1], ids[2], ids[3], ids[4], ids[5], ids[6])
            .unwrap();
        let y = t.conv2d(a.output, ids[4], Some(ids[5]), 1, 0).unwrap();
        t.value(y).clone()
    };
    assert_eq!(run().data(), run().data());
}

// ---- finite-difference checks, one per op, 20 seeds each ----

fn fd_check<F>(shapes: &[&[usize]], kink_margin: Option<f64>, f: F)
where
    F: Fn(&mut Tape<f64>, &[VarId]) -> Result<VarId> + Copy,
{
    for seed in 0..SEEDS {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let inputs: Vec<Tensor<f64>> = shapes
            .iter()
            .map(|s| match kink_margin {
                Some(m) => rand_away_from_zero(&mut rng, s, m),
                None => rand_tensor(&mut rng, s),
            })
            .collect();
        let report = check_gradients(&inputs, f, FD_STEP, Some(40), seed).unwrap();
        assert!(
            report.max_rel_error < FD_TOL,
            "seed {seed}: rel error {}",
            report.max_rel_error
        );
    }
}

/// Scalarize with an MSE against a fixed pseudo-random target so that the
/// upstream gradient is not uniform.
fn scalarize(t: &mut Tape<f64>, y: VarId) -> Result<VarId> {
    let shape = t.shape(y).to_vec();
    let target = Tensor::from_fn(shape, |i| ((i * 7919) % 13) as f64 / 13.0 - 0.5);
    let target = t.constant(target);
    t.mse_loss(y, target)
}

#[test]
fn fd_conv2d() {
    fd_check(&[&[2, 2, 5, 5], &[3, 2, 3, 3], &[3]], None, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        scalarize(t, y)
    });
    fd_check(&[&[1, 1, 8, 8], &[2, 1, 4, 4], &[2]], None, |t, v| {
        let y = t.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
        scalarize(t, y)
    });
}

#[test]
fn fd_conv_transpose2d() {
    fd_check(&[&[2, 3, 3, 3], &[3, 2, 2, 2], &[2]], None, |t, v| {
        let y = t.conv_transpose2d(v[0], v[1], Some(v[2]), 2)?;
        scalarize(t, y)
    });
}

#[test]
fn fd_maxpool() {
    fd_check(&[&[1, 2, 4, 4]], None, |t, v| {
        let y = t.maxpool2d(v[0])?;
        scalarize(t, y)
    });
}

#[test]
fn fd_activations() {
    fd_check(&[&[3, 4]], Some(1e-2), |t, v| {
        let y = t.relu(v[0]);
        scalarize(t, y)
    });
    fd_check(&[&[3, 4]], Some(1e-2), |t, v| {
        let y = t.leaky_relu(v[0], 0.2);
        scalarize(t, y)
    });
    fd_check(&[&[3, 4]], None, |t, v| {
        let y = t.sigmoid(v[0]);
        scalarize(t, y)
    });
}

#[test]
fn fd_batchnorm() {
    for mode in [Mode::Train, Mode::Eval] {
        fd_check(&[&[3, 2, 3, 3], &[2], &[2]], None, move |t, v| {
            let mut stats = RunningStats {
                mean: vec![0.1, -0.2],
                var: vec![0.8, 1.3],
            };
            let y = t.batchnorm2d(v[0], v[1], v[2], &mut stats, mode, 0.1, 1e-5)?;
            scalarize(t, y)
        });
    }
}

#[test]
fn fd_concat_slice_add() {
    fd_check(&[&[2, 2, 3, 3], &[2, 3, 3, 3]], None, |t, v| {
        let c = t.concat_channels(v[0], v[1])?;
        let s = t.slice_channels(c, 1, 3)?;
        let s2 = t.slice_channels(c, 2, 3)?;
        let y = t.add(s, s2)?;
        scalarize(t, y)
    });
}

#[test]
fn fd_linear_and_channel_bias() {
    fd_check(&[&[2, 5], &[3, 5], &[3], &[2, 3, 2, 2]], None, |t, v| {
        let bias = t.linear(v[0], v[1], v[2])?;
        let y = t.add_channel_bias(v[3], bias)?;
        scalarize(t, y)
    });
}

#[test]
fn fd_bmm_softmax() {
    for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
        let sa: &[usize] = if ta { &[2, 4, 3] } else { &[2, 3, 4] };
        let sb: &[usize] = if tb { &[2, 5, 4] } else { &[2, 4, 5] };
        fd_check(&[sa, sb], None, move |t, v| {
            let m = t.bmm(v[0], v[1], ta, tb)?;
            let y = t.softmax(m)?;
            scalarize(t, y)
        });
    }
}

#[test]
fn fd_attention() {
    fd_check(
        &[&[1, 8, 3, 3], &[1, 8, 1, 1], &[1], &[1, 8, 1, 1], &[1], &[8, 8, 1, 1], &[8], &[1]],
        None,
        |t, v| {
            let a = t.self_attention(v[0], v[1], v[2], v[3], v[4], v[5], v[6], v[7])?;
            scalarize(t, a.output)
        },
    );
}

#[test]
fn fd_losses() {
    fd_check(&[&[3, 4], &[3, 4]], Some(1e-2), |t, v| {
        // keep pred - target away from the kink by offsetting target
        let shifted = t.scale(v[1], 0.0);
        let l = t.l1_loss(v[0], shifted)?;
        let m = t.mse_loss(v[0], v[1])?;
        let s = t.add(l, m)?;
        Ok(t.scale(s, 1.5))
    });
    fd_check(&[&[3, 4], &[3, 4]], None, |t, v| {
        let labels = t.sigmoid(v[1]);
        let b = t.bce_with_logits(v[0], labels)?;
        let m = t.mean(v[0]);
        let s = t.add(b, m)?;
        Ok(s)
    });
}
