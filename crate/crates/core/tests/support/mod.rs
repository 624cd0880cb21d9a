//! Explicit-loop reference implementations and random instance builders
//! shared by the integration tests.
#![allow(dead_code)]

use mmf_core::layers::{Activation, ExchangeableLayer, FeedForward};
use mmf_core::rng::{stream, uniform_tensor, RngStream};
use mmf_core::{ModelConfig, ModelParams, Tensor};
use rand::Rng;

pub fn at3(t: &Tensor, i: usize, j: usize, k: usize) -> f64 {
    let s = t.shape();
    t.data()[(i * s[1] + j) * s[2] + k]
}

fn div0(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Exchangeable layer written out element by element.
pub fn exml_oracle(z: &Tensor, mask: &Tensor, layer: &ExchangeableLayer) -> Tensor {
    let (n, m, ci) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let co = layer.c_out();
    let w = |c: usize, o: usize, t: usize| at3(&layer.weight, c, o, t);
    let b = |i: usize, j: usize| mask.at(i, j);
    let mut out = vec![0.0; n * m * co];
    for i in 0..n {
        for j in 0..m {
            for o in 0..co {
                let mut acc = layer.bias.data()[o];
                for c in 0..ci {
                    let elem = b(i, j) * at3(z, i, j, c);
                    let (mut col_num, mut col_den) = (0.0, 0.0);
                    for i2 in 0..n {
                        col_num += b(i2, j) * at3(z, i2, j, c);
                        col_den += b(i2, j);
                    }
                    let (mut row_num, mut row_den) = (0.0, 0.0);
                    for j2 in 0..m {
                        row_num += b(i, j2) * at3(z, i, j2, c);
                        row_den += b(i, j2);
                    }
                    let (mut all_num, mut all_den) = (0.0, 0.0);
                    for i2 in 0..n {
                        for j2 in 0..m {
                            all_num += b(i2, j2) * at3(z, i2, j2, c);
                            all_den += b(i2, j2);
                        }
                    }
                    acc += w(c, o, 0) * elem
                        + w(c, o, 1) * div0(col_num, col_den)
                        + w(c, o, 2) * div0(row_num, row_den)
                        + w(c, o, 3) * div0(all_num, all_den);
                }
                if layer.activation == Activation::Relu {
                    acc = acc.max(0.0);
                }
                out[(i * m + j) * co + o] = acc;
            }
        }
    }
    Tensor::new(&[n, m, co], out).unwrap()
}

/// Stack oracle: ReLU between layers, linear last layer.
pub fn stack_oracle(x: &Tensor, mask: &Tensor, layers: &[ExchangeableLayer]) -> Tensor {
    let (n, m) = (x.shape()[0], x.shape()[1]);
    let mut z = x.clone().reshape(&[n, m, 1]).unwrap();
    for (l, layer) in layers.iter().enumerate() {
        let mut layer = layer.clone();
        layer.activation = if l + 1 == layers.len() { Activation::Identity } else { Activation::Relu };
        z = exml_oracle(&z, mask, &layer);
    }
    z
}

/// Unmasked mean over columns (`axis_rows = false`, giving `[N, C]`) or over
/// rows (`true`, giving `[M, C]`).
pub fn pool_oracle(z: &Tensor, over_rows: bool) -> Tensor {
    let (n, m, c) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let (outer, inner) = if over_rows { (m, n) } else { (n, m) };
    let mut out = vec![0.0; outer * c];
    for a in 0..outer {
        for k in 0..c {
            let mut s = 0.0;
            for b in 0..inner {
                s += if over_rows { at3(z, b, a, k) } else { at3(z, a, b, k) };
            }
            out[a * c + k] = s / inner as f64;
        }
    }
    Tensor::new(&[outer, c], out).unwrap()
}

pub fn ff_oracle(x: &Tensor, ff: &FeedForward) -> Tensor {
    let mut h = x.clone();
    for (l, (w, b)) in ff.weights.iter().zip(&ff.biases).enumerate() {
        let (r, ci, co) = (h.rows(), w.rows(), w.cols());
        let mut next = Tensor::zeros(&[r, co]);
        for i in 0..r {
            for o in 0..co {
                let mut s = b.data()[o];
                for c in 0..ci {
                    s += h.at(i, c) * w.at(c, o);
                }
                if l + 1 != ff.depth() {
                    s = s.max(0.0);
                }
                next.set(i, o, s);
            }
        }
        h = next;
    }
    h
}

pub fn predict_oracle(u: &Tensor, v: &Tensor) -> Tensor {
    Tensor::from_fn2(u.rows(), v.rows(), |i, j| (0..u.cols()).map(|k| u.at(i, k) * v.at(j, k)).sum())
}

/// One simultaneous MAP gradient step on `(U, V)`.
pub fn step_oracle(
    x: &Tensor,
    b: &Tensor,
    u: &Tensor,
    v: &Tensor,
    u0: &Tensor,
    v0: &Tensor,
    lambda: f64,
    eta: f64,
) -> (Tensor, Tensor) {
    let (n, m, k) = (u.rows(), v.rows(), u.cols());
    let pred = predict_oracle(u, v);
    let r = |i: usize, j: usize| b.at(i, j) * (pred.at(i, j) - x.at(i, j));
    let u_new = Tensor::from_fn2(n, k, |i, c| {
        let g: f64 = (0..m).map(|j| r(i, j) * v.at(j, c)).sum::<f64>() + lambda * (u.at(i, c) - u0.at(i, c));
        u.at(i, c) - eta * g
    });
    let v_new = Tensor::from_fn2(m, k, |j, c| {
        let g: f64 = (0..n).map(|i| r(i, j) * u.at(i, c)).sum::<f64>() + lambda * (v.at(j, c) - v0.at(j, c));
        v.at(j, c) - eta * g
    });
    (u_new, v_new)
}

/// Mean squared error over the cells of `b_test`.
pub fn loss_oracle(x_test: &Tensor, b_test: &Tensor, pred: &Tensor) -> f64 {
    let (mut s, mut c) = (0.0, 0.0);
    for i in 0..pred.rows() {
        for j in 0..pred.cols() {
            if b_test.at(i, j) != 0.0 {
                let d = x_test.at(i, j) - pred.at(i, j);
                s += d * d;
                c += 1.0;
            }
        }
    }
    s / c
}

pub fn rng(seed: u64) -> RngStream {
    stream(seed, 0xacce)
}

pub fn random_matrix(rng: &mut RngStream, n: usize, m: usize) -> Tensor {
    uniform_tensor(rng, &[n, m], 2.0)
}

pub fn random_mask(rng: &mut RngStream, n: usize, m: usize, p: f64) -> Tensor {
    Tensor::from_fn2(n, m, |_, _| if rng.random_bool(p) { 1.0 } else { 0.0 })
}

pub fn random_layer(rng: &mut RngStream, ci: usize, co: usize, act: Activation) -> ExchangeableLayer {
    let mut layer = ExchangeableLayer::init(ci, co, act, rng);
    layer.bias = uniform_tensor(rng, &[co], 0.5);
    layer
}

pub fn random_permutation(rng: &mut RngStream, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(p.as_mut_slice(), rng);
    p
}

/// `out[i, j] = t[rows[i], cols[j]]` for rank 2 or 3 tensors.
pub fn permute(t: &Tensor, rows: &[usize], cols: &[usize]) -> Tensor {
    let s = t.shape().to_vec();
    let c = if s.len() == 3 { s[2] } else { 1 };
    let mut out = Vec::with_capacity(t.numel());
    for &i in rows {
        for &j in cols {
            let base = (i * s[1] + j) * c;
            out.extend_from_slice(&t.data()[base..base + c]);
        }
    }
    Tensor::new(&s, out).unwrap()
}

/// `out[i] = t[perm[i]]` along the first axis of a rank 2 tensor.
pub fn permute_rows(t: &Tensor, perm: &[usize]) -> Tensor {
    Tensor::from_fn2(t.rows(), t.cols(), |i, j| t.at(perm[i], j))
}

pub fn small_config(width: usize) -> ModelConfig {
    ModelConfig {
        exml_channels: vec![width; 3],
        ff_hidden: width,
        ff_layers: 4,
        latent: width,
        lambda_init: 1.0,
    }
}

/// Randomized model: all biases nonzero so every parameter carries gradient.
pub fn random_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(cfg, seed).unwrap();
    let mut rng = stream(seed, 0xb1a5);
    for l in &mut p.exml {
        l.bias = uniform_tensor(&mut rng, l.bias.shape(), 0.3);
    }
    for ff in [&mut p.f_u, &mut p.f_v] {
        for b in &mut ff.biases {
            *b = uniform_tensor(&mut rng, b.shape(), 0.3);
        }
    }
    p.lambda_raw = Tensor::scalar(rng.random_range(-0.5..0.5));
    p
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

pub fn max_abs(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
