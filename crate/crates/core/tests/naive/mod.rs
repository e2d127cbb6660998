//! Loop-based forward passes used as oracles for the graph implementations.
#![allow(dead_code)]

use vtl_core::nn::{Attention, Block, FeedForward, LayerNorm, Linear};
use vtl_core::tensor::{ParamStore, Tensor};

pub type Rows = Vec<Vec<f64>>;

pub fn rows(t: &Tensor) -> Rows {
    (0..t.rows()).map(|r| t.row_slice(r).to_vec()).collect()
}

pub fn linear(s: &ParamStore, lin: &Linear, x: &Rows) -> Rows {
    let w = s.value(lin.weight);
    let mut delta: Option<Tensor> = None;
    if let Some(l) = &lin.lora {
        if !l.is_merged() {
            let (a, b) = (s.value(l.a), s.value(l.b));
            let mut d = Tensor::zeros(b.rows(), a.cols());
            for i in 0..b.rows() {
                for j in 0..a.cols() {
                    let mut acc = 0.0;
                    for k in 0..a.rows() {
                        acc += b.get(i, k) * a.get(k, j);
                    }
                    d.set(i, j, acc * l.scale());
                }
            }
            delta = Some(d);
        }
    }
    x.iter()
        .map(|row| {
            (0..w.rows())
                .map(|o| {
                    let mut acc = 0.0;
                    for (i, xi) in row.iter().enumerate() {
                        let wv = w.get(o, i) + delta.as_ref().map_or(0.0, |d| d.get(o, i));
                        acc += wv * xi;
                    }
                    acc + lin.bias.map_or(0.0, |b| s.value(b).get(0, o))
                })
                .collect()
        })
        .collect()
}

pub fn layer_norm(s: &ParamStore, ln: &LayerNorm, x: &Rows) -> Rows {
    let (g, b) = (s.value(ln.gamma), s.value(ln.beta));
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) / (var + 1e-5).sqrt() * g.get(0, c) + b.get(0, c))
                .collect()
        })
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Multi-head attention of `x` over `ctx`; `allowed(i, j)` masks query row `i` against key row `j`.
pub fn attention(
    s: &ParamStore,
    at: &Attention,
    x: &Rows,
    ctx: &Rows,
    allowed: impl Fn(usize, usize) -> bool,
) -> Rows {
    let q = linear(s, &at.q, x);
    let k = linear(s, &at.k, ctx);
    let v = linear(s, &at.v, ctx);
    let d = q[0].len();
    let dh = d / at.heads;
    let mut out = vec![vec![0.0; d]; x.len()];
    for h in 0..at.heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..x.len() {
            let keys: Vec<usize> = (0..ctx.len()).filter(|&j| allowed(i, j)).collect();
            let scores: Vec<f64> = keys
                .iter()
                .map(|&j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (w, &j) in e.iter().zip(&keys) {
                for c in cols.clone() {
                    out[i][c] += w / z * v[j][c];
                }
            }
        }
    }
    linear(s, &at.o, &out)
}

pub fn feed_forward(s: &ParamStore, ff: &FeedForward, x: &Rows) -> Rows {
    let h: Rows = linear(s, &ff.up, x)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    linear(s, &ff.down, &h)
}

pub fn block(
    s: &ParamStore,
    blk: &Block,
    x: &Rows,
    allowed: impl Fn(usize, usize) -> bool,
) -> Rows {
    let h = layer_norm(s, &blk.ln1, x);
    let x = add(x, &attention(s, &blk.attn, &h, &h, allowed));
    let h = layer_norm(s, &blk.ln2, &x);
    add(&x, &feed_forward(s, &blk.ff, &h))
}

pub fn sinusoid(pos: usize, i: usize, dim: usize) -> f64 {
    let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
    if i % 2 == 0 {
        angle.sin()
    } else {
        angle.cos()
    }
}

pub fn max_diff(a: &Rows, b: &Tensor) -> f64 {
    assert_eq!((a.len(), a[0].len()), (b.rows(), b.cols()));
    let mut m: f64 = 0.0;
    for (r, row) in a.iter().enumerate() {
        for (c, v) in row.iter().enumerate() {
            m = m.max((v - b.get(r, c)).abs());
        }
    }
    m
}
