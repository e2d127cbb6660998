use rand::Rng;

use crate::error::{Result, TensorError};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::{LAYER_NORM_EPS, NORMALIZE_EPS};

/// Handle to a node recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Which keys a query may attend to inside one [`AttnSegment`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    /// Every query sees every key.
    Full,
    /// Query `i` sees key `j` iff `j < prefix` or `j <= i`. Requires equal
    /// query and key lengths.
    Causal { prefix: usize },
}

/// One independent attention problem inside a row-stacked batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    pub mask: AttnMask,
}

impl AttnSegment {
    pub fn full(q_start: usize, q_len: usize, k_start: usize, k_len: usize) -> Self {
        Self {
            q_start,
            q_len,
            k_start,
            k_len,
            mask: AttnMask::Full,
        }
    }

    /// Self-attention over `len` rows starting at `start`, causal after `prefix`.
    pub fn causal(start: usize, len: usize, prefix: usize) -> Self {
        Self {
            q_start: start,
            q_len: len,
            k_start: start,
            k_len: len,
            mask: AttnMask::Causal { prefix },
        }
    }

    fn allowed(&self, i: usize, j: usize) -> bool {
        match self.mask {
            AttnMask::Full => true,
            AttnMask::Causal { prefix } => j < prefix || j <= i,
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf(Option<ParamId>),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    Transpose(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Var, Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    MeanRows {
        x: Var,
        group: usize,
    },
    Sum(Var),
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Sigmoid(Var),
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    SoftmaxRows(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Bce {
        p: Var,
        targets: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: Vec<AttnSegment>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients of the most recent backward pass with respect to leaves.
#[derive(Debug, Default)]
pub struct Grads {
    leaves: Vec<(Var, Tensor)>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.leaves.iter().find(|(k, _)| *k == v).map(|(_, t)| t)
    }
}

/// Operation tape. Nodes are appended in evaluation order, so the tape is a
/// topological order by construction and [`Graph::backward`] visits each node
/// once in reverse.
///
/// A graph is single-use per forward pass and confined to one thread.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    no_grad: bool,
}

pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    (rsc, csc): (isize, isize),
    beta: f64,
) {
    // SAFETY: callers pass buffers whose extents match the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

fn strides(t: &Tensor, transposed: bool) -> (isize, isize) {
    if transposed {
        (1, t.cols() as isize)
    } else {
        (t.cols() as isize, 1)
    }
}

fn logical_shape(t: &Tensor, transposed: bool) -> [usize; 2] {
    if transposed {
        [t.cols(), t.rows()]
    } else {
        t.shape()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph on which no node requires gradients; for evaluation.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            no_grad: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && !self.no_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A constant input. With `requires_grad` its gradient is reported in
    /// [`Grads`] after backward.
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf(None), requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// Records a parameter leaf. Frozen parameters enter as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.push(p.value.clone(), Op::Leaf(Some(id)), p.trainable)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(TensorError::Shape {
                op,
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(va.rows(), va.cols(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// `x + row` with `row` (`1 × d`) broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (sx, sr) = (self.shape(x), self.shape(row));
        if sr[0] != 1 || sr[1] != sx[1] {
            return Err(TensorError::Shape {
                op: "add_row",
                lhs: sx,
                rhs: sr,
            });
        }
        let vx = self.value(x);
        let vr = self.value(row).data();
        let mut data = vx.data().to_vec();
        for chunk in data.chunks_mut(sx[1]) {
            for (a, b) in chunk.iter_mut().zip(vr) {
                *a += b;
            }
        }
        let out = Tensor::new(sx[0], sx[1], data)?;
        let rg = self.rg(&[x, row]);
        Ok(self.push(out, Op::AddRow(x, row), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(va.rows(), va.cols(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, s), rg)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let va = self.value(a);
        let vb = self.value(b);
        let [m, k] = logical_shape(va, ta);
        let [k2, n] = logical_shape(vb, tb);
        if k != k2 {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: [m, k],
                rhs: [k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            va.data(),
            strides(va, ta),
            vb.data(),
            strides(vb, tb),
            &mut out,
            (n as isize, 1),
            0.0,
        );
        let out = Tensor::new(m, n, out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, rg))
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a · bᵀ`; the usual form for `out × in` weight matrices.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false, true)
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let out = self.value(x).transposed();
        let rg = self.rg(&[x]);
        self.push(out, Op::Transpose(x), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows of nothing".into()))?;
        let cols = self.shape(first)[1];
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    lhs: self.shape(first),
                    rhs: v.shape(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa[0] != sb[0] {
            return Err(TensorError::Shape {
                op: "concat_cols",
                lhs: sa,
                rhs: sb,
            });
        }
        let cols = sa[1] + sb[1];
        let mut data = Vec::with_capacity(sa[0] * cols);
        for r in 0..sa[0] {
            data.extend_from_slice(self.value(a).row_slice(r));
            data.extend_from_slice(self.value(b).row_slice(r));
        }
        let out = Tensor::new(sa[0], cols, data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x);
        if len == 0 || start + len > s[0] {
            return Err(TensorError::Index {
                op: "slice_rows",
                index: start + len,
                extent: s[0],
            });
        }
        let data = self.value(x).data()[start * s[1]..(start + len) * s[1]].to_vec();
        let out = Tensor::new(len, s[1], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceRows { x, start }, rg))
    }

    /// Row gather; `embedding_lookup` is a gather on the embedding table.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(x);
        let mut data = Vec::with_capacity(index.len() * s[1]);
        for &i in index {
            if i >= s[0] {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: i,
                    extent: s[0],
                });
            }
            data.extend_from_slice(self.value(x).row_slice(i));
        }
        let out = Tensor::new(index.len(), s[1], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            out,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.gather_rows(table, ids)
    }

    /// Mean over consecutive groups of `group` rows: `n × d → (n/group) × d`.
    pub fn mean_rows_grouped(&mut self, x: Var, group: usize) -> Result<Var> {
        let s = self.shape(x);
        if group == 0 || s[0] % group != 0 {
            return Err(TensorError::Contract(format!(
                "cannot split {} rows into groups of {group}",
                s[0]
            )));
        }
        let n = s[0] / group;
        let mut data = vec![0.0; n * s[1]];
        let v = self.value(x);
        for r in 0..s[0] {
            let out = &mut data[(r / group) * s[1]..(r / group + 1) * s[1]];
            for (o, x) in out.iter_mut().zip(v.row_slice(r)) {
                *o += x;
            }
        }
        let inv = 1.0 / group as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let out = Tensor::new(n, s[1], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MeanRows { x, group }, rg))
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let rows = self.shape(x)[0];
        self.mean_rows_grouped(x, rows)
    }

    /// Sum of all entries as a `1 × 1` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `x / (‖x‖₂ + 1e-12)` per row; a zero row stays zero.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let cols = v.cols();
        let mut norms = Vec::with_capacity(v.rows());
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(cols) {
            let n = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            let s = n + NORMALIZE_EPS;
            row.iter_mut().for_each(|a| *a /= s);
            norms.push(n);
        }
        let out = Tensor::new(v.rows(), cols, data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::L2Normalize { x, norms }, rg)
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (`1 × d`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let s = self.shape(x);
        for p in [gamma, beta] {
            if self.shape(p) != [1, s[1]] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    lhs: s,
                    rhs: self.shape(p),
                });
            }
        }
        let d = s[1];
        let v = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; v.len()];
        let mut rstd = Vec::with_capacity(s[0]);
        let mut out = vec![0.0; v.len()];
        for r in 0..s[0] {
            let row = &v[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(rs);
            for c in 0..d {
                let xh = (row[c] - mean) * rs;
                xhat[r * d + c] = xh;
                out[r * d + c] = xh * g[c] + b[c];
            }
        }
        let out = Tensor::new(s[0], d, out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(gelu);
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(out, Op::Sigmoid(x), rg)
    }

    /// Clamp into `[lo, hi]`; gradient passes only inside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(&[x]);
        self.push(out, Op::Clamp { x, lo, hi }, rg)
    }

    /// Inverted dropout. Identity (no node) when not training or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        p: f64,
        train: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::Contract(format!(
                "dropout rate {p} outside [0, 1)"
            )));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let n = self.value(x).numel();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(v.rows(), v.cols(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if !v.all_finite() {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(v.cols()) {
            softmax_in_place(row);
        }
        let out = Tensor::new(v.rows(), v.cols(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SoftmaxRows(x), rg))
    }

    /// `Σ_rows −log softmax(logits_r)[target_r]` (SUM reduction).
    pub fn cross_entropy_logits(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let [n, classes] = v.shape();
        if targets.len() != n {
            return Err(TensorError::Contract(format!(
                "{} targets for {n} rows of logits",
                targets.len()
            )));
        }
        if !v.all_finite() {
            return Err(TensorError::NonFinite {
                op: "cross_entropy_logits",
            });
        }
        let mut probs = v.data().to_vec();
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            if t >= classes {
                return Err(TensorError::Index {
                    op: "cross_entropy_logits",
                    index: t,
                    extent: classes,
                });
            }
            let row = &v.data()[r * classes..(r + 1) * classes];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|a| (a - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            softmax_in_place(&mut probs[r * classes..(r + 1) * classes]);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 targets.
    pub fn bce(&mut self, p: Var, targets: &[f64]) -> Result<Var> {
        let v = self.value(p);
        if targets.len() != v.numel() {
            return Err(TensorError::Contract(format!(
                "{} targets for {} probabilities",
                targets.len(),
                v.numel()
            )));
        }
        if v.data().iter().any(|&x| !(x > 0.0 && x < 1.0)) {
            return Err(TensorError::NonFinite { op: "bce" });
        }
        let m = targets.len() as f64;
        let loss = -v
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &y)| y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            .sum::<f64>()
            / m;
        let rg = self.rg(&[p]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Bce {
                p,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Fused multi-head scaled dot-product attention over row-stacked
    /// segments. `q` is `Nq × d`, `k` and `v` are `Nk × d`; rows of `q` not
    /// covered by any segment produce zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segments: &[AttnSegment],
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sk != sv || sq[1] != sk[1] {
            return Err(TensorError::Shape {
                op: "attention",
                lhs: sq,
                rhs: sk,
            });
        }
        let d = sq[1];
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Contract(format!(
                "width {d} not divisible by {heads} heads"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        for s in segments {
            if s.q_start + s.q_len > sq[0]
                || s.k_start + s.k_len > sk[0]
                || s.q_len == 0
                || s.k_len == 0
            {
                return Err(TensorError::Contract(format!(
                    "attention segment {s:?} out of range"
                )));
            }
            if matches!(s.mask, AttnMask::Causal { .. }) && s.q_len != s.k_len {
                return Err(TensorError::Contract(
                    "causal segment needs equal lengths".into(),
                ));
            }
        }
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let mut out = vec![0.0; sq[0] * d];
        let total: usize = segments.iter().map(|s| s.q_len * s.k_len).sum::<usize>() * heads;
        let mut probs = Vec::with_capacity(total);
        let mut scores = Vec::new();
        for s in segments {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..s.q_len {
                    let qrow = &qd[(s.q_start + i) * d + off..(s.q_start + i) * d + off + dh];
                    scores.clear();
                    for j in 0..s.k_len {
                        if s.allowed(i, j) {
                            let krow =
                                &kd[(s.k_start + j) * d + off..(s.k_start + j) * d + off + dh];
                            let dot: f64 = qrow.iter().zip(krow).map(|(a, b)| a * b).sum();
                            scores.push(dot * scale);
                        } else {
                            scores.push(f64::NEG_INFINITY);
                        }
                    }
                    softmax_in_place(&mut scores);
                    let orow = &mut out[(s.q_start + i) * d + off..(s.q_start + i) * d + off + dh];
                    for (j, &p) in scores.iter().enumerate() {
                        if p != 0.0 {
                            let vrow =
                                &vd[(s.k_start + j) * d + off..(s.k_start + j) * d + off + dh];
                            for (o, x) in orow.iter_mut().zip(vrow) {
                                *o += p * x;
                            }
                        }
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        let out = Tensor::new(sq[0], d, out)?;
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a `1 × 1` loss. Gradients of trainable parameter
    /// leaves are added to `store` (repeated calls accumulate until
    /// [`ParamStore::zero_grad`]); gradients of plain inputs created with
    /// `requires_grad` are returned.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Grads> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Grads::default());
        }
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Grads::default();
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads)?;
            if let Op::Leaf(param) = node.op {
                match param {
                    Some(id) => store.accumulate_grad(id, &g),
                    None => {
                        let [r, c] = node.value.shape();
                        out.leaves.push((Var(idx), Tensor::new(r, c, g)?));
                    }
                }
            }
        }
        Ok(out)
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf(_) => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(ga) = self.acc(grads, v) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRow(x, row) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                let cols = y.cols();
                if let Some(gr) = self.acc(grads, *row) {
                    for chunk in g.chunks(cols) {
                        gr.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * vb[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * va[i];
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b * s);
                }
            }
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let [m, k] = logical_shape(va, *ta);
                let n = logical_shape(vb, *tb)[1];
                let (rsa, csa) = strides(va, *ta);
                let (rsb, csb) = strides(vb, *tb);
                if let Some(ga) = self.acc(grads, *a) {
                    // d op(A) = dC · op(B)ᵀ
                    gemm(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        vb.data(),
                        (csb, rsb),
                        ga,
                        (rsa, csa),
                        1.0,
                    );
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // d op(B) = op(A)ᵀ · dC
                    gemm(
                        k,
                        m,
                        n,
                        va.data(),
                        (csa, rsa),
                        g,
                        (n as isize, 1),
                        gb,
                        (rsb, csb),
                        1.0,
                    );
                }
            }
            Op::Transpose(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let (r, c) = (y.rows(), y.cols());
                    for i in 0..r {
                        for j in 0..c {
                            gx[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    if let Some(gp) = self.acc(grads, *p) {
                        gp.iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(a, b)| *a += b);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                if let Some(ga) = self.acc(grads, *a) {
                    for (r, chunk) in g.chunks(ca + cb).enumerate() {
                        ga[r * ca..(r + 1) * ca]
                            .iter_mut()
                            .zip(&chunk[..ca])
                            .for_each(|(x, y)| *x += y);
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (r, chunk) in g.chunks(ca + cb).enumerate() {
                        gb[r * cb..(r + 1) * cb]
                            .iter_mut()
                            .zip(&chunk[ca..])
                            .for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::SliceRows { x, start } => {
                let cols = y.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    gx[start * cols..start * cols + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, b)| *a += b);
                }
            }
            Op::GatherRows { x, index } => {
                let cols = y.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &i) in index.iter().enumerate() {
                        gx[i * cols..(i + 1) * cols]
                            .iter_mut()
                            .zip(&g[r * cols..(r + 1) * cols])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::MeanRows { x, group } => {
                let cols = y.cols();
                let inv = 1.0 / *group as f64;
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, chunk) in gx.chunks_mut(cols).enumerate() {
                        let src = &g[(r / group) * cols..(r / group + 1) * cols];
                        chunk.iter_mut().zip(src).for_each(|(a, b)| *a += b * inv);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::L2Normalize { x, norms } => {
                let xv = self.value(*x).data();
                let cols = y.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &n) in norms.iter().enumerate() {
                        let s = n + NORMALIZE_EPS;
                        let xr = &xv[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        let coef = if n > 0.0 { dot / (s * s * n) } else { 0.0 };
                        for c in 0..cols {
                            gx[r * cols + c] += gr[c] / s - xr[c] * coef;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = y.cols();
                let gam = self.value(*gamma).data();
                if let Some(gg) = self.acc(grads, *gamma) {
                    for (i, (gv, xh)) in g.iter().zip(xhat).enumerate() {
                        gg[i % d] += gv * xh;
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for (i, gv) in g.iter().enumerate() {
                        gb[i % d] += gv;
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut sum_dy = 0.0;
                        let mut sum_dy_x = 0.0;
                        for c in 0..d {
                            let dy = gr[c] * gam[c];
                            sum_dy += dy;
                            sum_dy_x += dy * xr[c];
                        }
                        let inv_d = 1.0 / d as f64;
                        for c in 0..d {
                            let dy = gr[c] * gam[c];
                            gx[r * d + c] += rs * (dy - inv_d * sum_dy - xr[c] * inv_d * sum_dy_x);
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * gelu_grad(xv[i]);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (i, &s) in y.data().iter().enumerate() {
                        gx[i] += g[i] * s * (1.0 - s);
                    }
                }
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..gx.len() {
                        if xv[i] >= *lo && xv[i] <= *hi {
                            gx[i] += g[i];
                        }
                    }
                }
            }
            Op::Dropout { x, mask } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..gx.len() {
                        gx[i] += g[i] * mask[i];
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let cols = y.cols();
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, yr) in y.data().chunks(cols).enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c in 0..cols {
                            gx[r * cols + c] += yr[c] * (gr[c] - dot);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let classes = self.value(*logits).cols();
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..classes {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            gl[r * classes + c] += g[0] * (probs[r * classes + c] - onehot);
                        }
                    }
                }
            }
            Op::Bce { p, targets } => {
                let pv = self.value(*p).data();
                let m = targets.len() as f64;
                if let Some(gp) = self.acc(grads, *p) {
                    for i in 0..gp.len() {
                        let (pi, yi) = (pv[i], targets[i]);
                        gp[i] += g[0] * (-(yi / pi) + (1.0 - yi) / (1.0 - pi)) / m;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segments,
                probs,
            } => self.attention_backward(g, grads, (*q, *k, *v), *heads, segments, probs),
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
        (q, k, v): (Var, Var, Var),
        heads: usize,
        segments: &[AttnSegment],
        probs: &[f64],
    ) {
        let d = self.shape(q)[1];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let need_q = self.nodes[q.0].requires_grad;
        let need_k = self.nodes[k.0].requires_grad;
        let need_v = self.nodes[v.0].requires_grad;
        let mut gq = need_q.then(|| vec![0.0; qd.len()]);
        let mut gk = need_k.then(|| vec![0.0; kd.len()]);
        let mut gv = need_v.then(|| vec![0.0; vd.len()]);
        let mut dp = Vec::new();
        let mut pos = 0;
        for s in segments {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..s.q_len {
                    let p = &probs[pos..pos + s.k_len];
                    pos += s.k_len;
                    let grow = &g[(s.q_start + i) * d + off..(s.q_start + i) * d + off + dh];
                    dp.clear();
                    for j in 0..s.k_len {
                        let vrow = &vd[(s.k_start + j) * d + off..(s.k_start + j) * d + off + dh];
                        dp.push(grow.iter().zip(vrow).map(|(a, b)| a * b).sum::<f64>());
                        if let Some(gv) = gv.as_mut() {
                            if p[j] != 0.0 {
                                let dst = &mut gv
                                    [(s.k_start + j) * d + off..(s.k_start + j) * d + off + dh];
                                dst.iter_mut().zip(grow).for_each(|(a, b)| *a += p[j] * b);
                            }
                        }
                    }
                    let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                    for j in 0..s.k_len {
                        if p[j] == 0.0 {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        if let Some(gq) = gq.as_mut() {
                            let krow =
                                &kd[(s.k_start + j) * d + off..(s.k_start + j) * d + off + dh];
                            let dst =
                                &mut gq[(s.q_start + i) * d + off..(s.q_start + i) * d + off + dh];
                            dst.iter_mut().zip(krow).for_each(|(a, b)| *a += ds * b);
                        }
                        if let Some(gk) = gk.as_mut() {
                            let qrow =
                                &qd[(s.q_start + i) * d + off..(s.q_start + i) * d + off + dh];
                            let dst =
                                &mut gk[(s.k_start + j) * d + off..(s.k_start + j) * d + off + dh];
                            dst.iter_mut().zip(qrow).for_each(|(a, b)| *a += ds * b);
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(local) = local {
                let dst = self.acc(grads, var).expect("requires grad");
                dst.iter_mut().zip(&local).for_each(|(a, b)| *a += b);
            }
        }
    }
}
