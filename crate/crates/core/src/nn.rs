//! Layers shared by the encoders, the query transformers and the decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vtl_tensor::{AttnSegment, Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::Result;
use crate::lora::LoraAdapter;

/// Forward-pass mode. Dropout draws from the context's generator in training mode.
pub struct Ctx {
    pub train: bool,
    rng: ChaCha8Rng,
}

impl Ctx {
    pub fn eval() -> Self {
        Self {
            train: false,
            rng: ChaCha8Rng::seed_from_u64(0),
        }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            train: true,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Registers parameters under a dotted name prefix, drawing initial values from one generator.
pub struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    pub fn param(&mut self, name: &str, value: Tensor, decay: bool) -> Result<ParamId> {
        Ok(self.store.insert(name, value, decay)?)
    }

    pub fn randn(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> Result<ParamId> {
        let t = Tensor::randn(rows, cols, std, self.rng);
        self.param(name, t, true)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
    pub lora: Option<LoraAdapter>,
}

impl Linear {
    /// Weight stored as `out × in`; forward computes `x·Wᵀ + b`.
    pub fn new(
        b: &mut Builder,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = b.randn(
            &format!("{name}.weight"),
            out_dim,
            in_dim,
            (1.0 / in_dim as f64).sqrt(),
        )?;
        let bias = if bias {
            Some(b.param(&format!("{name}.bias"), Tensor::zeros(1, out_dim), false)?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_string(),
            weight,
            bias,
            in_dim,
            out_dim,
            lora: None,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let w = g.param(s, self.weight);
        let mut y = g.matmul_nt(x, w)?;
        if let Some(lora) = &self.lora {
            if !lora.is_merged() {
                let delta = lora.forward(g, s, ctx, x)?;
                y = g.add(y, delta)?;
            }
        }
        if let Some(b) = self.bias {
            let b = g.param(s, b);
            y = g.add_row(y, b)?;
        }
        Ok(y)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.weight];
        p.extend(self.bias);
        if let Some(l) = &self.lora {
            p.extend([l.a, l.b]);
        }
        p
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(b: &mut Builder, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: b.param(&format!("{name}.gamma"), Tensor::filled(1, dim, 1.0), false)?,
            beta: b.param(&format!("{name}.beta"), Tensor::zeros(1, dim), false)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(s, self.gamma), g.param(s, self.beta));
        Ok(g.layer_norm(x, gamma, beta)?)
    }
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new(b: &mut Builder, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            up: Linear::new(b, &format!("{name}.up"), dim, hidden, true)?,
            down: Linear::new(b, &format!("{name}.down"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let h = self.up.forward(g, s, ctx, x)?;
        let h = g.gelu(h);
        self.down.forward(g, s, ctx, h)
    }
}

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new(
        b: &mut Builder,
        name: &str,
        dim: usize,
        ctx_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            q: Linear::new(b, &format!("{name}.q"), dim, dim, true)?,
            k: Linear::new(b, &format!("{name}.k"), ctx_dim, dim, true)?,
            v: Linear::new(b, &format!("{name}.v"), ctx_dim, dim, true)?,
            o: Linear::new(b, &format!("{name}.o"), dim, dim, true)?,
            heads,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        ctx: &mut Ctx,
        x: Var,
        context: Var,
        segments: &[AttnSegment],
    ) -> Result<Var> {
        let q = self.q.forward(g, s, ctx, x)?;
        let k = self.k.forward(g, s, ctx, context)?;
        let v = self.v.forward(g, s, ctx, context)?;
        let a = g.attention(q, k, v, self.heads, segments)?;
        self.o.forward(g, s, ctx, a)
    }

    pub fn projections_mut(&mut self) -> [(&'static str, &mut Linear); 4] {
        [
            ("q", &mut self.q),
            ("k", &mut self.k),
            ("v", &mut self.v),
            ("o", &mut self.o),
        ]
    }

    pub fn projections(&self) -> [&Linear; 4] {
        [&self.q, &self.k, &self.v, &self.o]
    }
}

/// Pre-norm self-attention block.
#[derive(Debug, Clone)]
pub struct Block {
    pub ln1: LayerNorm,
    pub attn: Attention,
    pub ln2: LayerNorm,
    pub ff: FeedForward,
}

impl Block {
    pub fn new(b: &mut Builder, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(b, &format!("{name}.ln1"), dim)?,
            attn: Attention::new(b, &format!("{name}.attn"), dim, dim, heads)?,
            ln2: LayerNorm::new(b, &format!("{name}.ln2"), dim)?,
            ff: FeedForward::new(b, &format!("{name}.ff"), dim, 4 * dim)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        ctx: &mut Ctx,
        x: Var,
        segments: &[AttnSegment],
    ) -> Result<Var> {
        let h = self.ln1.forward(g, s, x)?;
        let a = self.attn.forward(g, s, ctx, h, h, segments)?;
        let x = g.add(x, a)?;
        let h = self.ln2.forward(g, s, x)?;
        let f = self.ff.forward(g, s, ctx, h)?;
        Ok(g.add(x, f)?)
    }
}

/// Fixed sine/cosine position table, `len × dim`.
pub fn sinusoid(len: usize, dim: usize) -> Tensor {
    let mut t = Tensor::zeros(len.max(1), dim);
    for pos in 0..len {
        for i in 0..dim {
            let freq = 1.0 / 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 * freq;
            t.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

/// `sinusoid` rows for each sequence length, stacked.
pub fn stacked_positions(lens: &[usize], dim: usize) -> Tensor {
    let max = lens.iter().copied().max().unwrap_or(0);
    let table = sinusoid(max, dim);
    let total: usize = lens.iter().sum();
    let mut data = Vec::with_capacity(total * dim);
    for &l in lens {
        data.extend_from_slice(&table.data()[..l * dim]);
    }
    Tensor::new(
        total.max(1),
        dim,
        if total == 0 { vec![0.0; dim] } else { data },
    )
    .expect("position table shape")
}
