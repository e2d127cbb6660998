//! Learnable-query transformers per modality, shared-space projections and prefix mapping.

use serde::{Deserialize, Serialize};
use vtl_tensor::{AttnSegment, Graph, ParamId, ParamStore, Tensor, Var};

use crate::encoders::{Modality, TokenSeq};
use crate::error::{Error, Result};
use crate::nn::{Attention, Builder, Ctx, FeedForward, LayerNorm, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QFormerConfig {
    pub num_queries: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub shared_dim: usize,
    pub renormalize_pool: bool,
}

impl Default for QFormerConfig {
    fn default() -> Self {
        Self {
            num_queries: 8,
            width: 64,
            depth: 2,
            heads: 4,
            shared_dim: 64,
            renormalize_pool: false,
        }
    }
}

impl QFormerConfig {
    pub fn check(&self) -> Result<()> {
        if self.num_queries == 0
            || self.width == 0
            || self.depth == 0
            || self.heads == 0
            || self.shared_dim == 0
        {
            return Err(Error::config("query transformer sizes must be positive"));
        }
        if self.width % self.heads != 0 {
            return Err(Error::config(
                "query width must be divisible by the head count",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct QFormerBlock {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub cross_attn: Attention,
    pub ln_ff: LayerNorm,
    pub ff: FeedForward,
}

#[derive(Debug, Clone)]
pub struct QFormer {
    pub modality: Modality,
    pub cfg: QFormerConfig,
    pub context_width: usize,
    pub queries: ParamId,
    pub blocks: Vec<QFormerBlock>,
    pub ln: LayerNorm,
}

pub fn qformer_prefix(m: Modality) -> String {
    format!("qformer_{}", m.name())
}

impl QFormer {
    pub fn new(
        b: &mut Builder,
        modality: Modality,
        cfg: &QFormerConfig,
        context_width: usize,
    ) -> Result<Self> {
        cfg.check()?;
        let name = qformer_prefix(modality);
        let d = cfg.width;
        let queries = b.randn(&format!("{name}.queries"), cfg.num_queries, d, 1.0)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let p = format!("{name}.blocks.{i}");
            blocks.push(QFormerBlock {
                ln_self: LayerNorm::new(b, &format!("{p}.ln_self"), d)?,
                self_attn: Attention::new(b, &format!("{p}.self_attn"), d, d, cfg.heads)?,
                ln_cross: LayerNorm::new(b, &format!("{p}.ln_cross"), d)?,
                cross_attn: Attention::new(
                    b,
                    &format!("{p}.cross_attn"),
                    d,
                    context_width,
                    cfg.heads,
                )?,
                ln_ff: LayerNorm::new(b, &format!("{p}.ln_ff"), d)?,
                ff: FeedForward::new(b, &format!("{p}.ff"), d, 4 * d)?,
            });
        }
        Ok(Self {
            modality,
            cfg: *cfg,
            context_width,
            queries,
            blocks,
            ln: LayerNorm::new(b, &format!("{name}.ln"), d)?,
        })
    }

    /// Query states for a batch of `batch` token sequences of `per_item` rows each.
    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        ctx: &mut Ctx,
        tokens: Var,
        batch: usize,
        per_item: usize,
    ) -> Result<Var> {
        let [rows, cols] = g.shape(tokens);
        if rows != batch * per_item || cols != self.context_width {
            return Err(Error::Tensor(vtl_tensor::TensorError::Shape {
                op: "query transformer context",
                lhs: [rows, cols],
                rhs: [batch * per_item, self.context_width],
            }));
        }
        let lq = self.cfg.num_queries;
        let q0 = g.param(s, self.queries);
        let tiled: Vec<usize> = (0..batch).flat_map(|_| 0..lq).collect();
        let mut x = g.gather_rows(q0, &tiled)?;
        let self_segs: Vec<_> = (0..batch)
            .map(|i| AttnSegment::full(i * lq, lq, i * lq, lq))
            .collect();
        let cross_segs: Vec<_> = (0..batch)
            .map(|i| AttnSegment::full(i * lq, lq, i * per_item, per_item))
            .collect();
        for blk in &self.blocks {
            let h = blk.ln_self.forward(g, s, x)?;
            let a = blk.self_attn.forward(g, s, ctx, h, h, &self_segs)?;
            x = g.add(x, a)?;
            let h = blk.ln_cross.forward(g, s, x)?;
            let a = blk.cross_attn.forward(g, s, ctx, h, tokens, &cross_segs)?;
            x = g.add(x, a)?;
            let h = blk.ln_ff.forward(g, s, x)?;
            let f = blk.ff.forward(g, s, ctx, h)?;
            x = g.add(x, f)?;
        }
        self.ln.forward(g, s, x)
    }

    pub fn extract_queries(&self, s: &ParamStore, e: &TokenSeq) -> Result<Tensor> {
        if e.modality != self.modality {
            return Err(Error::contract(format!(
                "{} query transformer fed {} tokens",
                self.modality.name(),
                e.modality.name()
            )));
        }
        let mut g = Graph::inference();
        let t = g.constant(e.tokens.clone());
        let out = self.forward(&mut g, s, &mut Ctx::eval(), t, 1, e.tokens.rows())?;
        Ok(g.value(out).clone())
    }
}

/// Row-wise mean over consecutive groups of `group` rows.
pub fn pool(g: &mut Graph, qhat: Var, group: usize, renormalize: bool) -> Result<Var> {
    let [rows, _] = g.shape(qhat);
    if group == 0 || rows % group != 0 {
        return Err(Error::contract(format!(
            "cannot pool {rows} rows in groups of {group}"
        )));
    }
    let p = g.mean_rows_grouped(qhat, group)?;
    Ok(if renormalize {
        g.l2_normalize_rows(p)
    } else {
        p
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixTokens {
    pub tokens: Tensor,
    pub num_queries: usize,
}

#[derive(Debug, Clone)]
pub struct SharedSpace {
    pub num_queries: usize,
    pub renormalize_pool: bool,
    pub proj_vision: Linear,
    pub proj_tactile: Linear,
    pub proj_text: Linear,
    pub llm_vision: Linear,
    pub llm_tactile: Linear,
    pub placeholder_vision: ParamId,
    pub placeholder_tactile: ParamId,
}

impl SharedSpace {
    pub fn new(b: &mut Builder, cfg: &QFormerConfig, d_text: usize, d_llm: usize) -> Result<Self> {
        let (dq, d, lq) = (cfg.width, cfg.shared_dim, cfg.num_queries);
        Ok(Self {
            num_queries: lq,
            renormalize_pool: cfg.renormalize_pool,
            proj_vision: Linear::new(b, "shared.proj_vision", dq, d, false)?,
            proj_tactile: Linear::new(b, "shared.proj_tactile", dq, d, false)?,
            proj_text: Linear::new(b, "shared.proj_text", d_text, d, false)?,
            llm_vision: Linear::new(b, "prefix.llm_vision", dq, d_llm, true)?,
            llm_tactile: Linear::new(b, "prefix.llm_tactile", dq, d_llm, true)?,
            placeholder_vision: b.randn("prefix.placeholder_vision", lq, d_llm, 0.02)?,
            placeholder_tactile: b.randn("prefix.placeholder_tactile", lq, d_llm, 0.02)?,
        })
    }

    /// Maps query states into the shared space with unit rows.
    pub fn project_normalize(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        ctx: &mut Ctx,
        q: Var,
        m: Modality,
    ) -> Result<Var> {
        let proj = match m {
            Modality::Vision => &self.proj_vision,
            Modality::Tactile => &self.proj_tactile,
            Modality::Text => &self.proj_text,
        };
        let z = proj.forward(g, s, ctx, q)?;
        Ok(g.l2_normalize_rows(z))
    }

    pub fn project_text(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        ctx: &mut Ctx,
        cls: Var,
    ) -> Result<Var> {
        self.project_normalize(g, s, ctx, cls, Modality::Text)
    }

    pub fn pool(&self, g: &mut Graph, qhat: Var) -> Result<Var> {
        pool(g, qhat, self.num_queries, self.renormalize_pool)
    }

    /// Decoder prefix for a batch: per sample, `L_q` vision rows then `L_q` tactile rows.
    /// A missing modality is filled with its learned placeholder bank.
    pub fn to_prefix(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        ctx: &mut Ctx,
        qv: Option<Var>,
        qt: Option<Var>,
        batch: usize,
    ) -> Result<Var> {
        let lq = self.num_queries;
        let tiled: Vec<usize> = (0..batch).flat_map(|_| 0..lq).collect();
        let mut half = |q: Option<Var>, lin: &Linear, placeholder: ParamId| -> Result<Var> {
            match q {
                Some(q) => {
                    let [rows, _] = g.shape(q);
                    if rows != batch * lq {
                        return Err(Error::contract(format!(
                            "expected {} query rows, got {rows}",
                            batch * lq
                        )));
                    }
                    lin.forward(g, s, ctx, q)
                }
                None => {
                    let p = g.param(s, placeholder);
                    Ok(g.gather_rows(p, &tiled)?)
                }
            }
        };
        let pv = half(qv, &self.llm_vision, self.placeholder_vision)?;
        let pt = half(qt, &self.llm_tactile, self.placeholder_tactile)?;
        let both = g.concat_rows(&[pv, pt])?;
        let order: Vec<usize> = (0..batch)
            .flat_map(|i| {
                (i * lq..(i + 1) * lq).chain(batch * lq + i * lq..batch * lq + (i + 1) * lq)
            })
            .collect();
        Ok(g.gather_rows(both, &order)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_examples() {
        let mut g = Graph::inference();
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap());
        let p = pool(&mut g, x, 2, false).unwrap();
        assert_eq!(g.value(p).data(), &[0.5, 0.5]);
        let norm = g.value(p).data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 0.5f64.sqrt()).abs() < 1e-15);
        let r = pool(&mut g, x, 2, true).unwrap();
        assert!((g.value(r).get(0, 0) - 0.5f64.sqrt()).abs() < 1e-9);
        assert!(pool(&mut g, x, 3, false).is_err());
    }
}
