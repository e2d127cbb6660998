//! Low-rank adapters on linear projections.

use serde::{Deserialize, Serialize};
use vtl_tensor::{Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, Linear};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Q,
    K,
    V,
    O,
}

impl Projection {
    pub fn name(self) -> &'static str {
        match self {
            Projection::Q => "q",
            Projection::K => "k",
            Projection::V => "v",
            Projection::O => "o",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Q, Self::K, Self::V, Self::O]
            .into_iter()
            .find(|p| p.name() == s)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<Projection>,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 16,
            alpha: 32.0,
            dropout: 0.1,
            targets: vec![Projection::Q, Projection::V],
        }
    }
}

impl LoraConfig {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub target: String,
    /// `rank × in`
    pub a: ParamId,
    /// `out × rank`
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    backup: Option<Tensor>,
}

impl LoraAdapter {
    /// Adds an adapter to `linear`; `B` starts at zero so outputs are unchanged.
    pub fn attach(b: &mut Builder, linear: &mut Linear, cfg: &LoraConfig) -> Result<()> {
        if linear.lora.is_some() {
            return Err(Error::config(format!(
                "`{}` already has an adapter",
                linear.name
            )));
        }
        if cfg.rank == 0
            || cfg.alpha.is_nan()
            || cfg.alpha <= 0.0
            || !(0.0..1.0).contains(&cfg.dropout)
        {
            return Err(Error::config(format!(
                "invalid adapter settings r={} alpha={} dropout={}",
                cfg.rank, cfg.alpha, cfg.dropout
            )));
        }
        let a = b.randn(
            &format!("{}.lora_a", linear.name),
            cfg.rank,
            linear.in_dim,
            (1.0 / linear.in_dim as f64).sqrt(),
        )?;
        let bb = b.param(
            &format!("{}.lora_b", linear.name),
            Tensor::zeros(linear.out_dim, cfg.rank),
            false,
        )?;
        linear.lora = Some(Self {
            target: linear.name.clone(),
            a,
            b: bb,
            rank: cfg.rank,
            alpha: cfg.alpha,
            dropout: cfg.dropout,
            backup: None,
        });
        Ok(())
    }

    /// Re-binds an adapter whose parameters already exist in `store` (checkpoint restore).
    pub fn rebind(
        store: &ParamStore,
        linear: &mut Linear,
        alpha: f64,
        dropout: f64,
    ) -> Result<bool> {
        let (Some(a), Some(b)) = (
            store.id(&format!("{}.lora_a", linear.name)),
            store.id(&format!("{}.lora_b", linear.name)),
        ) else {
            return Ok(false);
        };
        linear.lora = Some(Self {
            target: linear.name.clone(),
            a,
            b,
            rank: store.value(a).rows(),
            alpha,
            dropout,
            backup: None,
        });
        Ok(true)
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn is_merged(&self) -> bool {
        self.backup.is_some()
    }

    /// `(α/r)·B·A`, shaped like the target weight.
    pub fn delta(&self, store: &ParamStore) -> Result<Tensor> {
        let ba = store.value(self.b).matmul(store.value(self.a))?;
        Ok(ba.map(|v| v * self.scale()))
    }

    pub fn forward(&self, g: &mut Graph, s: &ParamStore, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let train = ctx.train;
        let x = g.dropout(x, self.dropout, train, ctx.rng())?;
        let (a, b) = (g.param(s, self.a), g.param(s, self.b));
        let h = g.matmul_nt(x, a)?;
        let h = g.matmul_nt(h, b)?;
        Ok(g.scale(h, self.scale()))
    }

    /// Folds the delta into `weight`, keeping a copy of the base for `unmerge`.
    pub fn merge(&mut self, store: &mut ParamStore, weight: ParamId) -> Result<()> {
        if self.is_merged() {
            return Err(Error::contract(format!(
                "adapter on `{}` is already merged",
                self.target
            )));
        }
        let delta = self.delta(store)?;
        let w = &mut store.get_mut(weight).value;
        self.backup = Some(w.clone());
        for (wv, d) in w.data_mut().iter_mut().zip(delta.data()) {
            *wv += d;
        }
        Ok(())
    }

    pub fn unmerge(&mut self, store: &mut ParamStore, weight: ParamId) -> Result<()> {
        let base = self.backup.take().ok_or_else(|| {
            Error::contract(format!("adapter on `{}` is not merged", self.target))
        })?;
        store.get_mut(weight).value = base;
        Ok(())
    }
}

impl Linear {
    pub fn merge_lora(&mut self, store: &mut ParamStore) -> Result<()> {
        let w = self.weight;
        match &mut self.lora {
            Some(l) => l.merge(store, w),
            None => Ok(()),
        }
    }

    pub fn unmerge_lora(&mut self, store: &mut ParamStore) -> Result<()> {
        let w = self.weight;
        match &mut self.lora {
            Some(l) => l.unmerge(store, w),
            None => Ok(()),
        }
    }
}
