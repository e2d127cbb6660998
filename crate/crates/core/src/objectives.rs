//! Training losses for the three stages.

use serde::{Deserialize, Serialize};
use vtl_tensor::{Graph, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::nn::{Builder, Ctx, Linear};

pub const PROB_CLIP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_match: f64,
    pub lambda_vt: f64,
    pub tau: f64,
    pub tau_vt: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_match: 1.0,
            lambda_vt: 1.0,
            tau: 0.07,
            tau_vt: 0.07,
        }
    }
}

impl LossWeights {
    pub fn check(&self) -> Result<()> {
        for (name, t) in [("tau", self.tau), ("tau_vt", self.tau_vt)] {
            if t.is_nan() || t <= 0.0 {
                return Err(Error::config(format!("{name} must be positive, got {t}")));
            }
        }
        for (name, l) in [
            ("lambda_match", self.lambda_match),
            ("lambda_vt", self.lambda_vt),
        ] {
            if l.is_nan() || l < 0.0 {
                return Err(Error::config(format!(
                    "{name} must be non-negative, got {l}"
                )));
            }
        }
        Ok(())
    }
}

/// Symmetric in-batch contrastive loss; row `i` of `z` matches row `i` of `t`.
pub fn infonce(g: &mut Graph, z: Var, t: Var, tau: f64) -> Result<Var> {
    if tau.is_nan() || tau <= 0.0 {
        return Err(Error::config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let [n, dz] = g.shape(z);
    let [nt, dt] = g.shape(t);
    if n != nt || dz != dt {
        return Err(Error::Tensor(vtl_tensor::TensorError::Shape {
            op: "infonce",
            lhs: [n, dz],
            rhs: [nt, dt],
        }));
    }
    let diag: Vec<usize> = (0..n).collect();
    let sim = g.matmul_nt(z, t)?;
    let sim = g.scale(sim, 1.0 / tau);
    let sim_t = g.transpose(sim);
    let a = g.cross_entropy_logits(sim, &diag)?;
    let b = g.cross_entropy_logits(sim_t, &diag)?;
    let total = g.add(a, b)?;
    Ok(g.scale(total, 1.0 / (2.0 * n as f64)))
}

pub fn stage1_contrastive(g: &mut Graph, zv: Var, zt: Var, text: Var, tau: f64) -> Result<Var> {
    let a = infonce(g, zv, text, tau)?;
    let b = infonce(g, zt, text, tau)?;
    Ok(g.add(a, b)?)
}

/// For each row, the highest-scoring column other than its own; ties go to the lower index.
/// `None` when the batch has a single row.
pub fn mine_hard_negatives(sim: &Tensor) -> Option<Vec<usize>> {
    let picks = mine_hard_negatives_where(sim, |_, _| true);
    picks.into_iter().collect()
}

/// As `mine_hard_negatives`, restricted to columns where `allowed(i, j)` holds.
pub fn mine_hard_negatives_where(
    sim: &Tensor,
    allowed: impl Fn(usize, usize) -> bool,
) -> Vec<Option<usize>> {
    (0..sim.rows())
        .map(|i| {
            let mut best: Option<usize> = None;
            for j in 0..sim.cols() {
                if j == i || !allowed(i, j) {
                    continue;
                }
                if best.is_none_or(|b| sim.get(i, j) > sim.get(i, b)) {
                    best = Some(j);
                }
            }
            best
        })
        .collect()
}

/// Two-layer matching classifier over `[fused perception ; text]`.
#[derive(Debug, Clone)]
pub struct PtmHead {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl PtmHead {
    pub fn new(b: &mut Builder, dim: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(b, "ptm.fc1", 2 * dim, dim, true)?,
            fc2: Linear::new(b, "ptm.fc2", dim, 1, true)?,
        })
    }

    /// Clipped match probabilities, `M × 1`.
    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        ctx: &mut Ctx,
        fused: Var,
        text: Var,
    ) -> Result<Var> {
        let x = g.concat_cols(fused, text)?;
        let h = self.fc1.forward(g, s, ctx, x)?;
        let h = g.gelu(h);
        let logit = self.fc2.forward(g, s, ctx, h)?;
        let p = g.sigmoid(logit);
        Ok(g.clamp(p, PROB_CLIP, 1.0 - PROB_CLIP))
    }
}

/// Mean binary cross-entropy of match probabilities (clipped to `[1e-7, 1-1e-7]`).
pub fn ptm_loss(g: &mut Graph, p: Var, labels: &[f64]) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::contract("matching batch is empty"));
    }
    let p = g.clamp(p, PROB_CLIP, 1.0 - PROB_CLIP);
    Ok(g.bce(p, labels)?)
}

/// `contrastive + λ·matching`; a missing matching term contributes nothing.
pub fn stage1_loss(
    g: &mut Graph,
    contrastive: Var,
    matching: Option<Var>,
    lambda_match: f64,
) -> Result<Var> {
    match matching {
        Some(m) if lambda_match != 0.0 => {
            let m = g.scale(m, lambda_match);
            Ok(g.add(contrastive, m)?)
        }
        _ => Ok(contrastive),
    }
}

/// Teacher-forced token loss: summed over each sample's target positions, averaged over samples.
/// `logits` stacks every sample's rows in order.
pub fn vqa_loss(g: &mut Graph, logits: Var, targets: &[Vec<usize>]) -> Result<Var> {
    if targets.is_empty() {
        return Err(Error::contract("no samples"));
    }
    if let Some(i) = targets.iter().position(Vec::is_empty) {
        return Err(Error::contract(format!("sample {i} has an empty target")));
    }
    let flat: Vec<usize> = targets.iter().flatten().copied().collect();
    let [rows, _] = g.shape(logits);
    if rows != flat.len() {
        return Err(Error::contract(format!(
            "{rows} logit rows for {} target tokens",
            flat.len()
        )));
    }
    let total = g.cross_entropy_logits(logits, &flat)?;
    Ok(g.scale(total, 1.0 / targets.len() as f64))
}

/// Vision-tactile coupling term.
pub fn coupling_loss(g: &mut Graph, zv: Var, zt: Var, tau_vt: f64) -> Result<Var> {
    infonce(g, zv, zt, tau_vt)
}

/// `vqa + λ·coupling`; a missing coupling term contributes nothing.
pub fn stage2_loss(g: &mut Graph, vqa: Var, coupling: Option<Var>, lambda_vt: f64) -> Result<Var> {
    stage1_loss(g, vqa, coupling, lambda_vt)
}

/// Few-shot defect loss; same arithmetic as `vqa_loss` over label-text targets.
pub fn defect_loss(g: &mut Graph, logits: Var, targets: &[Vec<usize>]) -> Result<Var> {
    vqa_loss(g, logits, targets)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn eval(f: impl FnOnce(&mut Graph) -> Result<Var>) -> f64 {
        let mut g = Graph::inference();
        let v = f(&mut g).unwrap();
        g.value(v).item()
    }

    #[test]
    fn infonce_closed_forms() {
        let one = eval(|g| {
            let z = g.constant(Tensor::row(&[0.3, -0.4]));
            let t = g.constant(Tensor::row(&[0.9, 0.1]));
            infonce(g, z, t, 0.07)
        });
        assert_eq!(one, 0.0);
        let basis = eval(|g| {
            let e = Tensor::identity(2);
            let z = g.constant(e.clone());
            let t = g.constant(e);
            infonce(g, z, t, 1.0)
        });
        assert!((basis - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
        assert!((basis - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn temperature_and_empty_target_errors() {
        let mut g = Graph::inference();
        let z = g.constant(Tensor::row(&[1.0]));
        assert!(matches!(infonce(&mut g, z, z, 0.0), Err(Error::Config(_))));
        let l = g.constant(Tensor::zeros(1, 4));
        assert!(matches!(
            vqa_loss(&mut g, l, &[vec![]]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn mining_rules() {
        let sim = Tensor::from_rows(&[
            vec![9.0, 1.0, 1.0],
            vec![0.0, 9.0, 2.0],
            vec![5.0, 3.0, 9.0],
        ])
        .unwrap();
        assert_eq!(mine_hard_negatives(&sim).unwrap(), vec![1, 2, 0]);
        assert!(mine_hard_negatives(&Tensor::scalar(1.0)).is_none());
    }
}
