//! Run configuration and its flat `key = value` text form.
//!
//! Keys are dotted paths into [`RunConfig`] (`stage2.steps`, `model.qformer.num_queries`).
//! Values are JSON literals; bare words are read as strings. Lines starting with `#` are ignored.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::{CorpusConfig, Task};
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::model::{Branches, ModelConfig};
use crate::objectives::LossWeights;
use crate::optim::OptimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ablation {
    #[default]
    None,
    VisionOnly,
    TactileOnly,
    NoStage1,
}

impl Ablation {
    pub fn parse(s: &str) -> Option<Self> {
        serde_json::from_value(Value::String(s.to_string())).ok()
    }

    pub fn name(self) -> &'static str {
        match self {
            Ablation::None => "none",
            Ablation::VisionOnly => "vision-only",
            Ablation::TactileOnly => "tactile-only",
            Ablation::NoStage1 => "no-stage1",
        }
    }

    pub fn branches(self) -> Branches {
        match self {
            Ablation::VisionOnly => Branches {
                vision: true,
                tactile: false,
            },
            Ablation::TactileOnly => Branches {
                vision: false,
                tactile: true,
            },
            _ => Branches::BOTH,
        }
    }
}

/// Adam constants shared by every stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        let o = OptimConfig::default();
        Self {
            weight_decay: o.weight_decay,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub steps: usize,
    pub batch: usize,
    /// Validation cadence in optimizer steps; one "epoch" in the reports.
    pub eval_every: usize,
    pub peak_lr: f64,
    pub warmup_lr: f64,
    pub warmup_steps: usize,
}

impl StageConfig {
    fn with_steps(steps: usize, eval_every: usize) -> Self {
        let o = OptimConfig::default();
        Self {
            steps,
            batch: 32,
            eval_every,
            peak_lr: o.peak_lr,
            warmup_lr: o.warmup_lr,
            warmup_steps: o.warmup_steps,
        }
    }

    pub fn optim(&self, adam: &AdamConfig) -> OptimConfig {
        OptimConfig {
            peak_lr: self.peak_lr,
            warmup_lr: self.warmup_lr,
            warmup_steps: self.warmup_steps,
            weight_decay: adam.weight_decay,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
        }
    }

    fn check(&self, name: &str) -> Result<()> {
        if self.batch == 0 || self.eval_every == 0 {
            return Err(Error::config(format!(
                "{name}: batch and eval_every must be positive"
            )));
        }
        Ok(())
    }
}

/// Language warmup of the decoder on template text.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarmupConfig {
    pub objects: usize,
    pub stage: StageConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub max_new: usize,
    pub batch: usize,
    pub retrieval_batch: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_new: 8,
            batch: 64,
            retrieval_batch: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub ablation: Ablation,
    pub data: CorpusConfig,
    /// Defect-only corpus for few-shot adaptation.
    pub defect_data: CorpusConfig,
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub loss: LossWeights,
    pub optim: AdamConfig,
    pub warmup: WarmupConfig,
    pub stage1: StageConfig,
    pub stage2: StageConfig,
    pub stage3: StageConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let defect_data = CorpusConfig {
            n_objects: 160,
            seed: 107,
            tasks: vec![Task::Defect],
            split_ratios: [0.6, 0.1, 0.3],
            ..CorpusConfig::default()
        };
        Self {
            seed: 7,
            ablation: Ablation::None,
            data: CorpusConfig::default(),
            defect_data,
            model: ModelConfig::default(),
            lora: LoraConfig::default(),
            loss: LossWeights::default(),
            optim: AdamConfig::default(),
            warmup: WarmupConfig {
                objects: 400,
                stage: StageConfig {
                    peak_lr: 1e-3,
                    warmup_steps: 100,
                    ..StageConfig::with_steps(1500, 500)
                },
            },
            stage1: StageConfig::with_steps(2000, 500),
            stage2: StageConfig::with_steps(4000, 500),
            stage3: StageConfig::with_steps(500, 500),
            eval: EvalConfig::default(),
        }
    }
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, Value)>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() {
                    k.clone()
                } else {
                    format!("{prefix}.{k}")
                };
                flatten(&key, v, out);
            }
        }
        _ => out.push((prefix.to_string(), v.clone())),
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut at = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj: &mut Map<String, Value> = at
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("unknown key `{key}`")))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| Error::config(format!("unknown key `{key}`")))?;
        if i + 1 == parts.len() {
            if slot.is_object() {
                return Err(Error::config(format!("`{key}` is a section, not a value")));
            }
            *slot = value;
            return Ok(());
        }
        at = slot;
    }
    Err(Error::config("empty key"))
}

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn check(&self) -> Result<()> {
        self.data.check()?;
        self.defect_data.check()?;
        self.model.check()?;
        self.loss.check()?;
        for (name, s) in [
            ("warmup", &self.warmup.stage),
            ("stage1", &self.stage1),
            ("stage2", &self.stage2),
            ("stage3", &self.stage3),
        ] {
            s.check(name)?;
            s.optim(&self.optim).check()?;
        }
        if self.eval.max_new == 0 || self.eval.batch == 0 || self.eval.retrieval_batch == 0 {
            return Err(Error::config("eval sizes must be positive"));
        }
        if self.lora.rank == 0 || !(0.0..1.0).contains(&self.lora.dropout) {
            return Err(Error::config(
                "lora rank must be positive and dropout in [0,1)",
            ));
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`.
    pub fn apply_text(&self, text: &str) -> Result<Self> {
        let mut tree = serde_json::to_value(self)?;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected `key = value`", n + 1)))?;
            set_path(&mut tree, k.trim(), parse_value(v.trim()))
                .map_err(|e| Error::config(format!("line {}: {e}", n + 1)))?;
        }
        let cfg: RunConfig =
            serde_json::from_value(tree).map_err(|e| Error::config(e.to_string()))?;
        cfg.check()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::default().apply_text(&fs::read_to_string(path)?)
    }

    /// Every key with its current value, one `key = value` line each.
    pub fn to_text(&self) -> Result<String> {
        let mut flat = Vec::new();
        flatten("", &serde_json::to_value(self)?, &mut flat);
        Ok(flat
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect())
    }
}
