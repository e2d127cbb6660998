//! Task metrics, text-to-label mapping and checkpoint selection.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DefectTaxonomy, Granularity};
use crate::error::{Error, Result};
use crate::vocab::normalize;

/// Outcome of mapping free text onto a closed label set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Mapped {
    Label(&'static str),
    Unmapped,
}

impl Mapped {
    pub fn label(&self) -> Option<&'static str> {
        match self {
            Mapped::Label(l) => Some(l),
            Mapped::Unmapped => None,
        }
    }
}

fn label_words(label: &str) -> Vec<String> {
    normalize(label)
}

/// Maps text to one of `labels`: exact normalized match first, otherwise the label all of
/// whose words occur in the text (most words wins, earlier label on ties), otherwise unmapped.
pub fn map_to_labels(text: &str, labels: &[&'static str]) -> Mapped {
    let words = normalize(text);
    if let Some(l) = labels.iter().find(|l| label_words(l) == words) {
        return Mapped::Label(l);
    }
    let mut best: Option<(&'static str, usize)> = None;
    for &l in labels {
        let lw = label_words(l);
        if lw.iter().all(|w| words.contains(w)) && best.is_none_or(|(_, n)| lw.len() > n) {
            best = Some((l, lw.len()));
        }
    }
    best.map_or(Mapped::Unmapped, |(l, _)| Mapped::Label(l))
}

pub fn map_to_taxonomy(text: &str, taxonomy: &DefectTaxonomy) -> Mapped {
    map_to_labels(text, &taxonomy.labels)
}

/// Exact-match fraction; a `None` prediction is an unmappable answer and counts as wrong.
pub fn accuracy<T: PartialEq>(preds: &[Option<T>], golds: &[T]) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} references",
            preds.len(),
            golds.len()
        )));
    }
    if golds.is_empty() {
        return Ok(0.0);
    }
    let hits = preds
        .iter()
        .zip(golds)
        .filter(|(p, g)| p.as_ref() == Some(*g))
        .count();
    Ok(hits as f64 / golds.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DescriptorSets {
    pub reference: Vec<String>,
    pub predicted: Vec<String>,
}

/// Vocabulary-filtered, duplicate-free words of `text` in first-occurrence order.
pub fn extract_descriptors<S: AsRef<str>>(text: &str, vocabulary: &[S]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for w in normalize(text) {
        if vocabulary.iter().any(|v| v.as_ref() == w) && !out.contains(&w) {
            out.push(w);
        }
    }
    out
}

pub fn descriptor_recall(samples: &[DescriptorSets]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (i, s) in samples.iter().enumerate() {
        if s.reference.is_empty() {
            return Err(Error::contract(format!(
                "sample {i} has no reference descriptors"
            )));
        }
        let hit = s
            .reference
            .iter()
            .filter(|r| s.predicted.contains(r))
            .count();
        total += hit as f64 / s.reference.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

pub trait Embedder {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f64>;
}

/// Signed hashed bag of words.
#[derive(Debug, Clone, Copy)]
pub struct HashedBagOfWords {
    pub dim: usize,
}

impl Default for HashedBagOfWords {
    fn default() -> Self {
        Self { dim: 64 }
    }
}

impl Embedder for HashedBagOfWords {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f64> {
        let mut v = vec![0.0; self.dim];
        for w in normalize(text) {
            let h = Sha256::digest(w.as_bytes());
            let idx = u64::from_le_bytes(h[..8].try_into().expect("8 bytes")) as usize % self.dim;
            v[idx] += if h[8] & 1 == 0 { 1.0 } else { -1.0 };
        }
        v
    }
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

/// Mean cosine between paired texts. Identical texts score 1 even when they embed to zero.
pub fn semantic_similarity<S: AsRef<str>>(
    preds: &[S],
    golds: &[S],
    embedder: &dyn Embedder,
) -> Result<f64> {
    if preds.len() != golds.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} references",
            preds.len(),
            golds.len()
        )));
    }
    if preds.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (p, g) in preds.iter().zip(golds) {
        let (p, g) = (p.as_ref(), g.as_ref());
        let (a, b) = (embedder.embed(p), embedder.embed(g));
        if a.len() != embedder.dim() || b.len() != embedder.dim() {
            return Err(Error::contract(
                "embedder returned a vector of the wrong width",
            ));
        }
        total += if p == g {
            1.0
        } else {
            unit(a)
                .iter()
                .zip(unit(b))
                .map(|(x, y)| x * y)
                .sum::<f64>()
                .clamp(-1.0, 1.0)
        };
    }
    Ok(total / preds.len() as f64)
}

pub fn mean_task_score(hardness_acc: f64, roughness_acc: f64, descriptor_recall: f64) -> f64 {
    (hardness_acc + roughness_acc + descriptor_recall) / 3.0
}

/// Index of the best score; the earliest one wins ties. `None` for an empty history.
pub fn select_checkpoint(scores: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|b| s > scores[b]) {
            best = Some(i);
        }
    }
    best
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub hardness_acc: f64,
    pub roughness_acc: f64,
    pub descriptor_recall: f64,
    pub semantic_sim: f64,
    /// Keyed by class count ("2", "3", "5").
    pub defect_acc: BTreeMap<String, f64>,
    pub n: BTreeMap<String, usize>,
}

pub const CSV_HEADER: &str =
    "epoch,step,hardness_acc,roughness_acc,descriptor_recall,semantic_sim,defect_acc_2,defect_acc_3,defect_acc_5,mean_task_score";

impl MetricReport {
    pub fn mean_task_score(&self) -> f64 {
        mean_task_score(
            self.hardness_acc,
            self.roughness_acc,
            self.descriptor_recall,
        )
    }

    pub fn defect(&self, g: Granularity) -> Option<f64> {
        self.defect_acc.get(&g.count().to_string()).copied()
    }

    pub fn set_defect(&mut self, g: Granularity, acc: f64, n: usize) {
        self.defect_acc.insert(g.count().to_string(), acc);
        self.n.insert(format!("defect_{}", g.count()), n);
    }

    pub fn in_range(&self) -> bool {
        [
            self.hardness_acc,
            self.roughness_acc,
            self.descriptor_recall,
        ]
        .into_iter()
        .chain(self.defect_acc.values().copied())
        .all(|v| (0.0..=1.0).contains(&v))
            && (-1.0..=1.0).contains(&self.semantic_sim)
    }

    /// One CSV line matching `CSV_HEADER`, six decimals, empty cells for absent granularities.
    pub fn csv_row(&self, epoch: usize, step: usize) -> String {
        let mut s = format!(
            "{epoch},{step},{:.6},{:.6},{:.6},{:.6}",
            self.hardness_acc, self.roughness_acc, self.descriptor_recall, self.semantic_sim
        );
        for g in Granularity::ALL {
            match self.defect(g) {
                Some(v) => write!(s, ",{v:.6}").expect("string write"),
                None => s.push(','),
            }
        }
        write!(s, ",{:.6}", self.mean_task_score()).expect("string write");
        s
    }
}
