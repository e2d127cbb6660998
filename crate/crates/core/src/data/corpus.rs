//! Corpus generation, JSONL I/O, validation and K-shot sampling.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::labels::{
    descriptor_vocabulary, descriptors, project_label, Granularity, Hardness, Material, Roughness,
};
use super::render::{render_tactile, render_vision, ObjectSpec, RenderConfig, Shape};
use super::templates::Task;
use crate::error::{Error, Result};
use crate::image::ImageObs;

pub const FINE_DEFECTS: [&str; 4] = [
    "Scratch-Surface",
    "Scratch-Edge",
    "Dent-Surface",
    "Dent-Edge",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatentObject {
    pub hardness: Hardness,
    pub roughness: Roughness,
    pub descriptors: Vec<String>,
    pub defect: String,
}

impl LatentObject {
    pub fn material(&self) -> Option<Material> {
        self.descriptors.get(1).and_then(|w| Material::from_word(w))
    }

    /// Alignment caption, built from the descriptors so that it survives a JSONL round trip.
    pub fn caption(&self) -> String {
        match self.descriptors.as_slice() {
            [color, material, _, texture, finish] => {
                format!("{color} {material} with {finish} {texture} surface")
            }
            other => other.join(" "),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: u64,
    pub object_id: u64,
    pub task: Task,
    pub instruction: String,
    pub answer: String,
    pub vision: ImageObs,
    pub tactile: ImageObs,
    pub labels: LatentObject,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub n_objects: usize,
    pub samples_per_object: usize,
    pub seed: u64,
    pub split_ratios: [f64; 3],
    pub tasks: Vec<Task>,
    pub image_size: usize,
    pub p_vis: f64,
    pub p_tac: f64,
    pub noise: f64,
    pub normal_prob: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_objects: 64,
            samples_per_object: 5,
            seed: 7,
            split_ratios: [0.7, 0.15, 0.15],
            tasks: Task::ALL.to_vec(),
            image_size: 32,
            p_vis: 0.6,
            p_tac: 0.95,
            noise: 0.02,
            normal_prob: 0.2,
        }
    }
}

impl CorpusConfig {
    pub fn check(&self) -> Result<()> {
        let sum: f64 = self.split_ratios.iter().sum();
        if self.split_ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "split ratios {:?} must be in [0,1] and sum to 1",
                self.split_ratios
            )));
        }
        if self.n_objects == 0 || self.samples_per_object == 0 || self.tasks.is_empty() {
            return Err(Error::config(
                "corpus needs at least one object, sample and task",
            ));
        }
        for (name, p) in [
            ("p_vis", self.p_vis),
            ("p_tac", self.p_tac),
            ("normal_prob", self.normal_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} = {p} is not a probability")));
            }
        }
        if self.image_size < 8 || self.noise.is_nan() || self.noise < 0.0 {
            return Err(Error::config("image_size must be >= 8 and noise >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub rows: usize,
    pub counts: BTreeMap<String, usize>,
    pub seed: u64,
    pub config: CorpusConfig,
    pub content_hash: String,
    /// Optional external image paths keyed by row id.
    #[serde(default)]
    pub images: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub rows: Vec<SampleRecord>,
}

fn object_split(cfg: &CorpusConfig) -> Vec<Split> {
    let n = cfg.n_objects;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let order = sample(&mut rng, n, n).into_vec();
    let n_train = (cfg.split_ratios[0] * n as f64).round() as usize;
    let n_val = ((cfg.split_ratios[1] * n as f64).round() as usize).min(n - n_train.min(n));
    let mut split = vec![Split::Test; n];
    for (rank, &obj) in order.iter().enumerate() {
        split[obj] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }
    split
}

fn sample_object<R: Rng + ?Sized>(cfg: &CorpusConfig, rng: &mut R) -> ObjectSpec {
    let material = Material::ALL[rng.gen_range(0..Material::ALL.len())];
    let hardness = Hardness::ALL[rng.gen_range(0..2)];
    let roughness = Roughness::ALL[rng.gen_range(0..3)];
    let shape = if rng.gen_bool(0.5) {
        Shape::Disc
    } else {
        Shape::Square
    };
    let defect = if rng.gen_bool(cfg.normal_prob) {
        "Normal"
    } else {
        FINE_DEFECTS[rng.gen_range(0..FINE_DEFECTS.len())]
    };
    ObjectSpec {
        material,
        hardness,
        roughness,
        shape,
        defect,
    }
}

pub fn latent_of(spec: &ObjectSpec) -> LatentObject {
    LatentObject {
        hardness: spec.hardness,
        roughness: spec.roughness,
        descriptors: descriptors(spec.material, spec.hardness, spec.roughness)
            .iter()
            .map(|s| s.to_string())
            .collect(),
        defect: spec.defect.to_string(),
    }
}

/// Random object specs drawn from the same prior as the corpus, on their own stream.
pub fn sample_specs(cfg: &CorpusConfig, n: usize, stream: u64) -> Vec<ObjectSpec> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(stream);
    (0..n).map(|_| sample_object(cfg, &mut rng)).collect()
}

impl Corpus {
    pub fn generate(cfg: &CorpusConfig) -> Result<Self> {
        cfg.check()?;
        let split = object_split(cfg);
        let render = RenderConfig {
            size: cfg.image_size,
            noise: cfg.noise,
        };
        let mut rows = Vec::with_capacity(cfg.n_objects * cfg.tasks.len() * cfg.samples_per_object);
        for (obj, &obj_split) in split.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(obj as u64 + 1);
            let spec = sample_object(cfg, &mut rng);
            let labels = latent_of(&spec);
            let defective = spec.defect != "Normal";
            for &task in &cfg.tasks {
                for _ in 0..cfg.samples_per_object {
                    let templates = task.instructions();
                    let instruction = templates[rng.gen_range(0..templates.len())].to_string();
                    let cue_v = defective && rng.gen_bool(cfg.p_vis);
                    let cue_t = defective && rng.gen_bool(cfg.p_tac);
                    let vision = render_vision(&spec, cue_v, &render, &mut rng);
                    let tactile = render_tactile(&spec, cue_t, &render, &mut rng);
                    rows.push(SampleRecord {
                        id: rows.len() as u64,
                        object_id: obj as u64,
                        task,
                        instruction,
                        answer: task.answer(&labels),
                        vision,
                        tactile,
                        labels: labels.clone(),
                        split: obj_split,
                    });
                }
            }
        }
        Ok(Self { rows })
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn manifest(&self, cfg: &CorpusConfig, jsonl: &str) -> Manifest {
        let mut counts = BTreeMap::new();
        for r in &self.rows {
            *counts
                .entry(format!("split.{}", r.split.name()))
                .or_insert(0) += 1;
            *counts.entry(format!("task.{}", r.task.name())).or_insert(0) += 1;
        }
        counts.insert(
            "objects".into(),
            self.rows
                .iter()
                .map(|r| r.object_id)
                .collect::<BTreeSet<_>>()
                .len(),
        );
        Manifest {
            rows: self.rows.len(),
            counts,
            seed: cfg.seed,
            config: cfg.clone(),
            content_hash: content_hash(jsonl.as_bytes()),
            images: BTreeMap::new(),
        }
    }

    /// Writes `corpus.jsonl` and `manifest.json` into `dir`; returns the JSONL path.
    pub fn write(&self, cfg: &CorpusConfig, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let jsonl = self.to_jsonl()?;
        let manifest = self.manifest(cfg, &jsonl);
        let path = dir.join("corpus.jsonl");
        fs::write(&path, &jsonl)?;
        fs::write(
            dir.join("manifest.json"),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file =
            fs::File::open(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let row: SampleRecord = serde_json::from_str(&line)
                .map_err(|e| Error::data(format!("{}:{}: {e}", path.display(), i + 1)))?;
            rows.push(row);
        }
        Ok(Self { rows })
    }

    pub fn split(&self, split: Split) -> Vec<&SampleRecord> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }
}

pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub line: usize,
    pub id: Option<u64>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ValidationReport {
    pub rows: usize,
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

fn check_record(r: &SampleRecord, vocab: &BTreeSet<&str>) -> Vec<String> {
    let mut v = Vec::new();
    let l = &r.labels;
    if l.descriptors.len() != 5 {
        v.push(format!(
            "expected 5 descriptors, found {}",
            l.descriptors.len()
        ));
    }
    for d in &l.descriptors {
        if !vocab.contains(d.as_str()) {
            v.push(format!(
                "descriptor `{d}` is not in the controlled vocabulary"
            ));
        }
    }
    if project_label(&l.defect, Granularity::Five).is_err() {
        v.push(format!(
            "defect label `{}` is not in the 5-way taxonomy",
            l.defect
        ));
    }
    if r.instruction.trim().is_empty() {
        v.push("empty instruction".into());
    }
    let expected = r.task.answer(l);
    if r.answer != expected {
        v.push(format!(
            "answer `{}` disagrees with labels (expected `{expected}`)",
            r.answer
        ));
    }
    for (name, img) in [("vision", &r.vision), ("tactile", &r.tactile)] {
        if !img.in_unit_range() {
            v.push(format!("{name} array has values outside [0,1]"));
        }
    }
    v
}

/// Schema and invariant check of a JSONL corpus file.
pub fn validate(path: &Path) -> Result<ValidationReport> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::data(format!("{}: {e}", path.display())))?;
    let vocab: BTreeSet<&str> = descriptor_vocabulary().into_iter().collect();
    let mut report = ValidationReport::default();
    let mut owner: BTreeMap<u64, Split> = BTreeMap::new();
    let mut ids = BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        report.rows += 1;
        let line_no = i + 1;
        let mut push = |id: Option<u64>, message: String| {
            report.violations.push(Violation {
                line: line_no,
                id,
                message,
            })
        };
        let record: SampleRecord = match serde_json::from_str(line) {
            Ok(r) => r,
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(serde_json::Value::as_u64));
                push(id, format!("schema: {e}"));
                continue;
            }
        };
        if !ids.insert(record.id) {
            push(Some(record.id), "duplicate id".into());
        }
        for m in check_record(&record, &vocab) {
            push(Some(record.id), m);
        }
        match owner.get(&record.object_id) {
            Some(&s) if s != record.split => push(
                Some(record.id),
                format!(
                    "object {} appears in both {} and {}",
                    record.object_id,
                    s.name(),
                    record.split.name()
                ),
            ),
            Some(_) => {}
            None => {
                owner.insert(record.object_id, record.split);
            }
        }
    }
    Ok(report)
}

/// Exactly `k` training rows per category of the taxonomy, drawn without replacement.
/// Rows are returned as indices into `rows`, grouped by category in taxonomy order.
/// Under one seed, the draw for a smaller `k` is a subset of the draw for a larger one.
pub fn kshot_sample(
    rows: &[SampleRecord],
    g: Granularity,
    k: usize,
    seed: u64,
) -> Result<Vec<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(k * g.count());
    for &category in g.labels() {
        let pool: Vec<usize> = rows
            .iter()
            .enumerate()
            .filter(|(_, r)| r.split == Split::Train && r.task == Task::Defect)
            .filter(|(_, r)| {
                project_label(&r.labels.defect, g)
                    .map(|l| l == category)
                    .unwrap_or(false)
            })
            .map(|(i, _)| i)
            .collect();
        if pool.len() < k {
            return Err(Error::Availability {
                category: category.to_string(),
                k,
                available: pool.len(),
            });
        }
        let mut picked: Vec<usize> = sample(&mut rng, pool.len(), pool.len())
            .into_iter()
            .take(k)
            .map(|j| pool[j])
            .collect();
        picked.sort_unstable();
        out.extend(picked);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            n_objects: 10,
            image_size: 16,
            ..CorpusConfig::default()
        }
    }

    #[test]
    fn row_count_arithmetic() {
        let c = Corpus::generate(&small()).unwrap();
        assert_eq!(c.rows.len(), 200);
        assert!(c.rows.iter().all(|r| r.vision.height() == 16));
    }

    #[test]
    fn invalid_ratios_rejected() {
        let cfg = CorpusConfig {
            split_ratios: [0.5, 0.3, 0.3],
            ..small()
        };
        assert!(matches!(Corpus::generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn splits_are_object_disjoint() {
        let c = Corpus::generate(&CorpusConfig::default()).unwrap();
        let mut owner = BTreeMap::new();
        for r in &c.rows {
            assert_eq!(*owner.entry(r.object_id).or_insert(r.split), r.split);
        }
        let n_train = owner.values().filter(|s| **s == Split::Train).count();
        assert_eq!(n_train, 45);
    }

    #[test]
    fn captions_match_descriptors() {
        let c = Corpus::generate(&small()).unwrap();
        let l = &c.rows[0].labels;
        let m = l.material().unwrap();
        assert_eq!(
            l.caption(),
            super::super::templates::caption(m, l.roughness)
        );
    }
}
