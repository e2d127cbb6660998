//! Language warmup and the three training stages, with per-epoch validation and reports.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vtl_tensor::{Graph, ParamId, Tensor, Var};

use crate::config::{Ablation, RunConfig, StageConfig};
use crate::data::labels::descriptor_vocabulary;
use crate::data::templates::{defect_answer, defect_prompt, evidence_words};
use crate::data::{
    content_hash, kshot_sample, project_label, sample_specs, Corpus, Granularity, SampleRecord,
    Split, Task,
};
use crate::decoder::{GenerateOptions, WarmupExample, WarmupReport};
use crate::encoders::Modality;
use crate::error::{Error, Result};
use crate::eval::{
    accuracy, descriptor_recall, extract_descriptors, map_to_labels, map_to_taxonomy,
    select_checkpoint, semantic_similarity, DescriptorSets, HashedBagOfWords, MetricReport,
    CSV_HEADER,
};
use crate::model::{components as c, is_adapter, Branches, Model};
use crate::nn::Ctx;
use crate::objectives::{self, mine_hard_negatives_where};
use crate::optim::{lr_at, AdamW};
use crate::vocab::Vocab;

/// Stream reserved for warmup text so it never overlaps corpus objects.
const WARMUP_STREAM: u64 = 1 << 40;

fn derive_seed(seed: u64, tag: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ tag.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

/// Which parameters a stage may update.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StagePlan {
    pub stage: u8,
    pub prefixes: Vec<&'static str>,
    pub adapters_only: bool,
}

impl StagePlan {
    pub fn new(stage: u8, ablation: Ablation) -> Result<Self> {
        let b = ablation.branches();
        let mut p: Vec<&'static str> = Vec::new();
        match stage {
            1 => {
                if b.vision {
                    p.extend([c::QF_VISION, "shared.proj_vision."]);
                }
                if b.tactile {
                    p.extend([c::QF_TACTILE, "shared.proj_tactile."]);
                }
                p.extend(["shared.proj_text.", c::PTM, c::TEXT]);
            }
            2 => {
                if b.vision {
                    p.extend([c::QF_VISION, "shared.proj_vision.", "prefix.llm_vision."]);
                } else {
                    p.push("prefix.placeholder_vision");
                }
                if b.tactile {
                    p.extend([
                        c::QF_TACTILE,
                        "shared.proj_tactile.",
                        "prefix.llm_tactile.",
                        c::TACTILE,
                    ]);
                } else {
                    p.push("prefix.placeholder_tactile");
                }
            }
            3 => {
                return Ok(Self {
                    stage,
                    prefixes: Vec::new(),
                    adapters_only: true,
                })
            }
            _ => return Err(Error::config(format!("no stage {stage}"))),
        }
        Ok(Self {
            stage,
            prefixes: p,
            adapters_only: false,
        })
    }

    pub fn trains(&self, name: &str) -> bool {
        if self.adapters_only {
            is_adapter(name)
        } else {
            !is_adapter(name) && self.prefixes.iter().any(|p| name.starts_with(p))
        }
    }

    /// Marks exactly the planned parameters trainable.
    pub fn apply(&self, model: &mut Model) {
        let ids: Vec<ParamId> = model.store.ids().collect();
        for id in ids {
            let p = model.store.get_mut(id);
            p.trainable = self.trains(&p.name);
        }
    }
}

/// One validation point: an "epoch" is a fixed block of optimizer steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint<M> {
    pub epoch: usize,
    pub step: usize,
    pub train_loss: f64,
    pub score: f64,
    pub metrics: M,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome<M> {
    pub history: Vec<EvalPoint<M>>,
    pub selected: usize,
    pub test: Option<M>,
}

impl<M: Clone> StageOutcome<M> {
    pub fn selected_metrics(&self) -> &M {
        &self.history[self.selected].metrics
    }
}

/// Top-1 cross-modal retrieval on pooled embeddings, per direction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub vision_to_text: Option<f64>,
    pub text_to_vision: Option<f64>,
    pub tactile_to_text: Option<f64>,
    pub text_to_tactile: Option<f64>,
}

impl RetrievalReport {
    fn values(&self) -> Vec<f64> {
        [
            self.vision_to_text,
            self.text_to_vision,
            self.tactile_to_text,
            self.text_to_tactile,
        ]
        .into_iter()
        .flatten()
        .collect()
    }

    pub fn mean(&self) -> f64 {
        let v = self.values();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn min(&self) -> f64 {
        self.values().into_iter().fold(f64::INFINITY, f64::min)
    }

    fn csv_row(&self, epoch: usize, step: usize, loss: f64) -> String {
        let cell = |v: Option<f64>| v.map_or(String::new(), |v| format!("{v:.6}"));
        format!(
            "{epoch},{step},{loss:.6},{},{},{},{}",
            cell(self.vision_to_text),
            cell(self.text_to_vision),
            cell(self.tactile_to_text),
            cell(self.text_to_tactile)
        )
    }
}

const RETRIEVAL_HEADER: &str =
    "epoch,step,train_loss,vision_to_text,text_to_vision,tactile_to_text,text_to_tactile";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefectReport {
    pub granularity: Granularity,
    pub k: usize,
    pub accuracy: f64,
    pub n: usize,
}

fn stack(parts: &[&Tensor]) -> Result<Tensor> {
    let cols = parts.first().map_or(0, |t| t.cols());
    let mut data = Vec::with_capacity(parts.iter().map(|t| t.numel()).sum());
    let mut rows = 0;
    for t in parts {
        if t.cols() != cols {
            return Err(Error::contract("stacked blocks differ in width"));
        }
        data.extend_from_slice(t.data());
        rows += t.rows();
    }
    Ok(Tensor::new(rows, cols, data)?)
}

fn split_rows(t: &Tensor, per: usize) -> Vec<Tensor> {
    (0..t.rows() / per)
        .map(|i| {
            let d = t.data()[i * per * t.cols()..(i + 1) * per * t.cols()].to_vec();
            Tensor::new(per, t.cols(), d).expect("row block")
        })
        .collect()
}

/// Frozen encoder tokens for a set of corpus rows.
struct TokenCache {
    vision: Vec<Option<Tensor>>,
    tactile: Vec<Option<Tensor>>,
}

impl TokenCache {
    fn build(
        model: &Model,
        rows: &[SampleRecord],
        wanted: &[usize],
        branches: Branches,
        tactile: bool,
    ) -> Result<Self> {
        let per = model.cfg.encoders.tokens_per_image();
        let mut cache = Self {
            vision: vec![None; rows.len()],
            tactile: vec![None; rows.len()],
        };
        for chunk in wanted.chunks(64) {
            if branches.vision {
                let imgs: Vec<_> = chunk.iter().map(|&i| &rows[i].vision).collect();
                let t = model.encode_images(Modality::Vision, &imgs)?;
                for (&i, block) in chunk.iter().zip(split_rows(&t, per)) {
                    cache.vision[i] = Some(block);
                }
            }
            if branches.tactile && tactile {
                let imgs: Vec<_> = chunk.iter().map(|&i| &rows[i].tactile).collect();
                let t = model.encode_images(Modality::Tactile, &imgs)?;
                for (&i, block) in chunk.iter().zip(split_rows(&t, per)) {
                    cache.tactile[i] = Some(block);
                }
            }
        }
        Ok(cache)
    }

    fn tokens(&self, m: Modality, batch: &[usize]) -> Result<Tensor> {
        let src = if m == Modality::Vision {
            &self.vision
        } else {
            &self.tactile
        };
        let parts: Vec<&Tensor> = batch
            .iter()
            .map(|&i| {
                src[i]
                    .as_ref()
                    .ok_or_else(|| Error::contract(format!("row {i} is not cached")))
            })
            .collect::<Result<_>>()?;
        stack(&parts)
    }
}

fn check_finite(value: f64, step: usize, rows: &[SampleRecord], batch: &[usize]) -> Result<()> {
    if value.is_finite() {
        return Ok(());
    }
    let ids: Vec<u64> = batch.iter().map(|&i| rows[i].id).collect();
    log::error!("non-finite loss at step {step}; batch row ids {ids:?}");
    Err(Error::NonFiniteLoss { step, rows: ids })
}

fn eval_steps(stage: &StageConfig) -> Vec<usize> {
    if stage.steps == 0 {
        return vec![0];
    }
    let mut v: Vec<usize> = (1..=stage.steps / stage.eval_every)
        .map(|e| e * stage.eval_every)
        .collect();
    if v.last() != Some(&stage.steps) {
        v.push(stage.steps);
    }
    v
}

type Snapshot = Vec<(ParamId, Tensor)>;

fn snapshot(model: &Model) -> Snapshot {
    model
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, p)| (id, p.value.clone()))
        .collect()
}

fn restore(model: &mut Model, snap: Snapshot) {
    for (id, v) in snap {
        model.store.get_mut(id).value = v;
    }
}

/// Runs `steps` optimizer updates with validation at every epoch boundary and keeps the
/// best-scoring parameters. `step_fn` returns the batch loss; `eval_fn` returns `(score, metrics)`.
fn train_loop<M: Clone>(
    model: &mut Model,
    plan: &StagePlan,
    stage: &StageConfig,
    cfg: &RunConfig,
    mut step_fn: impl FnMut(&Model, &mut Graph, &mut Ctx, usize) -> Result<Var>,
    mut eval_fn: impl FnMut(&Model) -> Result<(f64, M)>,
) -> Result<StageOutcome<M>> {
    plan.apply(model);
    let frozen_before = model.fingerprint(|n| !plan.trains(n));
    let optim = stage.optim(&cfg.optim);
    let mut opt = AdamW::new(optim);
    let mut ctx = Ctx::train(derive_seed(cfg.seed, 100 + plan.stage as u64));
    let mut history: Vec<EvalPoint<M>> = Vec::new();
    let mut best: Option<Snapshot> = None;
    let mut loss_sum = 0.0;
    let mut loss_n = 0usize;
    let mut step = 0;
    for (epoch, &until) in eval_steps(stage).iter().enumerate() {
        while step < until {
            let mut g = Graph::new();
            let loss = step_fn(model, &mut g, &mut ctx, step)?;
            loss_sum += g.value(loss).item();
            loss_n += 1;
            model.store.zero_grad();
            g.backward(loss, &mut model.store)?;
            opt.step(&mut model.store, lr_at(step, stage.steps, &optim));
            step += 1;
        }
        model.store.zero_grad();
        let (score, metrics) = eval_fn(model)?;
        let train_loss = if loss_n == 0 {
            0.0
        } else {
            loss_sum / loss_n as f64
        };
        log::info!(
            "stage {} epoch {epoch} step {step}: loss {train_loss:.4} score {score:.4}",
            plan.stage
        );
        let improved = history.iter().all(|h| score > h.score);
        history.push(EvalPoint {
            epoch,
            step,
            train_loss,
            score,
            metrics,
        });
        (loss_sum, loss_n) = (0.0, 0);
        if improved {
            best = Some(snapshot(model));
        }
    }
    let scores: Vec<f64> = history.iter().map(|h| h.score).collect();
    let selected = select_checkpoint(&scores).expect("at least one evaluation");
    if let Some(b) = best {
        restore(model, b);
    }
    if model.fingerprint(|n| !plan.trains(n)) != frozen_before {
        return Err(Error::contract(format!(
            "stage {} modified a frozen parameter",
            plan.stage
        )));
    }
    Ok(StageOutcome {
        history,
        selected,
        test: None,
    })
}

/// Template examples for the decoder warmup: evidence words stand in for perception rows.
pub fn warmup_examples(
    cfg: &RunConfig,
    vocab: &Vocab,
    objects: usize,
    stream: u64,
) -> Vec<WarmupExample> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream));
    let mut out = Vec::with_capacity(objects * Task::ALL.len());
    for spec in sample_specs(&cfg.data, objects, WARMUP_STREAM + stream) {
        let latent = crate::data::latent_of(&spec);
        for task in Task::ALL {
            let templates = task.instructions();
            let prompt = templates[rng.gen_range(0..templates.len())];
            let mut context: Vec<usize> =
                evidence_words(spec.material, spec.hardness, spec.roughness, spec.defect)
                    .iter()
                    .map(|w| vocab.id(w))
                    .collect();
            context.shuffle(&mut rng);
            out.push(WarmupExample {
                context,
                prompt: vocab.encode(prompt),
                answer: vocab.encode(&task.answer(&latent)),
            });
        }
    }
    out
}

/// Fresh model with a language-warmed decoder; identical for every pipeline sharing a seed.
pub fn init_model(cfg: &RunConfig) -> Result<(Model, WarmupReport)> {
    cfg.check()?;
    let mut model = Model::new(cfg.model.clone(), Vocab::controlled(), cfg.seed)?;
    let examples = warmup_examples(cfg, &model.vocab, cfg.warmup.objects, 0);
    let w = &cfg.warmup.stage;
    let before = model.fingerprint(|n| !n.starts_with(c::DECODER));
    let prefix_len = model.prefix_len();
    let report = model.decoder.lm_warmup(
        &mut model.store,
        &examples,
        prefix_len,
        w.steps,
        w.batch,
        &w.optim(&cfg.optim),
        derive_seed(cfg.seed, 1),
    )?;
    if model.fingerprint(|n| !n.starts_with(c::DECODER)) != before {
        return Err(Error::contract(
            "decoder warmup touched a non-decoder parameter",
        ));
    }
    model.meta.decoder_warmed = true;
    log::info!(
        "decoder warmup loss {:.4} -> {:.4}",
        report.initial_loss,
        report.final_loss
    );
    Ok((model, report))
}

fn indices(rows: &[SampleRecord], split: Split) -> Vec<usize> {
    rows.iter()
        .enumerate()
        .filter(|(_, r)| r.split == split)
        .map(|(i, _)| i)
        .collect()
}

/// Pooled unit embeddings per modality for rows whose tokens are cached.
fn pooled(
    model: &Model,
    g: &mut Graph,
    ctx: &mut Ctx,
    cache: &TokenCache,
    m: Modality,
    batch: &[usize],
) -> Result<(Var, Var)> {
    let tokens = g.constant(cache.tokens(m, batch)?);
    let q = model.queries(g, ctx, m, tokens, batch.len())?;
    let z = model.shared.project_normalize(g, &model.store, ctx, q, m)?;
    Ok((model.shared.pool(g, z)?, q))
}

fn text_embeddings(
    model: &Model,
    g: &mut Graph,
    ctx: &mut Ctx,
    captions: &[String],
) -> Result<Var> {
    let seqs: Vec<Vec<usize>> = captions.iter().map(|c| model.vocab.encode(c)).collect();
    let (_, cls) = model.text.forward(g, &model.store, ctx, &seqs)?;
    model.shared.project_text(g, &model.store, ctx, cls)
}

/// Retrieval@1 over `rows` in chunks of `batch`; a hit retrieves an item with the query's caption.
fn retrieval(
    model: &Model,
    rows: &[SampleRecord],
    idx: &[usize],
    cache: &TokenCache,
    batch: usize,
    b: Branches,
) -> Result<RetrievalReport> {
    let mut order = idx.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(0));
    let mut hits = [0usize; 4];
    for chunk in order.chunks(batch) {
        let mut g = Graph::inference();
        let mut ctx = Ctx::eval();
        let captions: Vec<String> = chunk.iter().map(|&i| rows[i].labels.caption()).collect();
        let t = text_embeddings(model, &mut g, &mut ctx, &captions)?;
        for (slot, m, on) in [
            (0, Modality::Vision, b.vision),
            (2, Modality::Tactile, b.tactile),
        ] {
            if !on {
                continue;
            }
            let (z, _) = pooled(model, &mut g, &mut ctx, cache, m, chunk)?;
            let sim = g.matmul_nt(z, t)?;
            let s = g.value(sim);
            for i in 0..chunk.len() {
                let row = s.row_slice(i);
                let j = crate::decoder::argmax(row);
                hits[slot] += (captions[j] == captions[i]) as usize;
                let col: Vec<f64> = (0..chunk.len()).map(|r| s.get(r, i)).collect();
                let j = crate::decoder::argmax(&col);
                hits[slot + 1] += (captions[j] == captions[i]) as usize;
            }
        }
    }
    let n = idx.len().max(1) as f64;
    let frac = |on: bool, h: usize| on.then_some(h as f64 / n);
    Ok(RetrievalReport {
        vision_to_text: frac(b.vision, hits[0]),
        text_to_vision: frac(b.vision, hits[1]),
        tactile_to_text: frac(b.tactile, hits[2]),
        text_to_tactile: frac(b.tactile, hits[3]),
    })
}

/// Up to `batch` training rows with pairwise distinct captions.
fn distinct_caption_batch(
    rows: &[SampleRecord],
    pool: &[usize],
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(batch);
    let mut order = pool.to_vec();
    order.shuffle(rng);
    for i in order {
        if seen.insert(rows[i].labels.caption()) {
            out.push(i);
            if out.len() == batch {
                break;
            }
        }
    }
    out
}

pub fn run_stage1(
    model: &mut Model,
    corpus: &Corpus,
    cfg: &RunConfig,
    out: Option<&Path>,
) -> Result<StageOutcome<RetrievalReport>> {
    let rows = &corpus.rows;
    let b = cfg.ablation.branches();
    let plan = StagePlan::new(1, cfg.ablation)?;
    let train = indices(rows, Split::Train);
    let val = indices(rows, Split::Val);
    if train.is_empty() || val.is_empty() {
        return Err(Error::data("stage 1 needs train and validation rows"));
    }
    let all: Vec<usize> = train.iter().chain(&val).copied().collect();
    let cache = TokenCache::build(model, rows, &all, b, true)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 11));
    let lambda = cfg.loss.lambda_match;
    let tau = cfg.loss.tau;
    let outcome = train_loop(
        model,
        &plan,
        &cfg.stage1,
        cfg,
        |model, g, ctx, step| {
            let batch = distinct_caption_batch(rows, &train, cfg.stage1.batch, &mut rng);
            let captions: Vec<String> = batch.iter().map(|&i| rows[i].labels.caption()).collect();
            let t = text_embeddings(model, g, ctx, &captions)?;
            let mut zs = Vec::new();
            for (m, on) in [(Modality::Vision, b.vision), (Modality::Tactile, b.tactile)] {
                if on {
                    zs.push(pooled(model, g, ctx, &cache, m, &batch)?.0);
                }
            }
            let mut con = objectives::infonce(g, zs[0], t, tau)?;
            if zs.len() == 2 {
                let second = objectives::infonce(g, zs[1], t, tau)?;
                con = g.add(con, second)?;
            }
            let matching = if lambda != 0.0 && batch.len() > 1 {
                let fused = if zs.len() == 2 {
                    let s = g.add(zs[0], zs[1])?;
                    g.scale(s, 0.5)
                } else {
                    zs[0]
                };
                let sim = g.matmul_nt(fused, t)?;
                let sim = g.value(sim).clone();
                let distinct = |i: usize, j: usize| captions[i] != captions[j];
                let text_neg = mine_hard_negatives_where(&sim, distinct);
                let perc_neg = mine_hard_negatives_where(&sim.transposed(), distinct);
                let (mut fi, mut ti, mut labels) = (Vec::new(), Vec::new(), Vec::new());
                for i in 0..batch.len() {
                    fi.push(i);
                    ti.push(i);
                    labels.push(1.0);
                    if let Some(j) = text_neg[i] {
                        fi.push(i);
                        ti.push(j);
                        labels.push(0.0);
                    }
                    if let Some(k) = perc_neg[i] {
                        fi.push(k);
                        ti.push(i);
                        labels.push(0.0);
                    }
                }
                let f = g.gather_rows(fused, &fi)?;
                let tt = g.gather_rows(t, &ti)?;
                let p = model.ptm.forward(g, &model.store, ctx, f, tt)?;
                Some(objectives::ptm_loss(g, p, &labels)?)
            } else {
                None
            };
            let loss = objectives::stage1_loss(g, con, matching, lambda)?;
            check_finite(g.value(loss).item(), step, rows, &batch)?;
            Ok(loss)
        },
        |model| {
            let r = retrieval(model, rows, &val, &cache, cfg.eval.retrieval_batch, b)?;
            Ok((r.mean(), r))
        },
    )?;
    model.meta.stages.push(stage_tag(1, cfg.ablation));
    if let Some(dir) = out {
        let mut csv = format!("{RETRIEVAL_HEADER}\n");
        for h in &outcome.history {
            csv.push_str(&h.metrics.csv_row(h.epoch, h.step, h.train_loss));
            csv.push('\n');
        }
        write_outputs(
            dir,
            model,
            cfg,
            corpus,
            &csv,
            1,
            serde_json::to_value(&outcome)?,
        )?;
    }
    Ok(outcome)
}

fn stage_tag(stage: u8, ablation: Ablation) -> String {
    match ablation {
        Ablation::None => format!("stage{stage}"),
        a => format!("stage{stage}:{}", a.name()),
    }
}

fn write_outputs(
    dir: &Path,
    model: &Model,
    cfg: &RunConfig,
    corpus: &Corpus,
    csv: &str,
    stage: u8,
    outcome: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.csv"), csv)?;
    let report = serde_json::json!({
        "stage": stage,
        "seed": cfg.seed,
        "ablation": cfg.ablation,
        "corpus_sha256": content_hash(corpus.to_jsonl()?.as_bytes()),
        "config": cfg,
        "outcome": outcome,
    });
    fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(&report)? + "\n",
    )?;
    model.save(&dir.join("checkpoint"))
}

/// Generated answers for rows given their stacked prefix rows.
fn generate_answers(
    model: &Model,
    prefixes: &Tensor,
    prompts: &[Vec<usize>],
    cfg: &RunConfig,
) -> Result<Vec<String>> {
    let pl = model.prefix_len();
    let mut out = Vec::with_capacity(prompts.len());
    for (c, chunk) in prompts.chunks(cfg.eval.batch).enumerate() {
        let start = c * cfg.eval.batch * pl;
        let rows = chunk.len() * pl;
        let w = prefixes.cols();
        let p = Tensor::new(
            rows,
            w,
            prefixes.data()[start * w..(start + rows) * w].to_vec(),
        )?;
        let ids = model.decoder.generate(
            &model.store,
            Some(&p),
            pl,
            chunk,
            GenerateOptions {
                max_new: cfg.eval.max_new,
                sample_seed: None,
            },
        )?;
        out.extend(ids.iter().map(|a| model.vocab.detokenize(a)));
    }
    Ok(out)
}

fn prefixes_for(
    model: &Model,
    rows: &[&SampleRecord],
    b: Branches,
    chunk: usize,
) -> Result<Tensor> {
    let parts: Vec<Tensor> = rows
        .chunks(chunk)
        .map(|c| model.prefixes(c, b))
        .collect::<Result<_>>()?;
    stack(&parts.iter().collect::<Vec<_>>())
}

/// Scores generated answers against the rows' references, grouped by task.
pub fn score_answers(rows: &[&SampleRecord], answers: &[String]) -> Result<MetricReport> {
    let mut r = MetricReport::default();
    let vocab = descriptor_vocabulary();
    let by_task =
        |t: Task| -> Vec<usize> { (0..rows.len()).filter(|&i| rows[i].task == t).collect() };
    let hard = by_task(Task::Hardness);
    let preds: Vec<Option<&str>> = hard
        .iter()
        .map(|&i| map_to_labels(&answers[i], &["hard", "soft"]).label())
        .collect();
    let golds: Vec<&str> = hard
        .iter()
        .map(|&i| rows[i].labels.hardness.word())
        .collect();
    r.hardness_acc = accuracy(&preds, &golds)?;
    r.n.insert("hardness".into(), hard.len());
    let rough = by_task(Task::Roughness);
    let preds: Vec<Option<&str>> = rough
        .iter()
        .map(|&i| map_to_labels(&answers[i], &["smooth", "textured", "rough"]).label())
        .collect();
    let golds: Vec<&str> = rough
        .iter()
        .map(|&i| rows[i].labels.roughness.word())
        .collect();
    r.roughness_acc = accuracy(&preds, &golds)?;
    r.n.insert("roughness".into(), rough.len());
    let mat = by_task(Task::Material);
    let sets: Vec<DescriptorSets> = mat
        .iter()
        .map(|&i| DescriptorSets {
            reference: rows[i].labels.descriptors.clone(),
            predicted: extract_descriptors(&answers[i], &vocab),
        })
        .collect();
    r.descriptor_recall = descriptor_recall(&sets)?;
    let pred_text: Vec<&str> = mat.iter().map(|&i| answers[i].as_str()).collect();
    let gold_text: Vec<&str> = mat.iter().map(|&i| rows[i].answer.as_str()).collect();
    r.semantic_sim = semantic_similarity(&pred_text, &gold_text, &HashedBagOfWords::default())?;
    r.n.insert("material".into(), mat.len());
    let def = by_task(Task::Defect);
    if !def.is_empty() {
        let tax = Granularity::Five.taxonomy();
        let preds: Vec<Option<&str>> = def
            .iter()
            .map(|&i| map_to_taxonomy(&answers[i], &tax).label())
            .collect();
        let golds: Vec<&str> = def
            .iter()
            .map(|&i| project_label(&rows[i].labels.defect, Granularity::Five))
            .collect::<Result<_>>()?;
        r.set_defect(Granularity::Five, accuracy(&preds, &golds)?, def.len());
    }
    Ok(r)
}

/// Generates answers for every row's own instruction and scores them.
pub fn evaluate_rows(
    model: &Model,
    rows: &[&SampleRecord],
    cfg: &RunConfig,
) -> Result<MetricReport> {
    let b = cfg.ablation.branches();
    let prefixes = prefixes_for(model, rows, b, cfg.eval.batch)?;
    let prompts: Vec<Vec<usize>> = rows
        .iter()
        .map(|r| model.vocab.encode(&r.instruction))
        .collect();
    let answers = generate_answers(model, &prefixes, &prompts, cfg)?;
    score_answers(rows, &answers)
}

pub fn run_stage2(
    model: &mut Model,
    corpus: &Corpus,
    cfg: &RunConfig,
    out: Option<&Path>,
) -> Result<StageOutcome<MetricReport>> {
    let rows = &corpus.rows;
    let b = cfg.ablation.branches();
    let plan = StagePlan::new(2, cfg.ablation)?;
    let train = indices(rows, Split::Train);
    let pools: Vec<Vec<usize>> = Task::ALL
        .iter()
        .map(|&t| {
            train
                .iter()
                .copied()
                .filter(|&i| rows[i].task == t)
                .collect()
        })
        .filter(|p: &Vec<usize>| !p.is_empty())
        .collect();
    if pools.is_empty() {
        return Err(Error::data("stage 2 needs training rows"));
    }
    let val: Vec<&SampleRecord> = corpus.split(Split::Val);
    let test: Vec<&SampleRecord> = corpus.split(Split::Test);
    let vision_only = Branches {
        vision: b.vision,
        tactile: false,
    };
    let cache = TokenCache::build(model, rows, &train, vision_only, false)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 22));
    let per = model.cfg.encoders.tokens_per_image();
    let (lambda, tau_vt) = (cfg.loss.lambda_vt, cfg.loss.tau_vt);
    let bsz = cfg.stage2.batch;
    let mut outcome = train_loop(
        model,
        &plan,
        &cfg.stage2,
        cfg,
        |model, g, ctx, step| {
            let mut batch = Vec::with_capacity(bsz);
            for (k, pool) in pools.iter().enumerate() {
                let take = bsz / pools.len() + usize::from(k < bsz % pools.len());
                batch.extend((0..take).map(|_| pool[rng.gen_range(0..pool.len())]));
            }
            let n = batch.len();
            let qv = if b.vision {
                let tv = g.constant(cache.tokens(Modality::Vision, &batch)?);
                Some(model.queries(g, ctx, Modality::Vision, tv, n)?)
            } else {
                None
            };
            let qt = if b.tactile {
                let imgs: Vec<_> = batch.iter().map(|&i| &rows[i].tactile).collect();
                let tt = model.tactile.forward(g, &model.store, ctx, &imgs)?;
                debug_assert_eq!(g.shape(tt)[0], n * per);
                Some(model.queries(g, ctx, Modality::Tactile, tt, n)?)
            } else {
                None
            };
            let prefix = model.shared.to_prefix(g, &model.store, ctx, qv, qt, n)?;
            let prompts: Vec<Vec<usize>> = batch
                .iter()
                .map(|&i| model.vocab.encode(&rows[i].instruction))
                .collect();
            let answers: Vec<Vec<usize>> = batch
                .iter()
                .map(|&i| model.vocab.encode(&rows[i].answer))
                .collect();
            let pairs: Vec<(&[usize], &[usize])> = prompts
                .iter()
                .zip(&answers)
                .map(|(p, a)| (&p[..], &a[..]))
                .collect();
            let tf = model.decoder.teacher_forced(
                g,
                &model.store,
                ctx,
                Some(prefix),
                model.prefix_len(),
                &pairs,
            )?;
            let vqa = objectives::vqa_loss(g, tf.logits, &tf.targets)?;
            let coupling = match (qv, qt) {
                (Some(qv), Some(qt)) if lambda != 0.0 => {
                    let mut seen = BTreeSet::new();
                    let firsts: Vec<usize> = (0..n)
                        .filter(|&i| seen.insert(rows[batch[i]].object_id))
                        .collect();
                    if firsts.len() > 1 {
                        let lq = model.cfg.qformer.num_queries;
                        let qrows: Vec<usize> =
                            firsts.iter().flat_map(|&i| i * lq..(i + 1) * lq).collect();
                        let qv = g.gather_rows(qv, &qrows)?;
                        let qt = g.gather_rows(qt, &qrows)?;
                        let zv = model.shared.project_normalize(
                            g,
                            &model.store,
                            ctx,
                            qv,
                            Modality::Vision,
                        )?;
                        let zt = model.shared.project_normalize(
                            g,
                            &model.store,
                            ctx,
                            qt,
                            Modality::Tactile,
                        )?;
                        let zv = model.shared.pool(g, zv)?;
                        let zt = model.shared.pool(g, zt)?;
                        Some(objectives::coupling_loss(g, zv, zt, tau_vt)?)
                    } else {
                        None
                    }
                }
                _ => None,
            };
            let loss = objectives::stage2_loss(g, vqa, coupling, lambda)?;
            check_finite(g.value(loss).item(), step, rows, &batch)?;
            Ok(loss)
        },
        |model| {
            let r = evaluate_rows(model, &val, cfg)?;
            Ok((r.mean_task_score(), r))
        },
    )?;
    model.meta.stages.push(stage_tag(2, cfg.ablation));
    if !test.is_empty() {
        outcome.test = Some(evaluate_rows(model, &test, cfg)?);
    }
    if let Some(dir) = out {
        let mut csv = format!("{CSV_HEADER}\n");
        for h in &outcome.history {
            csv.push_str(&h.metrics.csv_row(h.epoch, h.step));
            csv.push('\n');
        }
        write_outputs(
            dir,
            model,
            cfg,
            corpus,
            &csv,
            2,
            serde_json::to_value(&outcome)?,
        )?;
    }
    Ok(outcome)
}

fn defect_accuracy(
    model: &Model,
    prefixes: &Tensor,
    rows: &[&SampleRecord],
    g: Granularity,
    cfg: &RunConfig,
) -> Result<f64> {
    let prompt = model.vocab.encode(defect_prompt(g));
    let prompts = vec![prompt; rows.len()];
    let answers = generate_answers(model, prefixes, &prompts, cfg)?;
    let tax = g.taxonomy();
    let preds: Vec<Option<&str>> = answers
        .iter()
        .map(|a| map_to_taxonomy(a, &tax).label())
        .collect();
    let golds: Vec<&str> = rows
        .iter()
        .map(|r| project_label(&r.labels.defect, g))
        .collect::<Result<_>>()?;
    accuracy(&preds, &golds)
}

/// Few-shot adaptation: attaches adapters and trains them on `k` rows per category.
pub fn run_stage3(
    model: &mut Model,
    corpus: &Corpus,
    cfg: &RunConfig,
    g: Granularity,
    k: usize,
    out: Option<&Path>,
) -> Result<StageOutcome<DefectReport>> {
    let rows = &corpus.rows;
    let b = cfg.ablation.branches();
    let plan = StagePlan::new(3, cfg.ablation)?;
    let shots = kshot_sample(rows, g, k, derive_seed(cfg.seed, 33))?;
    model.attach_lora(&cfg.lora, derive_seed(cfg.seed, 34))?;
    let pl = model.prefix_len();
    let shot_rows: Vec<&SampleRecord> = shots.iter().map(|&i| &rows[i]).collect();
    let shot_prefix = split_rows(&prefixes_for(model, &shot_rows, b, cfg.eval.batch)?, pl);
    let prompt = model.vocab.encode(defect_prompt(g));
    let answers: Vec<Vec<usize>> = shot_rows
        .iter()
        .map(|r| Ok(model.vocab.encode(&defect_answer(&r.labels.defect, g)?)))
        .collect::<Result<_>>()?;
    let val: Vec<&SampleRecord> = corpus
        .split(Split::Val)
        .into_iter()
        .filter(|r| r.task == Task::Defect)
        .collect();
    let test: Vec<&SampleRecord> = corpus
        .split(Split::Test)
        .into_iter()
        .filter(|r| r.task == Task::Defect)
        .collect();
    let val_prefix = prefixes_for(model, &val, b, cfg.eval.batch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 35));
    let bsz = cfg.stage3.batch.min(shots.len());
    let mut outcome = train_loop(
        model,
        &plan,
        &cfg.stage3,
        cfg,
        |model, gr, ctx, step| {
            let batch: Vec<usize> = rand::seq::index::sample(&mut rng, shots.len(), bsz).into_vec();
            let parts: Vec<&Tensor> = batch.iter().map(|&i| &shot_prefix[i]).collect();
            let prefix = gr.constant(stack(&parts)?);
            let pairs: Vec<(&[usize], &[usize])> = batch
                .iter()
                .map(|&i| (&prompt[..], &answers[i][..]))
                .collect();
            let tf =
                model
                    .decoder
                    .teacher_forced(gr, &model.store, ctx, Some(prefix), pl, &pairs)?;
            let loss = objectives::defect_loss(gr, tf.logits, &tf.targets)?;
            let ids: Vec<usize> = batch.iter().map(|&i| shots[i]).collect();
            check_finite(gr.value(loss).item(), step, rows, &ids)?;
            Ok(loss)
        },
        |model| {
            let acc = defect_accuracy(model, &val_prefix, &val, g, cfg)?;
            Ok((
                acc,
                DefectReport {
                    granularity: g,
                    k,
                    accuracy: acc,
                    n: val.len(),
                },
            ))
        },
    )?;
    let test_prefix = prefixes_for(model, &test, b, cfg.eval.batch)?;
    outcome.test = Some(DefectReport {
        granularity: g,
        k,
        accuracy: defect_accuracy(model, &test_prefix, &test, g, cfg)?,
        n: test.len(),
    });
    model
        .meta
        .stages
        .push(format!("{}:{}x{k}", stage_tag(3, cfg.ablation), g.count()));
    if let Some(dir) = out {
        let mut csv = format!("{CSV_HEADER}\n");
        for h in &outcome.history {
            let mut m = MetricReport::default();
            m.set_defect(g, h.metrics.accuracy, h.metrics.n);
            csv.push_str(&m.csv_row(h.epoch, h.step));
            csv.push('\n');
        }
        write_outputs(
            dir,
            model,
            cfg,
            corpus,
            &csv,
            3,
            serde_json::to_value(&outcome)?,
        )?;
    }
    Ok(outcome)
}
