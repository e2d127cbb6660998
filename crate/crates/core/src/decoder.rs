//! Small causal decoder conditioned on prefix rows, with greedy or seeded sampling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vtl_tensor::{AttnSegment, Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::lora::{LoraAdapter, LoraConfig};
use crate::nn::{stacked_positions, Block, Builder, Ctx, LayerNorm, Linear};
use crate::objectives;
use crate::optim::{lr_at, AdamW, OptimConfig};
use crate::qformer::PrefixTokens;
use crate::vocab::{BOS, EOS, SEP};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            width: 128,
            layers: 2,
            heads: 4,
            vocab_size: 0,
            max_len: 512,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub embed: ParamId,
    pub blocks: Vec<Block>,
    pub ln: LayerNorm,
}

/// Builds `BOS prompt SEP` and, when present, `answer EOS`.
pub fn frame(prompt: &[usize], answer: Option<&[usize]>) -> Vec<usize> {
    let mut ids = Vec::with_capacity(prompt.len() + answer.map_or(0, <[usize]>::len) + 3);
    ids.push(BOS);
    ids.extend_from_slice(prompt);
    ids.push(SEP);
    if let Some(a) = answer {
        ids.extend_from_slice(a);
        ids.push(EOS);
    }
    ids
}

/// A teacher-forced batch: per sample, the rows whose logits predict the answer and EOS.
pub struct TeacherForced {
    pub logits: Var,
    pub targets: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GenerateOptions {
    pub max_new: usize,
    /// Sample from the softmax with this seed instead of taking the argmax.
    pub sample_seed: Option<u64>,
}

impl Decoder {
    pub fn new(b: &mut Builder, cfg: &DecoderConfig) -> Result<Self> {
        if cfg.width == 0
            || cfg.heads == 0
            || cfg.width % cfg.heads != 0
            || cfg.layers == 0
            || cfg.vocab_size == 0
        {
            return Err(Error::config(format!("invalid decoder config {cfg:?}")));
        }
        let embed = b.randn(
            "decoder.embed",
            cfg.vocab_size,
            cfg.width,
            (1.0 / cfg.width as f64).sqrt(),
        )?;
        let blocks = (0..cfg.layers)
            .map(|i| Block::new(b, &format!("decoder.blocks.{i}"), cfg.width, cfg.heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: *cfg,
            embed,
            blocks,
            ln: LayerNorm::new(b, "decoder.ln", cfg.width)?,
        })
    }

    pub fn attention_projections(&self) -> impl Iterator<Item = &Linear> {
        self.blocks.iter().flat_map(|b| b.attn.projections())
    }

    pub fn attach_lora(&mut self, b: &mut Builder, cfg: &LoraConfig) -> Result<usize> {
        let mut n = 0;
        for blk in &mut self.blocks {
            for (name, lin) in blk.attn.projections_mut() {
                if cfg.targets.iter().any(|t| t.name() == name) {
                    LoraAdapter::attach(b, lin, cfg)?;
                    n += 1;
                }
            }
        }
        Ok(n)
    }

    /// Reconnects adapters found in `store`; returns how many were bound.
    pub fn rebind_lora(&mut self, store: &ParamStore, cfg: &LoraConfig) -> Result<usize> {
        let mut n = 0;
        for blk in &mut self.blocks {
            for (_, lin) in blk.attn.projections_mut() {
                n += LoraAdapter::rebind(store, lin, cfg.alpha, cfg.dropout)? as usize;
            }
        }
        Ok(n)
    }

    pub fn merge_lora(&mut self, store: &mut ParamStore) -> Result<()> {
        for blk in &mut self.blocks {
            for (_, lin) in blk.attn.projections_mut() {
                lin.merge_lora(store)?;
            }
        }
        Ok(())
    }

    pub fn unmerge_lora(&mut self, store: &mut ParamStore) -> Result<()> {
        for blk in &mut self.blocks {
            for (_, lin) in blk.attn.projections_mut() {
                lin.unmerge_lora(store)?;
            }
        }
        Ok(())
    }

    /// Final hidden states for `[prefix_i; text_i]` rows stacked per sample.
    /// Returns the states and each sample's first text row.
    pub fn hidden(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        ctx: &mut Ctx,
        prefix: Option<Var>,
        prefix_len: usize,
        seqs: &[Vec<usize>],
    ) -> Result<(Var, Vec<usize>)> {
        let n = seqs.len();
        if n == 0 || seqs.iter().any(Vec::is_empty) {
            return Err(Error::contract(
                "decoder needs at least one non-empty sequence",
            ));
        }
        for sq in seqs {
            if prefix_len + sq.len() > self.cfg.max_len {
                return Err(Error::Length {
                    len: prefix_len + sq.len(),
                    max: self.cfg.max_len,
                });
            }
            if let Some(&bad) = sq.iter().find(|&&t| t >= self.cfg.vocab_size) {
                return Err(Error::contract(format!(
                    "token id {bad} outside vocabulary"
                )));
            }
        }
        let lens: Vec<usize> = seqs.iter().map(Vec::len).collect();
        let all: Vec<usize> = seqs.iter().flatten().copied().collect();
        let table = g.param(s, self.embed);
        let mut text = g.embedding_lookup(table, &all)?;
        let pos = g.constant(stacked_positions(&lens, self.cfg.width));
        text = g.add(text, pos)?;
        let total_text = all.len();
        let (mut x, order) = match (prefix, prefix_len) {
            (Some(p), pl) if pl > 0 => {
                let [rows, cols] = g.shape(p);
                if rows != n * pl || cols != self.cfg.width {
                    return Err(Error::Tensor(vtl_tensor::TensorError::Shape {
                        op: "decoder prefix",
                        lhs: [rows, cols],
                        rhs: [n * pl, self.cfg.width],
                    }));
                }
                let both = g.concat_rows(&[p, text])?;
                let mut order = Vec::with_capacity(n * pl + total_text);
                let mut t = n * pl;
                for (i, &l) in lens.iter().enumerate() {
                    order.extend(i * pl..(i + 1) * pl);
                    order.extend(t..t + l);
                    t += l;
                }
                (both, Some(order))
            }
            (None, 0) => (text, None),
            _ => return Err(Error::contract("prefix rows and prefix length disagree")),
        };
        if let Some(order) = order {
            x = g.gather_rows(x, &order)?;
        }
        let mut segs = Vec::with_capacity(n);
        let mut starts = Vec::with_capacity(n);
        let mut at = 0;
        for &l in &lens {
            segs.push(AttnSegment::causal(at, prefix_len + l, prefix_len));
            starts.push(at + prefix_len);
            at += prefix_len + l;
        }
        for blk in &self.blocks {
            x = blk.forward(g, s, ctx, x, &segs)?;
        }
        Ok((x, starts))
    }

    /// Vocabulary logits at the given state rows.
    pub fn logits_at(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        states: Var,
        rows: &[usize],
    ) -> Result<Var> {
        let h = g.gather_rows(states, rows)?;
        let h = self.ln.forward(g, s, h)?;
        let table = g.param(s, self.embed);
        Ok(g.matmul_nt(h, table)?)
    }

    /// Logits for every text position of one sequence, `L × V`.
    pub fn forward_with_prefix(
        &self,
        s: &ParamStore,
        prefix: &PrefixTokens,
        ids: &[usize],
    ) -> Result<Tensor> {
        let mut g = Graph::inference();
        let pl = prefix.tokens.rows();
        let p = g.constant(prefix.tokens.clone());
        let (states, starts) =
            self.hidden(&mut g, s, &mut Ctx::eval(), Some(p), pl, &[ids.to_vec()])?;
        let rows: Vec<usize> = (starts[0]..starts[0] + ids.len()).collect();
        let logits = self.logits_at(&mut g, s, states, &rows)?;
        Ok(g.value(logits).clone())
    }

    /// Teacher-forced logits for `(prompt, answer)` pairs; the answer plus EOS are the targets.
    pub fn teacher_forced(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        ctx: &mut Ctx,
        prefix: Option<Var>,
        prefix_len: usize,
        pairs: &[(&[usize], &[usize])],
    ) -> Result<TeacherForced> {
        let seqs: Vec<Vec<usize>> = pairs.iter().map(|(p, a)| frame(p, Some(a))).collect();
        let (states, starts) = self.hidden(g, s, ctx, prefix, prefix_len, &seqs)?;
        let mut rows = Vec::new();
        let mut targets = Vec::with_capacity(pairs.len());
        for ((prompt, answer), start) in pairs.iter().zip(&starts) {
            let sep = start + prompt.len() + 1;
            rows.extend(sep..sep + answer.len() + 1);
            let mut t = answer.to_vec();
            t.push(EOS);
            targets.push(t);
        }
        let logits = self.logits_at(g, s, states, &rows)?;
        Ok(TeacherForced { logits, targets })
    }

    /// Generates answers for a batch of prompts. `prefix` holds `prefix_len` rows per prompt.
    pub fn generate(
        &self,
        s: &ParamStore,
        prefix: Option<&Tensor>,
        prefix_len: usize,
        prompts: &[Vec<usize>],
        opts: GenerateOptions,
    ) -> Result<Vec<Vec<usize>>> {
        if opts.max_new == 0 {
            return Err(Error::contract("max_new must be at least 1"));
        }
        if let Some(p) = prefix {
            if p.cols() != self.cfg.width {
                return Err(Error::Tensor(vtl_tensor::TensorError::Shape {
                    op: "generate prefix",
                    lhs: p.shape(),
                    rhs: [prompts.len() * prefix_len, self.cfg.width],
                }));
            }
        }
        let mut rng = opts.sample_seed.map(ChaCha8Rng::seed_from_u64);
        let mut seqs: Vec<Vec<usize>> = prompts.iter().map(|p| frame(p, None)).collect();
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); prompts.len()];
        let mut active: Vec<usize> = (0..prompts.len())
            .filter(|&i| prefix_len + seqs[i].len() < self.cfg.max_len)
            .collect();
        let pl = prefix_len;
        while !active.is_empty() {
            let mut g = Graph::inference();
            let p = match prefix {
                Some(p) => {
                    let rows: Vec<usize> =
                        active.iter().flat_map(|&i| i * pl..(i + 1) * pl).collect();
                    let pv = g.constant(p.clone());
                    Some(g.gather_rows(pv, &rows)?)
                }
                None => None,
            };
            let batch: Vec<Vec<usize>> = active.iter().map(|&i| seqs[i].clone()).collect();
            let (states, starts) = self.hidden(&mut g, s, &mut Ctx::eval(), p, pl, &batch)?;
            let last: Vec<usize> = starts
                .iter()
                .zip(&batch)
                .map(|(st, sq)| st + sq.len() - 1)
                .collect();
            let logits = self.logits_at(&mut g, s, states, &last)?;
            let lv = g.value(logits);
            let mut still = Vec::with_capacity(active.len());
            for (r, &i) in active.iter().enumerate() {
                let row = lv.row_slice(r);
                let next = match rng.as_mut() {
                    Some(rng) => sample_row(row, rng),
                    None => argmax(row),
                };
                if next == EOS {
                    continue;
                }
                out[i].push(next);
                seqs[i].push(next);
                if out[i].len() < opts.max_new && pl + seqs[i].len() < self.cfg.max_len {
                    still.push(i);
                }
            }
            active = still;
        }
        Ok(out)
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample_row<R: Rng>(row: &[f64], rng: &mut R) -> usize {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, wi) in w.iter().enumerate() {
        u -= wi;
        if u <= 0.0 {
            return i;
        }
    }
    row.len() - 1
}

/// One language-warmup example: context word ids stand in for perception prefix rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WarmupExample {
    pub context: Vec<usize>,
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WarmupReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

impl Decoder {
    /// Prefix rows for warmup examples: the embedding rows of each context word, zero-padded.
    fn context_prefix(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        batch: &[&WarmupExample],
        prefix_len: usize,
    ) -> Result<Var> {
        let ids: Vec<usize> = batch
            .iter()
            .flat_map(|e| e.context.iter().copied())
            .collect();
        let zero = g.constant(Tensor::zeros(1, self.cfg.width));
        let stacked = if ids.is_empty() {
            zero
        } else {
            let table = g.param(s, self.embed);
            let rows = g.embedding_lookup(table, &ids)?;
            g.concat_rows(&[rows, zero])?
        };
        let pad = ids.len();
        let mut order = Vec::with_capacity(batch.len() * prefix_len);
        let mut at = 0;
        for e in batch {
            if e.context.len() > prefix_len {
                return Err(Error::contract(format!(
                    "{} context words exceed a prefix of {prefix_len}",
                    e.context.len()
                )));
            }
            order.extend(at..at + e.context.len());
            order.extend(std::iter::repeat(pad).take(prefix_len - e.context.len()));
            at += e.context.len();
        }
        Ok(g.gather_rows(stacked, &order)?)
    }

    /// Mean per-sample teacher-forced loss on `examples` (no parameter updates).
    pub fn warmup_loss(
        &self,
        s: &ParamStore,
        examples: &[WarmupExample],
        prefix_len: usize,
    ) -> Result<f64> {
        let mut total = 0.0;
        for chunk in examples.chunks(64) {
            let mut g = Graph::inference();
            let batch: Vec<&WarmupExample> = chunk.iter().collect();
            let loss = self.warmup_batch_loss(&mut g, s, &mut Ctx::eval(), &batch, prefix_len)?;
            total += g.value(loss).item() * chunk.len() as f64;
        }
        Ok(total / examples.len().max(1) as f64)
    }

    fn warmup_batch_loss(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        ctx: &mut Ctx,
        batch: &[&WarmupExample],
        prefix_len: usize,
    ) -> Result<Var> {
        let prefix = if prefix_len > 0 {
            Some(self.context_prefix(g, s, batch, prefix_len)?)
        } else {
            None
        };
        let pairs: Vec<(&[usize], &[usize])> = batch
            .iter()
            .map(|e| (&e.prompt[..], &e.answer[..]))
            .collect();
        let tf = self.teacher_forced(g, s, ctx, prefix, prefix_len, &pairs)?;
        objectives::vqa_loss(g, tf.logits, &tf.targets)
    }

    /// Trains the decoder parameters on template examples. Only parameters under
    /// `decoder.` are updated; trainability of everything else is left as found.
    #[allow(clippy::too_many_arguments)]
    pub fn lm_warmup(
        &self,
        store: &mut ParamStore,
        examples: &[WarmupExample],
        prefix_len: usize,
        steps: usize,
        batch: usize,
        optim: &OptimConfig,
        seed: u64,
    ) -> Result<WarmupReport> {
        let initial = self.warmup_loss(store, examples, prefix_len)?;
        if steps == 0 {
            return Ok(WarmupReport {
                initial_loss: initial,
                final_loss: initial,
                losses: Vec::new(),
            });
        }
        let saved: Vec<(vtl_tensor::ParamId, bool)> =
            store.iter().map(|(id, p)| (id, p.trainable)).collect();
        store.set_all_trainable(false);
        store.set_trainable_prefix("decoder.", true);
        for lin in self.attention_projections() {
            if let Some(l) = &lin.lora {
                store.get_mut(l.a).trainable = false;
                store.get_mut(l.b).trainable = false;
            }
        }
        let mut opt = AdamW::new(*optim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut losses = Vec::with_capacity(steps);
        for step in 0..steps {
            let idx = rand::seq::index::sample(&mut rng, examples.len(), batch.min(examples.len()));
            let chunk: Vec<&WarmupExample> = idx.iter().map(|i| &examples[i]).collect();
            let mut g = Graph::new();
            let mut ctx = Ctx::train(seed ^ (step as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let loss = self.warmup_batch_loss(&mut g, store, &mut ctx, &chunk, prefix_len)?;
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    rows: idx.iter().map(|i| i as u64).collect(),
                });
            }
            losses.push(value);
            store.zero_grad();
            g.backward(loss, store)?;
            opt.step(store, lr_at(step, steps, optim));
        }
        store.zero_grad();
        for (id, t) in saved {
            store.get_mut(id).trainable = t;
        }
        let final_loss = self.warmup_loss(store, examples, prefix_len)?;
        Ok(WarmupReport {
            initial_loss: initial,
            final_loss,
            losses,
        })
    }
}
