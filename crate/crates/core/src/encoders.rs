//! Patch encoders for the camera and gel images, and a class-token text encoder.

use serde::{Deserialize, Serialize};
use vtl_tensor::{AttnSegment, Graph, ParamId, ParamStore, Tensor, Var};

use crate::error::{Error, Result};
use crate::image::ImageObs;
use crate::nn::{stacked_positions, Block, Builder, Ctx, LayerNorm, Linear};

pub const MAX_TEXT_LEN: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Vision,
    Tactile,
    Text,
}

impl Modality {
    pub fn name(self) -> &'static str {
        match self {
            Modality::Vision => "vision",
            Modality::Tactile => "tactile",
            Modality::Text => "text",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenSeq {
    pub tokens: Tensor,
    pub modality: Modality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub image_size: usize,
    pub patch: usize,
    pub d_v: usize,
    pub d_t: usize,
    pub d_text: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch: 8,
            d_v: 64,
            d_t: 64,
            d_text: 64,
            depth: 2,
            heads: 4,
        }
    }
}

impl EncoderDims {
    pub fn check(&self) -> Result<()> {
        let widths = [self.d_v, self.d_t, self.d_text];
        if self.patch == 0 || self.depth == 0 || self.heads == 0 || widths.contains(&0) {
            return Err(Error::config("encoder dimensions must be positive"));
        }
        if self.image_size % self.patch != 0 {
            return Err(Error::config(format!(
                "image size {} is not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if widths.iter().any(|w| w % self.heads != 0) {
            return Err(Error::config(
                "encoder widths must be divisible by the head count",
            ));
        }
        Ok(())
    }

    pub fn tokens_per_image(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }
}

#[derive(Debug, Clone)]
pub struct PatchEncoder {
    pub modality: Modality,
    pub patch: usize,
    pub image_size: usize,
    pub width: usize,
    pub heads: usize,
    pub embed: Linear,
    pub blocks: Vec<Block>,
    pub ln: LayerNorm,
}

impl PatchEncoder {
    pub fn new(b: &mut Builder, modality: Modality, dims: &EncoderDims) -> Result<Self> {
        let width = match modality {
            Modality::Vision => dims.d_v,
            Modality::Tactile => dims.d_t,
            Modality::Text => return Err(Error::contract("patch encoders take image modalities")),
        };
        let name = modality.name();
        let embed = Linear::new(
            b,
            &format!("{name}.patch_embed"),
            3 * dims.patch * dims.patch,
            width,
            true,
        )?;
        let blocks = (0..dims.depth)
            .map(|i| Block::new(b, &format!("{name}.blocks.{i}"), width, dims.heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            modality,
            patch: dims.patch,
            image_size: dims.image_size,
            width,
            heads: dims.heads,
            embed,
            blocks,
            ln: LayerNorm::new(b, &format!("{name}.ln"), width)?,
        })
    }

    pub fn tokens_per_image(&self) -> usize {
        (self.image_size / self.patch).pow(2)
    }

    /// Encodes a batch; returns the stacked `[B·L × width]` token matrix.
    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        ctx: &mut Ctx,
        images: &[&ImageObs],
    ) -> Result<Var> {
        if images.is_empty() {
            return Err(Error::contract("empty image batch"));
        }
        let l = self.tokens_per_image();
        let mut data = Vec::with_capacity(images.len() * l * 3 * self.patch * self.patch);
        for img in images {
            if img.height() != self.image_size || img.width() != self.image_size {
                return Err(Error::Tensor(vtl_tensor::TensorError::InvalidShape {
                    shape: [img.height(), img.width()],
                    reason: format!(
                        "{} encoder expects {}x{}",
                        self.modality.name(),
                        self.image_size,
                        self.image_size
                    ),
                }));
            }
            data.extend(img.patchify(self.patch)?);
        }
        let patches = g.constant(Tensor::new(
            images.len() * l,
            3 * self.patch * self.patch,
            data,
        )?);
        let mut x = self.embed.forward(g, s, ctx, patches)?;
        let pos = g.constant(stacked_positions(&vec![l; images.len()], self.width));
        x = g.add(x, pos)?;
        let segs: Vec<_> = (0..images.len())
            .map(|i| AttnSegment::full(i * l, l, i * l, l))
            .collect();
        for blk in &self.blocks {
            x = blk.forward(g, s, ctx, x, &segs)?;
        }
        self.ln.forward(g, s, x)
    }

    pub fn encode(&self, s: &ParamStore, x: &ImageObs) -> Result<TokenSeq> {
        let mut g = Graph::inference();
        let v = self.forward(&mut g, s, &mut Ctx::eval(), &[x])?;
        Ok(TokenSeq {
            tokens: g.value(v).clone(),
            modality: self.modality,
        })
    }
}

#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub width: usize,
    pub heads: usize,
    pub embed: ParamId,
    pub cls: ParamId,
    pub blocks: Vec<Block>,
    pub ln: LayerNorm,
}

impl TextEncoder {
    pub fn new(b: &mut Builder, dims: &EncoderDims, vocab_size: usize) -> Result<Self> {
        let w = dims.d_text;
        let embed = b.randn("text.embed", vocab_size, w, 1.0)?;
        let cls = b.randn("text.cls", 1, w, 1.0)?;
        let blocks = (0..dims.depth)
            .map(|i| Block::new(b, &format!("text.blocks.{i}"), w, dims.heads))
            .collect::<Result<_>>()?;
        Ok(Self {
            width: w,
            heads: dims.heads,
            embed,
            cls,
            blocks,
            ln: LayerNorm::new(b, "text.ln", w)?,
        })
    }

    /// Encodes a batch of id sequences; returns (all states, class-token rows `[B × width]`).
    pub fn forward(
        &self,
        g: &mut Graph,
        s: &ParamStore,
        ctx: &mut Ctx,
        seqs: &[Vec<usize>],
    ) -> Result<(Var, Var)> {
        if seqs.is_empty() {
            return Err(Error::contract("empty text batch"));
        }
        let seqs: Vec<&[usize]> = seqs
            .iter()
            .map(|ids| {
                if ids.len() + 1 > MAX_TEXT_LEN {
                    log::warn!(
                        "text of {} tokens truncated to {}",
                        ids.len(),
                        MAX_TEXT_LEN - 1
                    );
                    &ids[..MAX_TEXT_LEN - 1]
                } else {
                    &ids[..]
                }
            })
            .collect();
        let lens: Vec<usize> = seqs.iter().map(|ids| ids.len() + 1).collect();
        let cls = g.param(s, self.cls);
        let table = g.param(s, self.embed);
        let all_ids: Vec<usize> = seqs.iter().flat_map(|ids| ids.iter().copied()).collect();
        let words = if all_ids.is_empty() {
            None
        } else {
            Some(g.embedding_lookup(table, &all_ids)?)
        };
        // [cls; words] then reorder so each sequence starts with its class token
        let stacked = match words {
            Some(w) => g.concat_rows(&[cls, w])?,
            None => cls,
        };
        let mut order = Vec::with_capacity(all_ids.len() + seqs.len());
        let mut next_word = 1;
        for ids in &seqs {
            order.push(0);
            for _ in 0..ids.len() {
                order.push(next_word);
                next_word += 1;
            }
        }
        let mut x = g.gather_rows(stacked, &order)?;
        let pos = g.constant(stacked_positions(&lens, self.width));
        x = g.add(x, pos)?;
        let mut segs = Vec::with_capacity(lens.len());
        let mut starts = Vec::with_capacity(lens.len());
        let mut at = 0;
        for &l in &lens {
            segs.push(AttnSegment::full(at, l, at, l));
            starts.push(at);
            at += l;
        }
        for blk in &self.blocks {
            x = blk.forward(g, s, ctx, x, &segs)?;
        }
        let states = self.ln.forward(g, s, x)?;
        let cls_rows = g.gather_rows(states, &starts)?;
        Ok((states, cls_rows))
    }

    pub fn encode(&self, s: &ParamStore, ids: &[usize]) -> Result<(TokenSeq, Tensor)> {
        let mut g = Graph::inference();
        let (states, cls) = self.forward(&mut g, s, &mut Ctx::eval(), &[ids.to_vec()])?;
        Ok((
            TokenSeq {
                tokens: g.value(states).clone(),
                modality: Modality::Text,
            },
            g.value(cls).clone(),
        ))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct EncoderPlan {
    pub vision_trainable: bool,
    pub tactile_trainable: bool,
    pub text_trainable: bool,
}

/// Which encoders train in a stage. The camera encoder never trains.
pub fn apply_stage_plan(stage: u8) -> Result<EncoderPlan> {
    let (tactile, text) = match stage {
        1 => (false, true),
        2 => (true, false),
        3 => (false, false),
        other => return Err(Error::config(format!("unknown stage {other}"))),
    };
    Ok(EncoderPlan {
        vision_trainable: false,
        tactile_trainable: tactile,
        text_trainable: text,
    })
}
