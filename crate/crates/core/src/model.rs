//! The full perception-to-language model and its checkpoint format.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vtl_tensor::{Graph, Param, ParamStore, Tensor, Var};

use crate::data::SampleRecord;
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoders::{EncoderDims, Modality, PatchEncoder, TextEncoder};
use crate::error::{Error, Result};
use crate::image::ImageObs;
use crate::lora::LoraConfig;
use crate::nn::{Builder, Ctx};
use crate::objectives::PtmHead;
use crate::qformer::{PrefixTokens, QFormer, QFormerConfig, SharedSpace};
use crate::vocab::Vocab;

pub const CHECKPOINT_MANIFEST: &str = "checkpoint.json";
pub const CHECKPOINT_BLOB: &str = "params.bin";
pub const VOCAB_FILE: &str = "vocab.txt";

/// Which perception branches feed the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branches {
    pub vision: bool,
    pub tactile: bool,
}

impl Branches {
    pub const BOTH: Branches = Branches {
        vision: true,
        tactile: true,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoders: EncoderDims,
    pub qformer: QFormerConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoders: EncoderDims::default(),
            qformer: QFormerConfig::default(),
            decoder: DecoderConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn check(&self) -> Result<()> {
        self.encoders.check()?;
        self.qformer.check()?;
        Ok(())
    }

    pub fn prefix_len(&self) -> usize {
        2 * self.qformer.num_queries
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub decoder_warmed: bool,
    pub stages: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub meta: ModelMeta,
    pub vocab: Vocab,
    pub store: ParamStore,
    pub vision: PatchEncoder,
    pub tactile: PatchEncoder,
    pub text: TextEncoder,
    pub qf_vision: QFormer,
    pub qf_tactile: QFormer,
    pub shared: SharedSpace,
    pub ptm: PtmHead,
    pub decoder: Decoder,
}

/// Top-level parameter name prefixes, one per component.
pub mod components {
    pub const VISION: &str = "vision.";
    pub const TACTILE: &str = "tactile.";
    pub const TEXT: &str = "text.";
    pub const QF_VISION: &str = "qformer_vision.";
    pub const QF_TACTILE: &str = "qformer_tactile.";
    pub const SHARED: &str = "shared.";
    pub const PREFIX: &str = "prefix.";
    pub const PTM: &str = "ptm.";
    pub const DECODER: &str = "decoder.";
}

pub fn is_adapter(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    rows: usize,
    cols: usize,
    decay: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointManifest {
    config: ModelConfig,
    meta: ModelMeta,
    blocks: Vec<BlockEntry>,
    params_sha256: String,
}

impl Model {
    pub fn new(mut cfg: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        cfg.decoder.vocab_size = vocab.len();
        cfg.check()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let e = cfg.encoders;
        let vision = PatchEncoder::new(&mut b, Modality::Vision, &e)?;
        let tactile = PatchEncoder::new(&mut b, Modality::Tactile, &e)?;
        let text = TextEncoder::new(&mut b, &e, vocab.len())?;
        let qf_vision = QFormer::new(&mut b, Modality::Vision, &cfg.qformer, e.d_v)?;
        let qf_tactile = QFormer::new(&mut b, Modality::Tactile, &cfg.qformer, e.d_t)?;
        let shared = SharedSpace::new(&mut b, &cfg.qformer, e.d_text, cfg.decoder.width)?;
        let ptm = PtmHead::new(&mut b, cfg.qformer.shared_dim)?;
        let decoder = Decoder::new(&mut b, &cfg.decoder)?;
        Ok(Self {
            cfg,
            meta: ModelMeta::default(),
            vocab,
            store,
            vision,
            tactile,
            text,
            qf_vision,
            qf_tactile,
            shared,
            ptm,
            decoder,
        })
    }

    pub fn prefix_len(&self) -> usize {
        self.cfg.prefix_len()
    }

    /// Attaches adapters to the decoder attention projections.
    pub fn attach_lora(&mut self, cfg: &LoraConfig, seed: u64) -> Result<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut self.store,
            rng: &mut rng,
        };
        self.decoder.attach_lora(&mut b, cfg)
    }

    /// Hash over parameter values whose names satisfy `filter`.
    pub fn fingerprint(&self, filter: impl Fn(&str) -> bool) -> u64 {
        self.store.fingerprint(|p: &Param| filter(&p.name))
    }

    /// Encoder tokens for a batch of images without recording gradients.
    pub fn encode_images(&self, m: Modality, images: &[&ImageObs]) -> Result<Tensor> {
        let enc = match m {
            Modality::Vision => &self.vision,
            Modality::Tactile => &self.tactile,
            Modality::Text => return Err(Error::contract("text is not an image modality")),
        };
        let mut g = Graph::inference();
        let v = enc.forward(&mut g, &self.store, &mut Ctx::eval(), images)?;
        Ok(g.value(v).clone())
    }

    /// Query states for `batch` items whose encoder tokens are already in the graph.
    pub fn queries(
        &self,
        g: &mut Graph,
        ctx: &mut Ctx,
        m: Modality,
        tokens: Var,
        batch: usize,
    ) -> Result<Var> {
        let per = self.cfg.encoders.tokens_per_image();
        match m {
            Modality::Vision => self
                .qf_vision
                .forward(g, &self.store, ctx, tokens, batch, per),
            Modality::Tactile => self
                .qf_tactile
                .forward(g, &self.store, ctx, tokens, batch, per),
            Modality::Text => Err(Error::contract("text has no query transformer")),
        }
    }

    /// Decoder prefix rows for a batch of records, every component in inference mode.
    pub fn prefixes(&self, rows: &[&SampleRecord], branches: Branches) -> Result<Tensor> {
        let mut g = Graph::inference();
        let mut ctx = Ctx::eval();
        let n = rows.len();
        let mut branch = |m: Modality, on: bool, g: &mut Graph| -> Result<Option<Var>> {
            if !on {
                return Ok(None);
            }
            let imgs: Vec<&ImageObs> = rows
                .iter()
                .map(|r| {
                    if m == Modality::Vision {
                        &r.vision
                    } else {
                        &r.tactile
                    }
                })
                .collect();
            let t = self.encode_images(m, &imgs)?;
            let tv = g.constant(t);
            Ok(Some(self.queries(g, &mut ctx, m, tv, n)?))
        };
        let qv = branch(Modality::Vision, branches.vision, &mut g)?;
        let qt = branch(Modality::Tactile, branches.tactile, &mut g)?;
        let p = self
            .shared
            .to_prefix(&mut g, &self.store, &mut Ctx::eval(), qv, qt, n)?;
        Ok(g.value(p).clone())
    }

    pub fn prefix_for(&self, row: &SampleRecord, branches: Branches) -> Result<PrefixTokens> {
        Ok(PrefixTokens {
            tokens: self.prefixes(&[row], branches)?,
            num_queries: self.cfg.qformer.num_queries,
        })
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut blocks = Vec::with_capacity(self.store.len());
        for (_, p) in self.store.iter() {
            for v in p.value.data() {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            blocks.push(BlockEntry {
                name: p.name.clone(),
                rows: p.value.rows(),
                cols: p.value.cols(),
                decay: p.decay,
            });
        }
        let manifest = CheckpointManifest {
            config: self.cfg.clone(),
            meta: self.meta.clone(),
            blocks,
            params_sha256: crate::data::content_hash(&blob),
        };
        fs::write(dir.join(CHECKPOINT_BLOB), &blob)?;
        fs::write(
            dir.join(CHECKPOINT_MANIFEST),
            serde_json::to_string_pretty(&manifest)? + "\n",
        )?;
        self.vocab.save(&dir.join(VOCAB_FILE))?;
        Ok(())
    }

    pub fn load(dir: &Path, lora: &LoraConfig) -> Result<Self> {
        let manifest_path = dir.join(CHECKPOINT_MANIFEST);
        if !manifest_path.exists() {
            return Err(Error::Dependency(format!(
                "no checkpoint at {}",
                dir.display()
            )));
        }
        let manifest: CheckpointManifest =
            serde_json::from_str(&fs::read_to_string(&manifest_path)?)?;
        let blob = fs::read(dir.join(CHECKPOINT_BLOB))?;
        if crate::data::content_hash(&blob) != manifest.params_sha256 {
            return Err(Error::data(format!(
                "{} does not match its manifest hash",
                dir.display()
            )));
        }
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        let mut model = Model::new(manifest.config.clone(), vocab, 0)?;
        model.meta = manifest.meta;
        let mut at = 0usize;
        for b in &manifest.blocks {
            let n = b.rows * b.cols;
            let bytes = blob
                .get(at * 8..(at + n) * 8)
                .ok_or_else(|| Error::data("checkpoint blob is truncated"))?;
            at += n;
            let data: Vec<f64> = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            let value = Tensor::new(b.rows, b.cols, data)?;
            match model.store.id(&b.name) {
                Some(id) => {
                    let p = model.store.get_mut(id);
                    if p.value.shape() != value.shape() {
                        return Err(Error::data(format!(
                            "block {} has shape {:?}, model expects {:?}",
                            b.name,
                            value.shape(),
                            p.value.shape()
                        )));
                    }
                    p.value = value;
                }
                None if is_adapter(&b.name) => {
                    model.store.insert(b.name.clone(), value, b.decay)?;
                }
                None => return Err(Error::data(format!("unknown parameter block {}", b.name))),
            }
        }
        if at * 8 != blob.len() {
            return Err(Error::data("checkpoint blob has trailing bytes"));
        }
        model.decoder.rebind_lora(&model.store, lora)?;
        Ok(model)
    }
}
