//! Finite-difference checks of every training loss on a four-sample toy batch.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vtl_tensor::{grad_check, GradCheckOptions, GradCheckReport, Graph, ParamId, ParamStore, Var};

use crate::error::Result;
use crate::nn::{Builder, Ctx};
use crate::objectives::{self, PtmHead};

const N: usize = 4;
const DIM: usize = 6;
const VOCAB: usize = 7;

struct Toy {
    store: ParamStore,
    zv: ParamId,
    zt: ParamId,
    text: ParamId,
    logits: ParamId,
    ptm: PtmHead,
    pairs: Vec<(usize, usize)>,
    labels: Vec<f64>,
    targets: Vec<Vec<usize>>,
}

impl Toy {
    fn new(seed: u64) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: &mut store,
            rng: &mut rng,
        };
        let zv = b.randn("toy.vision", N, DIM, 1.0)?;
        let zt = b.randn("toy.tactile", N, DIM, 1.0)?;
        let text = b.randn("toy.text", N, DIM, 1.0)?;
        // Two samples with answers of two and four tokens, EOS included.
        let logits = b.randn("toy.logits", 6, VOCAB, 1.0)?;
        let ptm = PtmHead::new(&mut b, DIM)?;
        let mut toy = Self {
            store,
            zv,
            zt,
            text,
            logits,
            ptm,
            pairs: Vec::new(),
            labels: Vec::new(),
            targets: vec![vec![1, 2], vec![3, 0, 6, 2]],
        };
        let sim = {
            let mut g = Graph::inference();
            let (f, t) = toy.fused_text(&mut g)?;
            let s = g.matmul_nt(f, t)?;
            g.value(s).clone()
        };
        let negs = objectives::mine_hard_negatives(&sim).expect("batch of four");
        for i in 0..N {
            toy.pairs.push((i, i));
            toy.labels.push(1.0);
            toy.pairs.push((i, negs[i]));
            toy.labels.push(0.0);
        }
        Ok(toy)
    }

    fn unit(&self, g: &mut Graph, id: ParamId) -> Var {
        let v = g.param(&self.store, id);
        g.l2_normalize_rows(v)
    }

    fn fused_text(&self, g: &mut Graph) -> Result<(Var, Var)> {
        let v = self.unit(g, self.zv);
        let t = self.unit(g, self.zt);
        let sum = g.add(v, t)?;
        let fused = g.scale(sum, 0.5);
        Ok((fused, self.unit(g, self.text)))
    }
}

fn contrastive(toy: &Toy, g: &mut Graph, s: &ParamStore) -> Result<Var> {
    let (zv, zt, t) = (
        unit_in(g, s, toy.zv),
        unit_in(g, s, toy.zt),
        unit_in(g, s, toy.text),
    );
    objectives::stage1_contrastive(g, zv, zt, t, 0.07)
}

fn unit_in(g: &mut Graph, s: &ParamStore, id: ParamId) -> Var {
    let v = g.param(s, id);
    g.l2_normalize_rows(v)
}

fn matching(toy: &Toy, g: &mut Graph, s: &ParamStore) -> Result<Var> {
    let (zv, zt, t) = (
        unit_in(g, s, toy.zv),
        unit_in(g, s, toy.zt),
        unit_in(g, s, toy.text),
    );
    let sum = g.add(zv, zt)?;
    let fused = g.scale(sum, 0.5);
    let fi: Vec<usize> = toy.pairs.iter().map(|p| p.0).collect();
    let ti: Vec<usize> = toy.pairs.iter().map(|p| p.1).collect();
    let f = g.gather_rows(fused, &fi)?;
    let t = g.gather_rows(t, &ti)?;
    let p = toy.ptm.forward(g, s, &mut Ctx::eval(), f, t)?;
    objectives::ptm_loss(g, p, &toy.labels)
}

fn vqa(toy: &Toy, g: &mut Graph, s: &ParamStore) -> Result<Var> {
    let l = g.param(s, toy.logits);
    objectives::vqa_loss(g, l, &toy.targets)
}

fn coupling(toy: &Toy, g: &mut Graph, s: &ParamStore) -> Result<Var> {
    let (zv, zt) = (unit_in(g, s, toy.zv), unit_in(g, s, toy.zt));
    objectives::coupling_loss(g, zv, zt, 0.07)
}

type LossFn = fn(&Toy, &mut Graph, &ParamStore) -> Result<Var>;

/// Runs the central-difference check on each loss; returns `(name, report)` in a fixed order.
pub fn loss_gradchecks(seed: u64, tol: f64) -> Result<Vec<(&'static str, GradCheckReport)>> {
    let mut toy = Toy::new(seed)?;
    let losses: [(&'static str, LossFn); 8] = [
        ("infonce", |t, g, s| {
            let (a, b) = (unit_in(g, s, t.zv), unit_in(g, s, t.text));
            objectives::infonce(g, a, b, 0.07)
        }),
        ("stage1_contrastive", contrastive),
        ("matching", matching),
        ("stage1_total", |t, g, s| {
            let c = contrastive(t, g, s)?;
            let m = matching(t, g, s)?;
            objectives::stage1_loss(g, c, Some(m), 1.0)
        }),
        ("vqa", vqa),
        ("coupling", coupling),
        ("stage2_total", |t, g, s| {
            let v = vqa(t, g, s)?;
            let c = coupling(t, g, s)?;
            objectives::stage2_loss(g, v, Some(c), 0.5)
        }),
        ("defect", |t, g, s| {
            let l = g.param(s, t.logits);
            objectives::defect_loss(g, l, &t.targets)
        }),
    ];
    let opts = GradCheckOptions {
        tol,
        ..GradCheckOptions::default()
    };
    let mut out = Vec::with_capacity(losses.len());
    for (name, f) in losses {
        let mut store = std::mem::take(&mut toy.store);
        let report = grad_check(
            |g, s| f(&toy, g, s).map_err(to_tensor_err),
            &mut store,
            &opts,
        )?;
        toy.store = store;
        out.push((name, report));
    }
    Ok(out)
}

fn to_tensor_err(e: crate::Error) -> vtl_tensor::TensorError {
    match e {
        crate::Error::Tensor(t) => t,
        other => vtl_tensor::TensorError::Contract(other.to_string()),
    }
}
