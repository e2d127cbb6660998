//! Acceptance suite. Runs every criterion at its pinned tolerance, prints one
//! verdict line per criterion and exits non-zero if any of them fails.

mod oracles;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use oracles::{recall_case, rule_oracle, TAXONOMY_FIXTURES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vtl_core::checks::loss_gradchecks;
use vtl_core::config::{Ablation, RunConfig};
use vtl_core::data::labels::descriptor_vocabulary;
use vtl_core::data::{Corpus, CorpusConfig, Granularity};
use vtl_core::eval::{descriptor_recall, map_to_taxonomy, mean_task_score};
use vtl_core::model::{is_adapter, Model};
use vtl_core::objectives::{infonce, vqa_loss};
use vtl_core::qformer::PrefixTokens;
use vtl_core::tensor::{Graph, Tensor};
use vtl_core::train::{init_model, run_stage1, run_stage2, run_stage3};

type Outcome = vtl_core::Result<(bool, String)>;

struct Suite {
    lines: Vec<(u8, &'static str, bool, String)>,
}

impl Suite {
    fn record(&mut self, id: u8, name: &'static str, outcome: Outcome) {
        let (pass, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        eprintln!(
            "[acceptance] criterion {id} done: {}",
            if pass { "PASS" } else { "FAIL" }
        );
        self.lines.push((id, name, pass, detail));
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn progress(msg: &str, since: Instant) {
    eprintln!(
        "[acceptance] {msg} ({:.1} s)",
        since.elapsed().as_secs_f64()
    );
}

fn unit_rows(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / norm).collect()
        })
        .collect();
    Tensor::from_rows(&rows).expect("rectangular rows")
}

fn nce(z: &Tensor, t: &Tensor, tau: f64) -> vtl_core::Result<f64> {
    let mut g = Graph::inference();
    let (a, b) = (g.constant(z.clone()), g.constant(t.clone()));
    let l = infonce(&mut g, a, b, tau)?;
    Ok(g.value(l).item())
}

fn gradient_fidelity() -> Outcome {
    let t = Instant::now();
    let reports = loss_gradchecks(3, 1e-4)?;
    let secs = t.elapsed().as_secs_f64();
    let worst = reports.iter().map(|(_, r)| r.worst()).fold(0.0, f64::max);
    let failed: Vec<&str> = reports
        .iter()
        .filter(|(_, r)| !r.passed)
        .map(|(n, _)| *n)
        .collect();
    Ok((
        failed.is_empty() && secs < 120.0,
        format!(
            "{} losses, worst rel err {worst:.2e}, failed {failed:?}, {secs:.1} s",
            reports.len()
        ),
    ))
}

fn infonce_closed_forms() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let single = nce(&unit_rows(1, 8, &mut rng), &unit_rows(1, 8, &mut rng), 0.07)?;
    let (a, b) = (unit_rows(1, 8, &mut rng), unit_rows(1, 8, &mut rng));
    let rep = |x: &Tensor| Tensor::from_rows(&vec![x.row_slice(0).to_vec(); 4]).expect("rows");
    let equal = nce(&rep(&a), &rep(&b), 0.07)?;
    let (mut symmetric, mut min) = (true, f64::INFINITY);
    for _ in 0..1000 {
        let n = rng.gen_range(1..9);
        let tau = rng.gen_range(0.02..1.0);
        let (z, t) = (unit_rows(n, 8, &mut rng), unit_rows(n, 8, &mut rng));
        let (ab, ba) = (nce(&z, &t, tau)?, nce(&t, &z, tau)?);
        symmetric &= ab.to_bits() == ba.to_bits();
        min = min.min(ab);
    }
    let pass = single == 0.0 && (equal - 4f64.ln()).abs() <= 1e-9 && symmetric && min >= 0.0;
    Ok((
        pass,
        format!(
            "N=1 {single}, equal-sims err {:.1e}, swap exact {symmetric}, min over 1000 batches {min:.4}",
            (equal - 4f64.ln()).abs()
        ),
    ))
}

fn vqa_normalization() -> Outcome {
    let v = 97;
    let mut g = Graph::inference();
    let logits = g.constant(Tensor::zeros(6, v));
    let l = vqa_loss(&mut g, logits, &[vec![5, 2], vec![7, 8, 9, 2]])?;
    let err = (g.value(l).item() - 3.0 * (v as f64).ln()).abs();
    Ok((err <= 1e-9, format!("V={v}, |loss - 3 ln V| = {err:.1e}")))
}

fn metric_oracles() -> Outcome {
    let vocab = descriptor_vocabulary();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut recall_hits = 0;
    for _ in 0..1000 {
        let (samples, want) = recall_case(&vocab, &mut rng);
        recall_hits += usize::from(descriptor_recall(&samples)? == want);
    }
    let score = mean_task_score(0.8889, 0.7513, 0.5481);
    let mut agree = 0;
    for (text, g, want) in TAXONOMY_FIXTURES {
        let tax = g.taxonomy();
        let got = map_to_taxonomy(text, &tax).label();
        agree += usize::from(got == rule_oracle(text, &tax.labels) && got == want);
    }
    let pass = recall_hits == 1000
        && (score - 0.7294).abs() <= 1e-4
        && (score * 100.0 - 72.95).abs() <= 0.01
        && agree == 20;
    Ok((
        pass,
        format!("recall {recall_hits}/1000 exact, headline {score:.5}, taxonomy {agree}/20"),
    ))
}

fn lora_exactness(stage2: &Model, cfg: &RunConfig, hash_kept: bool) -> Outcome {
    let mut m = stage2.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let lq = m.cfg.qformer.num_queries;
    let width = m.cfg.decoder.width;
    let vocab = m.vocab.len();
    let mut inputs = Vec::new();
    for i in 0..100 {
        let prefix = PrefixTokens {
            tokens: Tensor::randn(2 * lq, width, 0.5, &mut rng),
            num_queries: lq,
        };
        let ids: Vec<usize> = (0..3 + i % 5).map(|_| rng.gen_range(5..vocab)).collect();
        inputs.push((prefix, ids));
    }
    let base: Vec<Tensor> = inputs
        .iter()
        .map(|(p, ids)| m.decoder.forward_with_prefix(&m.store, p, ids))
        .collect::<vtl_core::Result<_>>()?;
    m.attach_lora(&cfg.lora, 5)?;
    let mut zero_init = true;
    for ((p, ids), want) in inputs.iter().zip(&base) {
        zero_init &= m
            .decoder
            .forward_with_prefix(&m.store, p, ids)?
            .bitwise_eq(want);
    }
    let b_ids: Vec<_> = m
        .decoder
        .attention_projections()
        .filter_map(|l| l.lora.as_ref().map(|a| a.b))
        .collect();
    for id in b_ids {
        let [r, c] = m.store.value(id).shape();
        m.store.get_mut(id).value = Tensor::randn(r, c, 0.05, &mut rng);
    }
    let snapshot: Vec<Tensor> = m.store.iter().map(|(_, p)| p.value.clone()).collect();
    let adapter: Vec<Tensor> = inputs
        .iter()
        .map(|(p, ids)| m.decoder.forward_with_prefix(&m.store, p, ids))
        .collect::<vtl_core::Result<_>>()?;
    m.decoder.merge_lora(&mut m.store)?;
    let mut worst: f64 = 0.0;
    for ((p, ids), want) in inputs.iter().zip(&adapter) {
        worst = worst.max(
            m.decoder
                .forward_with_prefix(&m.store, p, ids)?
                .max_abs_diff(want),
        );
    }
    m.decoder.unmerge_lora(&mut m.store)?;
    let restored = m
        .store
        .iter()
        .zip(&snapshot)
        .all(|((_, p), s)| p.value.bitwise_eq(s));
    Ok((
        zero_init && restored && worst <= 1e-6 && hash_kept,
        format!(
            "zero-B bitwise {zero_init}, round trip bitwise {restored}, merged vs adapter {worst:.1e} on 100 inputs, \
             non-adapter hash kept across stage 3 {hash_kept}"
        ),
    ))
}

fn with_ablation(cfg: &RunConfig, a: Ablation) -> RunConfig {
    RunConfig {
        ablation: a,
        ..cfg.clone()
    }
}

fn determinism(cfg: &RunConfig, dir: &Path) -> Outcome {
    let mut small = cfg.clone();
    small.warmup.stage.steps = 20;
    for s in [&mut small.stage1, &mut small.stage2, &mut small.stage3] {
        s.steps = 20;
        s.eval_every = 10;
    }
    let run = |out: &Path| -> vtl_core::Result<()> {
        let data = Corpus::generate(&small.data)?;
        let defects = Corpus::generate(&small.defect_data)?;
        let (mut m, _) = init_model(&small)?;
        run_stage1(&mut m, &data, &small, Some(&out.join("stage1")))?;
        run_stage2(&mut m, &data, &small, Some(&out.join("stage2")))?;
        run_stage3(
            &mut m,
            &defects,
            &small,
            Granularity::Two,
            5,
            Some(&out.join("stage3")),
        )?;
        Ok(())
    };
    let (a, b) = (dir.join("repeat-a"), dir.join("repeat-b"));
    run(&a)?;
    run(&b)?;
    let mut same = Vec::new();
    for stage in ["stage1", "stage2", "stage3"] {
        let x = fs::read(a.join(stage).join("metrics.csv"))?;
        let y = fs::read(b.join(stage).join("metrics.csv"))?;
        same.push(x == y && !x.is_empty());
    }
    Ok((
        same.iter().all(|&s| s),
        format!("metrics.csv identical per stage {same:?}"),
    ))
}

fn main() -> ExitCode {
    let start = Instant::now();
    let root = workspace_root();
    let cfg = match RunConfig::load(&root.join("configs/acceptance.conf")) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("cannot load configs/acceptance.conf: {e}");
            return ExitCode::FAILURE;
        }
    };
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    let _ = fs::remove_dir_all(&dir);
    let mut suite = Suite { lines: Vec::new() };

    suite.record(1, "gradient fidelity", gradient_fidelity());
    suite.record(2, "contrastive closed forms", infonce_closed_forms());
    suite.record(3, "answer-loss normalization", vqa_normalization());
    suite.record(8, "metric oracles", metric_oracles());
    progress("closed-form criteria done", start);

    let learned = (|| -> vtl_core::Result<()> {
        let base_cfg = RunConfig {
            data: CorpusConfig::default(),
            ..cfg.clone()
        };
        let base_data = Corpus::generate(&base_cfg.data)?;
        let (warm, _) = init_model(&cfg)?;
        progress("decoder warmed", start);

        let t = Instant::now();
        let mut aligned = warm.clone();
        let s1 = run_stage1(
            &mut aligned,
            &base_data,
            &base_cfg,
            Some(&dir.join("stage1")),
        )?;
        let s1_secs = t.elapsed().as_secs_f64();
        let r = s1.selected_metrics();
        let dirs = [
            r.vision_to_text,
            r.text_to_vision,
            r.tactile_to_text,
            r.text_to_tactile,
        ]
        .map(|v| v.unwrap_or(f64::NAN));
        let n = base_cfg.data.n_objects;
        suite.record(
            4,
            "stage-1 alignment",
            Ok((
                dirs.iter().all(|&v| v >= 0.95) && cfg.stage1.steps <= 2000 && n == 64 && s1_secs <= 600.0,
                format!(
                    "retrieval@1 v->t {:.3} t->v {:.3} tac->t {:.3} t->tac {:.3}, {n} objects, {} steps, {s1_secs:.0} s",
                    dirs[0], dirs[1], dirs[2], dirs[3], cfg.stage1.steps
                ),
            )),
        );
        progress("stage 1 done", start);

        let vision_cfg = with_ablation(&base_cfg, Ablation::VisionOnly);
        let no_s1_cfg = with_ablation(&base_cfg, Ablation::NoStage1);
        let mut vision = warm.clone();
        run_stage1(&mut vision, &base_data, &vision_cfg, None)?;
        let mut stage2 = Vec::new();
        for (name, mut m, c) in [
            ("full", aligned, &base_cfg),
            ("vision-only", vision, &vision_cfg),
            ("no-stage1", warm.clone(), &no_s1_cfg),
        ] {
            let t = Instant::now();
            let o = run_stage2(
                &mut m,
                &base_data,
                c,
                Some(&dir.join(format!("stage2-{name}"))),
            )?;
            stage2.push((name, o, t.elapsed().as_secs_f64()));
            progress(&format!("stage 2 {name} done"), start);
        }
        let sel = |i: usize| stage2[i].1.history[stage2[i].1.selected].score;
        let f = stage2[0].1.selected_metrics();
        let slowest = stage2.iter().map(|s| s.2).fold(0.0, f64::max);
        suite.record(
            5,
            "stage-2 property learning",
            Ok((
                f.hardness_acc >= 0.90
                    && f.roughness_acc >= 0.80
                    && f.descriptor_recall >= 0.50
                    && slowest <= 1800.0
                    && sel(0) > sel(1)
                    && sel(0) > sel(2),
                format!(
                    "val hardness {:.3} roughness {:.3} recall {:.3}; mean task score full {:.4} vision-only {:.4} \
                     no-stage1 {:.4}; slowest {slowest:.0} s",
                    f.hardness_acc,
                    f.roughness_acc,
                    f.descriptor_recall,
                    sel(0),
                    sel(1),
                    sel(2)
                ),
            )),
        );

        // Few-shot adaptation starts from models trained on the larger configured corpus.
        let data = Corpus::generate(&cfg.data)?;
        let defects = Corpus::generate(&cfg.defect_data)?;
        let vision_cfg = with_ablation(&cfg, Ablation::VisionOnly);
        let mut full = warm.clone();
        let mut vision = warm;
        for (name, m, c) in [
            ("full", &mut full, &cfg),
            ("vision-only", &mut vision, &vision_cfg),
        ] {
            run_stage1(m, &data, c, None)?;
            run_stage2(m, &data, c, Some(&dir.join(format!("fewshot-base-{name}"))))?;
            progress(&format!("few-shot base model {name} done"), start);
        }

        let adapt = |m: &Model,
                     c: &RunConfig,
                     g: Granularity,
                     k: usize|
         -> vtl_core::Result<(f64, f64, bool)> {
            let mut m = m.clone();
            let before = m.fingerprint(|n| !is_adapter(n));
            let t = Instant::now();
            let tag = format!("stage3-{}-g{}-k{k}", c.ablation.name(), g.count());
            let o = run_stage3(&mut m, &defects, c, g, k, Some(&dir.join(&tag)))?;
            progress(&format!("{tag} done"), start);
            let kept = m.fingerprint(|n| !is_adapter(n)) == before;
            Ok((
                o.test.map_or(0.0, |r| r.accuracy),
                t.elapsed().as_secs_f64(),
                kept,
            ))
        };
        let (a5, t5, k5) = adapt(&full, &cfg, Granularity::Two, 5)?;
        let (a15, t15, k15) = adapt(&full, &cfg, Granularity::Two, 15)?;
        let (a50, t50, k50) = adapt(&full, &cfg, Granularity::Two, 50)?;
        let (vt3, tv, kv) = adapt(&full, &cfg, Granularity::Three, 15)?;
        let (v3, tvo, kvo) = adapt(&vision, &vision_cfg, Granularity::Three, 15)?;
        let slowest = [t5, t15, t50, tv, tvo].into_iter().fold(0.0, f64::max);
        suite.record(
            6,
            "stage-3 few-shot behavior",
            Ok((
                a50 >= 0.95 && a50 >= a15 && a15 >= a5 - 0.05 && vt3 - v3 >= 0.10 && slowest <= 600.0,
                format!(
                    "g2 test acc K=5 {a5:.3} K=15 {a15:.3} K=50 {a50:.3}; g3 K=15 V+T {vt3:.3} vision-only {v3:.3}; \
                     slowest {slowest:.0} s"
                ),
            )),
        );
        suite.record(
            7,
            "adapter exactness",
            lora_exactness(&full, &cfg, k5 && k15 && k50 && kv && kvo),
        );
        Ok(())
    })();
    if let Err(e) = learned {
        for (id, name) in [
            (4, "stage-1 alignment"),
            (5, "stage-2 property learning"),
            (6, "stage-3 few-shot behavior"),
            (7, "adapter exactness"),
        ] {
            if !suite.lines.iter().any(|l| l.0 == id) {
                suite.record(
                    id,
                    name,
                    Err(vtl_core::Error::Contract(format!("pipeline aborted: {e}"))),
                );
            }
        }
    }
    suite.record(9, "determinism", determinism(&cfg, &dir));

    suite.lines.sort_by_key(|l| l.0);
    println!();
    for (id, name, pass, detail) in &suite.lines {
        println!(
            "criterion {id} {name}: {} ({detail})",
            if *pass { "PASS" } else { "FAIL" }
        );
    }
    let passed = suite.lines.iter().filter(|l| l.2).count();
    println!(
        "acceptance: {passed}/{} passed in {:.0} s",
        suite.lines.len(),
        start.elapsed().as_secs_f64()
    );
    if passed == suite.lines.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
