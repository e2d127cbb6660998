use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use vtl_core::config::{Ablation, RunConfig};
use vtl_core::data::{validate, Corpus, Granularity, Split};
use vtl_core::model::Model;
use vtl_core::tensor::TensorError;
use vtl_core::train;
use vtl_core::Error;

#[derive(Parser)]
#[command(
    name = "vtl",
    version,
    about = "Vision-tactile-language alignment: data, training stages and checks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat `key = value` configuration file; unspecified keys keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed (for gen-data: the corpus seeds).
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory holding data, checkpoints and reports.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,
    #[arg(long, value_parser = ["vision-only", "tactile-only", "no-stage1"])]
    ablate: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the main corpus and the defect corpus into <out>/data and <out>/defect.
    GenData(Common),
    /// Check corpus files against the schema and label rules.
    ValidateData {
        #[command(flatten)]
        common: Common,
        /// A single JSONL file; defaults to both corpora under <out>.
        path: Option<PathBuf>,
    },
    /// Contrastive and matching alignment of the query transformers.
    Stage1(Common),
    /// Instruction tuning of the perception-to-prefix path with a frozen decoder.
    Stage2(Common),
    /// Few-shot defect adaptation with low-rank adapters.
    Stage3 {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "2", value_parser = ["2", "3", "5"])]
        granularity: String,
        #[arg(long, default_value = "15", value_parser = ["5", "15", "50"])]
        kshot: String,
    },
    /// Evaluate the stage-2 checkpoint on the test split.
    Eval(Common),
    /// Finite-difference gradient check of every training loss.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        #[arg(long, default_value_t = 3)]
        seed: u64,
    },
    /// Summarize every stage report under <out>.
    Report(Common),
}

impl Common {
    fn ablation(&self) -> Ablation {
        self.ablate
            .as_deref()
            .and_then(Ablation::parse)
            .unwrap_or_default()
    }

    fn config(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.ablate.is_some() {
            cfg.ablation = self.ablation();
        }
        Ok(cfg)
    }
}

fn stage_dir(out: &Path, stage: u8, ablation: Ablation) -> PathBuf {
    match ablation {
        Ablation::None => out.join(format!("stage{stage}")),
        a => out.join(format!("stage{stage}-{}", a.name())),
    }
}

fn load_corpus(path: &Path) -> anyhow::Result<Corpus> {
    if !path.exists() {
        return Err(
            Error::Dependency(format!("{} not found; run gen-data first", path.display())).into(),
        );
    }
    Ok(Corpus::load(path)?)
}

fn load_checkpoint(dir: &Path, cfg: &RunConfig) -> anyhow::Result<Model> {
    Model::load(&dir.join("checkpoint"), &cfg.lora)
        .with_context(|| format!("loading {}", dir.display()))
}

fn gen_data(c: &Common) -> anyhow::Result<()> {
    let cfg = c.config()?;
    for (name, offset, mut data) in [
        ("data", 0, cfg.data.clone()),
        ("defect", 100, cfg.defect_data.clone()),
    ] {
        if let Some(s) = c.seed {
            data.seed = s + offset;
        }
        let corpus = Corpus::generate(&data)?;
        let path = corpus.write(&data, &c.out.join(name))?;
        println!("{}: {} rows", path.display(), corpus.rows.len());
    }
    Ok(())
}

fn validate_data(c: &Common, path: Option<&Path>) -> anyhow::Result<()> {
    let paths = match path {
        Some(p) => vec![p.to_path_buf()],
        None => vec![
            c.out.join("data/corpus.jsonl"),
            c.out.join("defect/corpus.jsonl"),
        ],
    };
    let mut bad = 0;
    for p in paths {
        let report = validate(&p)?;
        println!(
            "{}: {} rows, {} violations",
            p.display(),
            report.rows,
            report.violations.len()
        );
        for v in &report.violations {
            println!("  line {} id {:?}: {}", v.line, v.id, v.message);
        }
        bad += report.violations.len();
    }
    if bad > 0 {
        return Err(Error::Data(format!("{bad} schema violations")).into());
    }
    Ok(())
}

fn stage1(c: &Common) -> anyhow::Result<()> {
    let cfg = c.config()?;
    if cfg.ablation == Ablation::NoStage1 {
        return Err(Error::Config("stage1 cannot run with --ablate no-stage1".into()).into());
    }
    let corpus = load_corpus(&c.out.join("data/corpus.jsonl"))?;
    let (mut model, _) = train::init_model(&cfg)?;
    let dir = stage_dir(&c.out, 1, cfg.ablation);
    let outcome = train::run_stage1(&mut model, &corpus, &cfg, Some(&dir))?;
    println!("{}", serde_json::to_string(outcome.selected_metrics())?);
    Ok(())
}

fn stage2(c: &Common) -> anyhow::Result<()> {
    let cfg = c.config()?;
    let corpus = load_corpus(&c.out.join("data/corpus.jsonl"))?;
    let mut model = match cfg.ablation {
        Ablation::NoStage1 => train::init_model(&cfg)?.0,
        a => load_checkpoint(&stage_dir(&c.out, 1, a), &cfg)?,
    };
    let dir = stage_dir(&c.out, 2, cfg.ablation);
    let outcome = train::run_stage2(&mut model, &corpus, &cfg, Some(&dir))?;
    println!("{}", serde_json::to_string(&outcome.test)?);
    Ok(())
}

fn stage3(c: &Common, granularity: usize, k: usize) -> anyhow::Result<()> {
    let cfg = c.config()?;
    let g = Granularity::from_count(granularity)?;
    let corpus = load_corpus(&c.out.join("defect/corpus.jsonl"))?;
    let mut model = load_checkpoint(&stage_dir(&c.out, 2, cfg.ablation), &cfg)?;
    let mut dir = stage_dir(&c.out, 3, cfg.ablation).into_os_string();
    dir.push(format!("-g{granularity}-k{k}"));
    let outcome = train::run_stage3(&mut model, &corpus, &cfg, g, k, Some(Path::new(&dir)))?;
    println!("{}", serde_json::to_string(&outcome.test)?);
    Ok(())
}

fn eval(c: &Common) -> anyhow::Result<()> {
    let cfg = c.config()?;
    let corpus = load_corpus(&c.out.join("data/corpus.jsonl"))?;
    let dir = stage_dir(&c.out, 2, cfg.ablation);
    let model = load_checkpoint(&dir, &cfg)?;
    let report = train::evaluate_rows(&model, &corpus.split(Split::Test), &cfg)?;
    let text = serde_json::to_string_pretty(&report)?;
    fs::write(dir.join("eval.json"), format!("{text}\n"))?;
    println!("{text}");
    Ok(())
}

fn gradcheck(tol: f64, seed: u64) -> anyhow::Result<()> {
    let reports = vtl_core::checks::loss_gradchecks(seed, tol)?;
    println!("{:<20} {:>12}  result", "loss", "rel_err");
    let mut worst: f64 = 0.0;
    for (name, r) in &reports {
        println!(
            "{name:<20} {:>12.3e}  {}",
            r.worst(),
            if r.passed { "ok" } else { "FAIL" }
        );
        if !r.passed {
            worst = worst.max(r.worst());
        }
    }
    if reports.iter().any(|(_, r)| !r.passed) {
        return Err(Error::GradCheck { worst }.into());
    }
    Ok(())
}

fn report(c: &Common) -> anyhow::Result<()> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(&c.out)
        .map_err(|e| Error::Dependency(format!("{}: {e}", c.out.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("report.json").exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        bail!(Error::Dependency(format!(
            "no stage reports under {}",
            c.out.display()
        )));
    }
    for d in dirs {
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(d.join("report.json"))?)?;
        let o = &v["outcome"];
        let sel = o["selected"].as_u64().unwrap_or(0) as usize;
        println!(
            "{:<28} stage {}  selected epoch {sel}  val {}  test {}",
            d.file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default(),
            v["stage"],
            o["history"][sel]["metrics"],
            o["test"]
        );
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config(_)) => 1,
        Some(Error::NonFiniteLoss { .. } | Error::GradCheck { .. }) => 3,
        Some(Error::Tensor(TensorError::NonFinite { .. })) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.cmd {
        Cmd::GenData(c) => gen_data(c),
        Cmd::ValidateData { common, path } => validate_data(common, path.as_deref()),
        Cmd::Stage1(c) => stage1(c),
        Cmd::Stage2(c) => stage2(c),
        Cmd::Stage3 {
            common,
            granularity,
            kshot,
        } => stage3(
            common,
            granularity.parse().unwrap_or(2),
            kshot.parse().unwrap_or(15),
        ),
        Cmd::Eval(c) => eval(c),
        Cmd::Gradcheck { tol, seed } => gradcheck(*tol, *seed),
        Cmd::Report(c) => report(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
