use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
data.n_objects = 12
data.samples_per_object = 2
defect_data.n_objects = 40
defect_data.samples_per_object = 3
warmup.objects = 8
warmup.stage.steps = 2
warmup.stage.batch = 4
stage1.steps = 2
stage1.batch = 4
stage1.eval_every = 2
stage2.steps = 2
stage2.batch = 4
stage2.eval_every = 2
stage3.steps = 2
stage3.batch = 4
stage3.eval_every = 2
eval.max_new = 3
";

fn vtl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vtl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = vtl(args);
    assert!(
        o.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8(o.stdout).unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn setup(dir: &Path) -> String {
    let conf = dir.join("tiny.conf");
    fs::write(&conf, TINY).unwrap();
    conf.to_str().unwrap().to_string()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&vtl(&["stage1", "--no-such-flag"])), 1);
    assert_eq!(code(&vtl(&["stage3", "--kshot", "7"])), 1);
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.conf");
    fs::write(&bad, "stage9.steps = 1\n").unwrap();
    let o = vtl(&[
        "gen-data",
        "--config",
        bad.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("stage9"));
    let o = vtl(&[
        "stage1",
        "--ablate",
        "no-stage1",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn missing_inputs_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    assert_eq!(code(&vtl(&["stage2", "--out", out])), 2);
    assert_eq!(code(&vtl(&["report", "--out", out])), 2);
}

#[test]
fn gradcheck_prints_a_table_and_fails_at_zero_tolerance() {
    let text = ok(&["gradcheck"]);
    let lines: Vec<&str> = text.lines().collect();
    assert!(lines[0].starts_with("loss"));
    assert!(lines.len() > 4);
    assert!(lines[1..].iter().all(|l| l.ends_with("ok")), "{text}");
    assert_eq!(code(&vtl(&["gradcheck", "--tol", "0"])), 3);
}

#[test]
fn tiny_pipeline_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let conf = setup(dir.path());
    let out = dir.path().join("run");
    let out = out.to_str().unwrap();
    let common = ["--config", conf.as_str(), "--out", out];
    let with = |cmd: &[&str]| -> Vec<String> {
        cmd.iter().chain(&common).map(|s| s.to_string()).collect()
    };
    let run = |cmd: &[&str]| {
        let args = with(cmd);
        ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
    };
    let gen = run(&["gen-data"]);
    assert!(gen.contains("96 rows") && gen.contains("120 rows"), "{gen}");
    assert!(run(&["validate-data"]).contains("0 violations"));
    run(&["stage1"]);
    run(&["stage2"]);
    run(&["stage3", "--granularity", "2", "--kshot", "5"]);
    run(&["eval"]);
    for d in ["stage1", "stage2", "stage3-g2-k5"] {
        let p = Path::new(out).join(d);
        assert!(
            p.join("metrics.csv").exists() && p.join("report.json").exists(),
            "{d}"
        );
    }
    assert!(Path::new(out).join("stage2/eval.json").exists());
    let summary = run(&["report"]);
    assert_eq!(summary.lines().count(), 3, "{summary}");

    // The no-stage1 ablation starts stage 2 from the warmed model, so it needs no stage-1 checkpoint.
    fs::remove_dir_all(Path::new(out).join("stage1")).unwrap();
    run(&["stage2", "--ablate", "no-stage1"]);
    assert!(Path::new(out).join("stage2-no-stage1/checkpoint").exists());
    let o = vtl(&with(&["stage2", "--ablate", "vision-only"])
        .iter()
        .map(String::as_str)
        .collect::<Vec<_>>());
    assert_eq!(code(&o), 2);
}

#[test]
fn data_generation_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let conf = setup(dir.path());
    for name in ["a", "b"] {
        ok(&[
            "gen-data",
            "--config",
            &conf,
            "--out",
            dir.path().join(name).to_str().unwrap(),
            "--seed",
            "5",
        ]);
    }
    for f in ["data/corpus.jsonl", "defect/corpus.jsonl"] {
        assert_eq!(
            fs::read(dir.path().join("a").join(f)).unwrap(),
            fs::read(dir.path().join("b").join(f)).unwrap()
        );
    }
    assert_ne!(
        fs::read(dir.path().join("a/data/corpus.jsonl")).unwrap(),
        fs::read(dir.path().join("a/defect/corpus.jsonl")).unwrap()
    );
}
