use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set", "width=16", "--set", "layers=1", "--set", "heads=2", "--set", "feature_dim=16",
    "--set", "planner_hidden=16", "--set", "head_hidden=16", "--set", "embed_dim=4",
    "--set", "batch_size=2", "--set", "stage2_batch=2", "--set", "group=4", "--set", "sde_steps=4",
    "--set", "eval_steps=4",
];

fn drivewm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drivewm")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = drivewm(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small(extra: &[&str]) -> Vec<String> {
    SMALL.iter().chain(extra).map(|s| s.to_string()).collect()
}

fn run_small(extra: &[&str]) -> Output {
    let args = small(extra);
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>())
}

#[test]
fn gen_scenarios_lines_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let e = dir.path().join("e.jsonl");
    ok(&["gen-scenarios", "--seed", "3", "--count", "10", "--out", p(&a)]);
    ok(&["gen-scenarios", "--seed", "3", "--count", "10", "--out", p(&b)]);
    ok(&["gen-scenarios", "--seed", "3", "--count", "0", "--out", p(&e)]);
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text.lines().count(), 10);
    assert!(text.lines().all(|l| l.contains("\"v\":1")));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(std::fs::read(&e).unwrap().len(), 0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(drivewm(&["train", "--stage", "2", "--out", p(&out)]).status.code(), Some(2));
    assert_eq!(drivewm(&["train", "--stage", "3", "--out", p(&out)]).status.code(), Some(2));
    assert_eq!(drivewm(&["--set", "bogus=1", "eval", "--baseline", "expert", "--out", p(&out)]).status.code(), Some(2));
    let missing = dir.path().join("missing.bin");
    assert_eq!(drivewm(&["eval", "--ckpt", p(&missing), "--out", p(&out)]).status.code(), Some(3));
    let blocked = dir.path().join("file");
    std::fs::write(&blocked, "x").unwrap();
    let unwritable = blocked.join("s.jsonl");
    assert_eq!(drivewm(&["gen-scenarios", "--seed", "0", "--count", "1", "--out", p(&unwritable)]).status.code(), Some(3));
    // A learning rate this large overflows on the first update.
    let code = drivewm(&small(&["--set", "train_count=2", "--set", "lr_stage1=1e300", "train", "--stage", "1", "--steps", "3", "--out", p(&out)])
        .iter().map(String::as_str).collect::<Vec<_>>()).status.code();
    assert_eq!(code, Some(4));
}

#[test]
fn baseline_eval_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for d in [&a, &b] {
        ok(&["--set", "eval_count=6", "eval", "--baseline", "zero-motion", "--out", p(d)]);
    }
    let summary: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["planner"], "zero-motion");
    assert_eq!(summary["count"], 6);
    assert_eq!(std::fs::read(a.join("scores.csv")).unwrap(), std::fs::read(b.join("scores.csv")).unwrap());
    assert!(a.join("config.toml").exists());
}

#[test]
fn train_resume_eval_rollout() {
    let dir = tempfile::tempdir().unwrap();
    let d = |s: &str| dir.path().join(s);
    let scen = d("train.jsonl");
    ok(&["gen-scenarios", "--seed", "0", "--count", "4", "--out", p(&scen)]);

    run_small(&["train", "--stage", "1", "--scenarios", p(&scen), "--steps", "4", "--out", p(&d("s1"))]);
    run_small(&["train", "--stage", "1", "--scenarios", p(&scen), "--steps", "2", "--out", p(&d("s1r"))]);
    run_small(&["train", "--stage", "1", "--scenarios", p(&scen), "--steps", "4", "--resume", p(&d("s1r/checkpoint.bin")), "--out", p(&d("s1r"))]);
    assert_eq!(
        std::fs::read(d("s1/checkpoint.bin")).unwrap(),
        std::fs::read(d("s1r/checkpoint.bin")).unwrap()
    );
    assert_eq!(
        std::fs::read_to_string(d("s1/stage1.csv")).unwrap(),
        std::fs::read_to_string(d("s1r/stage1.csv")).unwrap()
    );

    let ck1 = drivewm::checkpoint::Checkpoint::load(&d("s1/checkpoint.bin")).unwrap();
    run_small(&["train", "--stage", "2", "--scenarios", p(&scen), "--init", p(&d("s1/checkpoint.bin")), "--steps", "2", "--out", p(&d("s2"))]);
    let ck2 = drivewm::checkpoint::Checkpoint::load(&d("s2/checkpoint.bin")).unwrap();
    let (c1, c2) = (ck1.model.checksums(), ck2.model.checksums());
    assert_eq!((c1.encoder, c1.backbone, c1.heads), (c2.encoder, c2.backbone, c2.heads));
    assert_ne!(c1.planner, c2.planner);
    assert_eq!(std::fs::read_to_string(d("s2/stage2.csv")).unwrap().lines().count(), 3);

    // The resolved configuration alone reproduces the stage-2 run.
    let cfg = d("s2/config.toml");
    ok(&["--config", p(&cfg), "train", "--stage", "2", "--scenarios", p(&scen), "--init", p(&d("s1/checkpoint.bin")), "--out", p(&d("s2b"))]);
    assert_eq!(std::fs::read(d("s2/checkpoint.bin")).unwrap(), std::fs::read(d("s2b/checkpoint.bin")).unwrap());

    let ev = ok(&["--set", "eval_count=3", "eval", "--ckpt", p(&d("s2/checkpoint.bin")), "--dump-forecasts", "--out", p(&d("ev"))]);
    assert!(String::from_utf8_lossy(&ev.stdout).contains("mean aggregate"));
    assert!(d("ev/summary.json").exists());
    assert!(std::fs::read_to_string(d("ev/forecasts.csv")).unwrap().lines().count() > 1);

    ok(&["rollout", "--ckpt", p(&d("s2/checkpoint.bin")), "--scenarios", p(&scen), "--index", "1", "--render", "--out", p(&d("ro"))]);
    let trace = std::fs::read_to_string(d("ro/trace.csv")).unwrap();
    let rows: Vec<Vec<&str>> = trace.lines().skip(1).map(|l| l.split(',').collect()).collect();
    let cfg = drivewm::config::RunConfig::load(&d("ro/config.toml")).unwrap();
    assert_eq!(rows.len(), cfg.horizon);
    let planned: String = rows.iter().map(|r| format!("{},{}", r[1], r[2])).collect::<Vec<_>>().join(" ");
    for k in 1..=cfg.horizon {
        let svg = std::fs::read_to_string(d(&format!("ro/frame_{k:02}.svg"))).unwrap();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert_balanced(&svg);
        let line = svg.lines().find(|l| l.contains("class=\"planned\"")).unwrap();
        assert!(line.contains(&format!("points=\"{planned}\"")), "{line}");
    }
    assert!(!d(&format!("ro/frame_{:02}.svg", cfg.horizon + 1)).exists());
}

/// Tags open and close in order and every attribute value is quoted.
fn assert_balanced(svg: &str) {
    let mut stack = Vec::new();
    let mut rest = svg;
    while let Some(start) = rest.find('<') {
        let end = rest[start..].find('>').expect("unterminated tag") + start;
        let tag = &rest[start + 1..end];
        assert_eq!(tag.matches('"').count() % 2, 0, "{tag}");
        let name = tag.trim_start_matches('/').split_whitespace().next().unwrap().trim_end_matches('/');
        if tag.starts_with('/') {
            assert_eq!(stack.pop(), Some(name.to_string()));
        } else if !tag.ends_with('/') {
            stack.push(name.to_string());
        }
        rest = &rest[end + 1..];
    }
    assert!(stack.is_empty(), "unclosed {stack:?}");
}
