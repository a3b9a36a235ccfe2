use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/mini").join(name)
}

fn pal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pal")).args(args).output().unwrap()
}

fn pal_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pal")).args(args).env(key, value).output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Matches both fixture pools into `dir`, returning (labelled, unlabelled).
fn match_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let cfg = fixture("config.toml");
    let l = dir.join("labelled.matched.jsonl");
    let u = dir.join("unlabelled.matched.jsonl");
    let o = pal(&[
        "match",
        "--detections",
        s(&fixture("labelled.detections.jsonl")),
        "--proposals",
        s(&fixture("labelled.proposals.jsonl")),
        "--gt",
        s(&fixture("gt.jsonl")),
        "--config",
        s(&cfg),
        "--out",
        s(&l),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = pal(&[
        "match",
        "--detections",
        s(&fixture("unlabelled.detections.jsonl")),
        "--proposals",
        s(&fixture("unlabelled.proposals.jsonl")),
        "--config",
        s(&cfg),
        "--out",
        s(&u),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    (l, u)
}

fn select(l: &Path, u: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "select",
        "--labelled",
        s(l),
        "--unlabelled",
        s(u),
        "--embeddings",
        s(Box::leak(Box::new(fixture("embeddings.palemb")))),
        "--config",
        s(Box::leak(Box::new(fixture("config.toml")))),
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    pal(&args)
}

#[test]
fn select_reproduces_golden_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (l, u) = match_fixture(dir.path());
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    assert!(select(&l, &u, &a, &[]).status.success());
    assert!(select(&l, &u, &b, &[]).status.success());
    let golden = std::fs::read(fixture("golden_manifest.json")).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), golden);
    assert_eq!(std::fs::read(&b).unwrap(), golden);
}

#[test]
fn zero_budget_selects_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let (l, u) = match_fixture(dir.path());
    let out = dir.path().join("m.json");
    let o = select(&l, &u, &out, &["--budget", "0"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = pal_core::io::load_selection_manifest(&out).unwrap();
    assert_eq!(m.totals.selected, 0);
    assert!(m.selected_ids().is_empty());
}

#[test]
fn state_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (l, u) = match_fixture(dir.path());
    let out = dir.path().join("m.json");
    let state = dir.path().join("state.json");
    let o = select(&l, &u, &out, &["--state-out", s(&state)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let next: pal_core::RoundState = serde_json::from_str(&std::fs::read_to_string(&state).unwrap()).unwrap();
    let m = pal_core::io::load_selection_manifest(&out).unwrap();
    assert_eq!(next.round, 2);
    assert!(m.selected_ids().iter().all(|id| next.labelled.contains(id) && !next.unlabelled.contains(id)));
    // feeding the new state with the old files must fail: detections of
    // now-labelled images are still listed as unlabelled
    let o = select(&l, &u, &out, &["--state", s(&state)]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn match_output_feeds_score() {
    let dir = tempfile::tempdir().unwrap();
    let (l, u) = match_fixture(dir.path());
    let models = dir.path().join("models.json");
    let o = pal(&["train-clc", "--labelled", s(&l), "--out", s(&models)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let o = pal(&["score", "--unlabelled", s(&u), "--models", s(&models), "--out", s(&a)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = pal(&["score", "--unlabelled", s(&u), "--labelled", s(&l), "--out", s(&b)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let scores = pal_core::io::records::load_scores(&a).unwrap();
    assert_eq!(scores, pal_core::io::records::load_scores(&b).unwrap());
    let pool = pal_core::io::load_matched(&u).unwrap();
    assert_eq!(scores.len(), pool.records.len());
    assert!(scores.iter().all(|x| (0.0..=std::f64::consts::LN_2).contains(&x.lius)));
}

#[test]
fn unlabelled_pool_cannot_train() {
    let dir = tempfile::tempdir().unwrap();
    let (_, u) = match_fixture(dir.path());
    let o = pal(&["train-clc", "--labelled", s(&u), "--out", s(&dir.path().join("m.json"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("TP/FP label"), "{}", stderr(&o));
}

#[test]
fn missing_proposals_file_names_the_flag() {
    let dir = tempfile::tempdir().unwrap();
    let o = pal(&[
        "match",
        "--detections",
        s(&fixture("unlabelled.detections.jsonl")),
        "--proposals",
        "/nonexistent/proposals.jsonl",
        "--out",
        s(&dir.path().join("m.jsonl")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--proposals"), "{}", stderr(&o));

    let o = pal(&[
        "match",
        "--detections",
        s(&fixture("unlabelled.detections.jsonl")),
        "--out",
        s(&dir.path().join("m.jsonl")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--proposals"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(pal(&["select", "--bogus"]).status.code(), Some(1));
    assert_eq!(pal(&[]).status.code(), Some(1));
    assert_eq!(pal(&["simulate", "--strategy", "greedy"]).status.code(), Some(1));
    assert_eq!(pal_env(&["report", "--input", "x"], "PAL_THREADS", "zero").status.code(), Some(1));
    assert_eq!(pal(&["--help"]).status.code(), Some(0));
}

#[test]
fn bad_config_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "alpha = 0.5\nd = 0.1\n").unwrap();
    let o = pal(&["simulate", "--config", s(&cfg), "--images", "50"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("alpha"), "{}", stderr(&o));
}

fn simulate(dir: &Path, name: &str, strategy: &str, rounds: &str) -> PathBuf {
    let out = dir.join(name);
    let o = pal_env(
        &[
            "simulate", "--strategy", strategy, "--rounds", rounds, "--budget", "10", "--initial", "30", "--images",
            "150", "--seed", "4", "--out", s(&out),
        ],
        "PAL_THREADS",
        "2",
    );
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

#[test]
fn simulate_report_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let one = simulate(dir.path(), "pal.json", "pal", "4");
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&one).unwrap()).unwrap();
    assert_eq!(v["strategies"].as_array().unwrap().len(), 1);
    assert_eq!(v["strategies"][0]["rounds"].as_array().unwrap().len(), 4);

    let all = simulate(dir.path(), "all.json", "all", "2");
    let again = simulate(dir.path(), "again.json", "all", "2");
    let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&all).unwrap()).unwrap();
    let names: Vec<&str> = v["strategies"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["strategy"].as_str().unwrap())
        .collect();
    assert_eq!(names, ["random", "entropy", "pal"]);
    assert_eq!(std::fs::read(&all).unwrap(), std::fs::read(&again).unwrap());

    let o = pal(&["report", "--input", s(&all)]);
    assert!(o.status.success());
    let table = String::from_utf8(o.stdout).unwrap();
    assert_eq!(table.lines().filter(|l| l.starts_with("entropy")).count(), 2);
}

#[test]
fn simulate_emits_pipeline_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let emit = dir.path().join("world");
    let o = pal(&[
        "simulate", "--strategy", "pal", "--rounds", "1", "--budget", "5", "--initial", "20", "--images", "60",
        "--emit-dir", s(&emit), "--out", s(&dir.path().join("r.json")),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let round = emit.join("pal/round-1");
    let l = dir.path().join("l.jsonl");
    let u = dir.path().join("u.jsonl");
    let o = pal(&[
        "match", "--detections", s(&round.join("labelled.jsonl")), "--gt", s(&emit.join("gt.jsonl")), "--out", s(&l),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = pal(&["match", "--detections", s(&round.join("unlabelled.jsonl")), "--out", s(&u)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let m = dir.path().join("m.json");
    let o = pal(&[
        "select", "--labelled", s(&l), "--unlabelled", s(&u), "--embeddings", s(&emit.join("embeddings.palemb")),
        "--state", s(&round.join("state.json")), "--budget", "5", "--out", s(&m),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(&m).unwrap(), std::fs::read(round.join("manifest.json")).unwrap());
}
