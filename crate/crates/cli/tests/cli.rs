use std::fs;
use std::path::Path;
use std::process::Command;

use commitlens_cli::{run, EXIT_INPUT, EXIT_OK, EXIT_USAGE};

fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("commitlens").chain(args.iter().copied()))
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Column `name` of a header-first CSV without quoted fields.
fn column(csv: &str, name: &str) -> Vec<String> {
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let i = header.iter().position(|h| *h == name).unwrap();
    lines.map(|l| l.split(',').nth(i).unwrap().to_string()).collect()
}

const FORCED_WORLD: &str = r#"
conditions = ["canonical", "prompt_shift"]
mixing = "shared"
[commit]
start = 0.0
drift_rate = 1.0
target = 6.0
noise = 0.0
"#;

#[test]
fn validate_accepts_round_tripped_files_and_rejects_broken_ones() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("t.jsonl");
    assert_eq!(cli(&["generate", "--n", "4", "--keep-scores", "--bare", "--out", p(&traces)]), EXIT_OK);
    assert_eq!(cli(&["validate", p(&traces)]), EXIT_OK);

    let text = fs::read_to_string(&traces).unwrap();
    let broken = dir.path().join("broken.jsonl");
    fs::write(&broken, &text[..text.len() - 20]).unwrap();
    assert_eq!(cli(&["validate", p(&broken)]), EXIT_INPUT);
    assert_eq!(cli(&["analyze", p(&broken), "--out-dir", p(dir.path())]), EXIT_INPUT);
}

#[test]
fn analyze_reports_full_commitment_on_forced_traces() {
    let dir = tempfile::tempdir().unwrap();
    let world = dir.path().join("world.toml");
    fs::write(&world, FORCED_WORLD).unwrap();
    let traces = dir.path().join("forced.jsonl");
    assert_eq!(cli(&["synthesize", "--world", p(&world), "--per-condition", "12", "--out", p(&traces)]), EXIT_OK);
    let out = dir.path().join("report");
    let code = cli(&["analyze", p(&traces), "--gamma", "2", "--replicates", "100", "--out-dir", p(&out)]);
    assert_eq!(code, EXIT_OK);
    let summary = fs::read_to_string(out.join("summary.csv")).unwrap();
    assert_eq!(column(&summary, "condition"), ["canonical", "prompt_shift"]);
    assert_eq!(column(&summary, "commit_rate"), ["1", "1"]);
    let sweep = fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 1 + 2 * 4);
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["meta"]["seed"], 0);
    assert!(out.join("signed_delta.svg").exists() && out.join("lead_cdf.svg").exists());
}

#[test]
fn loco_with_one_condition_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("one.jsonl");
    assert_eq!(cli(&["synthesize", "--conditions", "canonical", "--per-condition", "6", "--out", p(&traces)]), EXIT_OK);
    let code = cli(&["probe", p(&traces), "--mode", "loco", "--out-dir", p(dir.path())]);
    assert_eq!(code, EXIT_INPUT);
    assert_eq!(cli(&["probe", p(&traces), "--mode", "within", "--splits", "2", "--out-dir", p(dir.path())]), EXIT_OK);
}

#[test]
fn usage_errors_exit_with_usage_code() {
    assert_eq!(cli(&["frobnicate"]), EXIT_USAGE);
    assert_eq!(cli(&["analyze"]), EXIT_USAGE);
    assert_eq!(cli(&["analyze", "x.jsonl", "--no-such-flag"]), EXIT_USAGE);
    assert_eq!(cli(&["probe", "x.jsonl", "--mode", "sideways"]), EXIT_USAGE);
    assert_eq!(cli(&["--help"]), EXIT_OK);
}

#[test]
fn online_factorize_and_sanity_run() {
    let dir = tempfile::tempdir().unwrap();
    let traces = dir.path().join("s.jsonl");
    assert_eq!(cli(&["synthesize", "--per-condition", "16", "--seed", "4", "--out", p(&traces)]), EXIT_OK);
    let on = dir.path().join("online");
    assert_eq!(cli(&["online", p(&traces), "--mode", "calibrated", "--out-dir", p(&on)]), EXIT_OK);
    assert_eq!(fs::read_to_string(on.join("online_summary.csv")).unwrap().lines().count(), 4);
    let naive = dir.path().join("naive");
    assert_eq!(cli(&["online", p(&traces), "--out-dir", p(&naive)]), EXIT_OK);
    assert_eq!(fs::read_to_string(naive.join("stops.csv")).unwrap().lines().count(), 1 + 48);

    let cfg = dir.path().join("factor.toml");
    fs::write(&cfg, "epochs = 3\nhidden = 16\n").unwrap();
    let fa = dir.path().join("factor");
    let code = cli(&[
        "factorize", p(&traces), "--config", p(&cfg), "--encoder-seeds", "2", "--controls", "none,shuffle-delta",
        "--replicates", "50", "--out-dir", p(&fa),
    ]);
    assert_eq!(code, EXIT_OK);
    assert_eq!(fs::read_to_string(fa.join("roles.csv")).unwrap().lines().count(), 1 + 4);
    fs::write(&cfg, "epochs = 3\nlearning_rate = -1.0\n").unwrap();
    assert_eq!(cli(&["factorize", p(&traces), "--config", p(&cfg), "--out-dir", p(&fa)]), EXIT_INPUT);
    fs::write(&cfg, "epoch = 3\n").unwrap();
    assert_eq!(cli(&["factorize", p(&traces), "--config", p(&cfg), "--out-dir", p(&fa)]), EXIT_INPUT);

    let sa = dir.path().join("sanity");
    assert_eq!(cli(&["sanity", "--n", "2", "--strict", "--out-dir", p(&sa)]), EXIT_OK);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(sa.join("sanity.json")).unwrap()).unwrap();
    assert_eq!(report["greedy_match"]["rate"], 1.0);
    assert_eq!(report["freeze"]["rate"], 1.0);
}

#[test]
fn out_dir_defaults_to_the_environment_variable() {
    let dir = tempfile::tempdir().unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_commitlens"))
        .args(["synthesize", "--per-condition", "3"])
        .env(commitlens_cli::OUT_DIR_ENV, dir.path())
        .status()
        .unwrap();
    assert!(status.success());
    assert!(dir.path().join("traces.jsonl").exists());

    let status = Command::new(env!("CARGO_BIN_EXE_commitlens")).arg("bogus").status().unwrap();
    assert_eq!(status.code(), Some(EXIT_USAGE));
}

fn pipeline(root: &Path) {
    let traces = root.join("traces.jsonl");
    let r = p(root);
    assert_eq!(cli(&["synthesize", "--mixing", "rotated", "--per-condition", "10", "--seed", "21", "--out", p(&traces)]), EXIT_OK);
    assert_eq!(cli(&["analyze", p(&traces), "--seed", "21", "--replicates", "200", "--out-dir", &format!("{r}/analyze")]), EXIT_OK);
    assert_eq!(cli(&["online", p(&traces), "--mode", "calibrated", "--seed", "21", "--out-dir", &format!("{r}/online")]), EXIT_OK);
    assert_eq!(cli(&["probe", p(&traces), "--splits", "3", "--seed", "21", "--out-dir", &format!("{r}/probe")]), EXIT_OK);
}

fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                files.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn identical_runs_are_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path());
    pipeline(b.path());
    let (sa, sb) = (snapshot(a.path()), snapshot(b.path()));
    assert!(sa.len() >= 12, "{} files", sa.len());
    assert_eq!(sa, sb);
}
