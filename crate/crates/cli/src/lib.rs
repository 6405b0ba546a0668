//! Batch front end: trace generation and synthesis, commitment analysis,
//! online detectors, readout probes, factorization and the sanity suite.

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use commitlens::backend::TokenId;
use commitlens::commitment::{commitment_report, threshold_sweep, trajectory_profile};
use commitlens::conditions::{fixture_corpus, ConditionSpec, ToyStyle};
use commitlens::factor::{multi_seed_roles, Control, FactorConfig, MultiSeedRoles, RoleSettings};
use commitlens::generate::{toy_condition_batch, ToyBatch};
use commitlens::online::{
    apply_online_rule, calibrate_online_rule, split_traces, summarize_online, CalibrationGrid, OnlineRule,
};
use commitlens::readout::{
    grouped_split, lambda_sweep, sample_size_scaling, transfer_eval, ProbeDataset, TransferMode, TransferSettings,
};
use commitlens::report::{emit_report, AnalysisReport, ReportWriter};
use commitlens::sanity::{replay_greedy, run_sanity_suite, SanityReport};
use commitlens::summary::{bare_contextual_comparison, summarize_all, BootstrapSettings};
use commitlens::synthetic::{synthesize_batch, MixingKind, WorldConfig};
use commitlens::trace::TrajectoryTrace;
use commitlens::trace_io::{read_traces, validate_file, write_traces, TraceIoError};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_INPUT: i32 = 3;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "COMMITLENS_OUT_DIR";

/// Bad input data or arguments that parse but cannot be used.
#[derive(Debug)]
pub struct InputError(pub String);

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InputError {}

fn input(e: impl fmt::Display) -> anyhow::Error {
    InputError(e.to_string()).into()
}

#[derive(Parser, Debug)]
#[command(name = "commitlens", version, about = "Answer commitment trajectories for reasoning traces")]
struct Cli {
    /// Increase log verbosity (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate traces from scripted template backends.
    Generate(GenerateArgs),
    /// Sample traces from a synthetic latent world.
    Synthesize(SynthesizeArgs),
    /// Commitment summaries, threshold sweep, profiles and charts.
    Analyze(AnalyzeArgs),
    /// Naive or calibrated online stopping rules.
    Online(OnlineArgs),
    /// Linear readout and transfer tables.
    Probe(ProbeArgs),
    /// Two-factor encoder role reports with controls.
    Factorize(FactorizeArgs),
    /// Greedy agreement, restart tautology, parser freeze and scoring checks.
    Sanity(SanityArgs),
    /// Schema check of a trace file.
    Validate(ValidateArgs),
}

#[derive(Args, Debug, Clone)]
struct OutDir {
    /// Output directory.
    #[arg(long, env = OUT_DIR_ENV, default_value = "commitlens-out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    /// Built-in condition name or condition TOML path (repeatable).
    #[arg(long = "condition", default_value = "canonical")]
    conditions: Vec<String>,
    /// Traces per condition.
    #[arg(long, default_value_t = 20)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also record bare-verbalizer δ.
    #[arg(long)]
    bare: bool,
    /// Keep per-verbalizer scores on every state.
    #[arg(long)]
    keep_scores: bool,
    /// Stop decoding once the answer line completes.
    #[arg(long)]
    stop_at_onset: bool,
    /// Fraction of samples answering wrongly.
    #[arg(long, default_value_t = 0.0)]
    wrong_rate: f64,
    /// Pre-commitment δ jitter.
    #[arg(long, default_value_t = 1.5)]
    jitter: f64,
    /// Trace file to write (default: <out-dir>/traces.jsonl).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    dir: OutDir,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mixing {
    Shared,
    Rotated,
    Random,
}

impl From<Mixing> for MixingKind {
    fn from(m: Mixing) -> Self {
        match m {
            Mixing::Shared => MixingKind::Shared,
            Mixing::Rotated => MixingKind::Rotated,
            Mixing::Random => MixingKind::Random,
        }
    }
}

#[derive(Args, Debug)]
struct SynthesizeArgs {
    /// World TOML; overrides the inline world flags.
    #[arg(long)]
    world: Option<PathBuf>,
    /// Condition names for an inline world.
    #[arg(long, value_delimiter = ',', default_value = "canonical,prompt_shift,verbalizer_shift")]
    conditions: Vec<String>,
    #[arg(long, value_enum, default_value_t = Mixing::Shared)]
    mixing: Mixing,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    feature_noise: f64,
    /// Seed of the mixing matrices.
    #[arg(long, default_value_t = 0)]
    mixing_seed: u64,
    #[arg(long, default_value_t = 40)]
    per_condition: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Trace file to write (default: <out-dir>/traces.jsonl).
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    dir: OutDir,
}

#[derive(Args, Debug)]
struct BootArgs {
    #[arg(long, default_value_t = commitlens::bootstrap::DEFAULT_REPLICATES)]
    replicates: usize,
    #[arg(long, default_value_t = commitlens::bootstrap::DEFAULT_ALPHA)]
    alpha: f64,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    /// Trace file.
    traces: PathBuf,
    /// Margin threshold for summaries and per-trace reports.
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    /// Sweep thresholds.
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,8")]
    gammas: Vec<f64>,
    /// Normalized-time bins of the signed-δ profile.
    #[arg(long, default_value_t = 20)]
    bins: usize,
    #[command(flatten)]
    boot: BootArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    dir: OutDir,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum OnlineMode {
    Naive,
    Calibrated,
}

#[derive(Args, Debug)]
struct OnlineArgs {
    traces: PathBuf,
    #[arg(long, value_enum, default_value_t = OnlineMode::Naive)]
    mode: OnlineMode,
    /// Naive rule margin.
    #[arg(long, default_value_t = 2.0)]
    gamma: f64,
    /// Naive rule window.
    #[arg(long, default_value_t = 3)]
    window: usize,
    /// Calibration grid margins.
    #[arg(long, value_delimiter = ',', default_value = "1,2,5,8")]
    gammas: Vec<f64>,
    /// Calibration grid minimum progress fractions.
    #[arg(long, value_delimiter = ',', default_value = "0.35,0.45,0.55,0.65,0.75")]
    progress: Vec<f64>,
    /// Calibration grid windows.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    windows: Vec<usize>,
    /// Fraction of each condition's traces used for calibration.
    #[arg(long, default_value_t = 0.5)]
    train_fraction: f64,
    /// Retrospective threshold for reported retro leads.
    #[arg(long, default_value_t = 2.0)]
    retro_gamma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    dir: OutDir,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    traces: PathBuf,
    /// Feature key on each state.
    #[arg(long, default_value = "last_L21")]
    feature: String,
    /// Transfer modes (within, pooled, loco, canonical-raw, canonical-affine).
    #[arg(long, value_delimiter = ',', default_value = "within,pooled,loco", value_parser = parse_mode)]
    mode: Vec<TransferMode>,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Grouped splits averaged per cell.
    #[arg(long, default_value_t = 10)]
    splits: u64,
    #[arg(long, default_value_t = 0.8)]
    train_fraction: f64,
    /// Source condition for canonical-* modes.
    #[arg(long, default_value = "canonical")]
    source: String,
    /// Extra within-condition λ sweep.
    #[arg(long, value_delimiter = ',')]
    lambdas: Vec<f64>,
    /// Extra sample-size scaling over these training group counts.
    #[arg(long, value_delimiter = ',')]
    scaling: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    dir: OutDir,
}

fn parse_mode(s: &str) -> Result<TransferMode, String> {
    s.parse()
}

fn parse_control(s: &str) -> Result<Control, String> {
    s.parse()
}

#[derive(Args, Debug)]
struct FactorizeArgs {
    traces: PathBuf,
    #[arg(long, default_value = "last_L21")]
    feature: String,
    /// Encoder trainings per control; seeds start at `--seed`.
    #[arg(long, default_value_t = 5)]
    encoder_seeds: u64,
    /// Controls (none, shuffle-delta, shuffle-cursor).
    #[arg(long, value_delimiter = ',', default_value = "none,shuffle-delta,shuffle-cursor", value_parser = parse_control)]
    controls: Vec<Control>,
    /// Fraction of groups used for encoder training.
    #[arg(long, default_value_t = 0.6)]
    train_fraction: f64,
    /// Encoder hyperparameter TOML.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    probe_seeds: u64,
    #[command(flatten)]
    boot: BootArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    dir: OutDir,
}

#[derive(Args, Debug)]
struct SanityArgs {
    /// Conditions to sample (default: every built-in).
    #[arg(long = "condition")]
    conditions: Vec<String>,
    /// Samples per condition.
    #[arg(long, default_value_t = 4)]
    n: usize,
    /// Exit nonzero when any check fails.
    #[arg(long)]
    strict: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    dir: OutDir,
}

#[derive(Args, Debug)]
struct ValidateArgs {
    traces: PathBuf,
}

/// Parses `argv` (including the program name) and runs the subcommand.
/// Returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_default_env().try_init();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<InputError>().is_some() {
                EXIT_INPUT
            } else {
                EXIT_FAILURE
            }
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Generate(a) => generate(a),
        Command::Synthesize(a) => synthesize(a),
        Command::Analyze(a) => analyze(a),
        Command::Online(a) => online(a),
        Command::Probe(a) => probe(a),
        Command::Factorize(a) => factorize(a),
        Command::Sanity(a) => sanity(a),
        Command::Validate(a) => validate(a),
    }
}

fn load_traces(path: &Path) -> Result<Vec<TrajectoryTrace>> {
    read_traces(path).map_err(|e| match e {
        TraceIoError::Io { .. } => anyhow::Error::new(e),
        other => input(other),
    })
}

fn store_traces(traces: &mut [TrajectoryTrace], out: Option<PathBuf>, dir: &OutDir, seed: u64) -> Result<i32> {
    for t in traces.iter_mut() {
        t.meta.extra.insert("run_seed".into(), json!(seed));
    }
    let path = out.unwrap_or_else(|| dir.out_dir.join("traces.jsonl"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let n = write_traces(traces, &path)?;
    println!("wrote {n} traces to {}", path.display());
    Ok(EXIT_OK)
}

fn generate(a: GenerateArgs) -> Result<i32> {
    if !(0.0..=1.0).contains(&a.wrong_rate) {
        return Err(input(format!("--wrong-rate {} outside [0, 1]", a.wrong_rate)));
    }
    let style = ToyStyle {
        jitter: a.jitter,
        wrong_rate: a.wrong_rate,
        ..ToyStyle::default()
    };
    let mut traces = Vec::new();
    for (ci, name) in a.conditions.iter().enumerate() {
        let spec = ConditionSpec::resolve(name).map_err(input)?;
        let batch = ToyBatch {
            n: a.n,
            seed: a.seed.wrapping_add((ci as u64) << 40),
            style: style.clone(),
            bare: a.bare,
            keep_verbalizer_scores: a.keep_scores,
            stop_at_onset_line: a.stop_at_onset,
        };
        traces.extend(toy_condition_batch(&spec, &batch).with_context(|| format!("condition {name}"))?);
    }
    store_traces(&mut traces, a.out, &a.dir, a.seed)
}

fn synthesize(a: SynthesizeArgs) -> Result<i32> {
    let cfg = match &a.world {
        Some(p) => WorldConfig::load(p).map_err(input)?,
        None => WorldConfig {
            conditions: a.conditions.clone(),
            mixing: a.mixing.into(),
            mixing_seed: a.mixing_seed,
            feature_dim: a.feature_dim,
            feature_noise: a.feature_noise,
            feature_name: None,
            tokens_per_line: None,
            commit: Default::default(),
            cursor: Default::default(),
            explicit: Vec::new(),
        },
    };
    let world = cfg.build().map_err(input)?;
    let mut traces = synthesize_batch(&world, a.per_condition, a.seed).map_err(input)?;
    store_traces(&mut traces, a.out, &a.dir, a.seed)
}

fn boot_settings(b: &BootArgs, seed: u64) -> Result<BootstrapSettings> {
    if b.replicates == 0 || !(b.alpha > 0.0 && b.alpha < 1.0) {
        return Err(input("bootstrap needs replicates > 0 and alpha in (0, 1)"));
    }
    Ok(BootstrapSettings {
        replicates: b.replicates,
        alpha: b.alpha,
        seed,
    })
}

fn finish_line(dir: &Path, n_files: usize) {
    println!("wrote {n_files} files and manifest.json to {}", dir.display());
}

fn analyze(a: AnalyzeArgs) -> Result<i32> {
    let traces = load_traces(&a.traces)?;
    if traces.is_empty() {
        return Err(input("trace file is empty"));
    }
    let boot = boot_settings(&a.boot, a.seed)?;
    let summaries = summarize_all(&traces, a.gamma, &boot).map_err(input)?;
    let commitments = traces
        .iter()
        .filter(|t| t.is_parsed())
        .map(|t| commitment_report(t, a.gamma))
        .collect::<Result<Vec<_>, _>>()
        .map_err(input)?;
    let sweeps = threshold_sweep(&traces, &a.gammas).map_err(input)?;
    let profile = trajectory_profile(&traces, a.bins).map_err(input)?;
    let bare = bare_contextual_comparison(&traces);
    let meta = json!({
        "command": "analyze",
        "seed": a.seed,
        "gamma": a.gamma,
        "gammas": a.gammas,
        "bins": a.bins,
        "replicates": boot.replicates,
        "alpha": boot.alpha,
        "n_traces": traces.len(),
    });
    let report = AnalysisReport {
        summaries: &summaries,
        commitments: &commitments,
        sweeps: &sweeps,
        profile: &profile,
        bare: &bare,
    };
    let manifest = emit_report(&report, &a.dir.out_dir, meta)?;
    finish_line(&a.dir.out_dir, manifest.files.len());
    Ok(EXIT_OK)
}

fn by_condition(traces: &[TrajectoryTrace]) -> Vec<(String, Vec<TrajectoryTrace>)> {
    let mut by: std::collections::BTreeMap<String, Vec<TrajectoryTrace>> = Default::default();
    for t in traces.iter().filter(|t| t.is_parsed()) {
        by.entry(t.condition.clone()).or_default().push(t.clone());
    }
    by.into_iter().collect()
}

fn online(a: OnlineArgs) -> Result<i32> {
    let traces = load_traces(&a.traces)?;
    let groups = by_condition(&traces);
    if groups.is_empty() {
        return Err(input("no parsed traces"));
    }
    let mut w = ReportWriter::new(&a.dir.out_dir)?;
    let mut meta = json!({
        "command": "online",
        "seed": a.seed,
        "mode": format!("{:?}", a.mode).to_lowercase(),
        "retro_gamma": a.retro_gamma,
    });
    let mut summaries = Vec::new();
    let mut stops = Vec::new();
    match a.mode {
        OnlineMode::Naive => {
            let rule = OnlineRule::new(a.gamma, 0.0, a.window).map_err(input)?;
            for (cond, ts) in &groups {
                summaries.push(summarize_online(cond, &rule, ts, a.retro_gamma).map_err(input)?);
                stops.extend(ts.iter().map(|t| apply_online_rule(&rule, t)));
            }
            meta["rule"] = json!(rule);
        }
        OnlineMode::Calibrated => {
            let grid = CalibrationGrid {
                gammas: a.gammas.clone(),
                progress: a.progress.clone(),
                windows: a.windows.clone(),
            };
            let mut train_rows = Vec::new();
            let mut calibrations = Vec::new();
            for (cond, ts) in &groups {
                if ts.len() < 2 {
                    return Err(input(format!("condition {cond} needs at least 2 parsed traces to calibrate")));
                }
                let (train, test) = split_traces(ts, a.train_fraction, a.seed);
                let cal = calibrate_online_rule(cond, &train, &grid, a.retro_gamma).map_err(input)?;
                summaries.push(summarize_online(cond, &cal.rule, &test, a.retro_gamma).map_err(input)?);
                stops.extend(test.iter().map(|t| apply_online_rule(&cal.rule, t)));
                train_rows.push(cal.train.clone());
                calibrations.push(cal);
            }
            w.table("online_train.csv", &train_rows)?;
            w.json("calibration.json", &calibrations)?;
            meta["grid"] = json!(grid);
            meta["train_fraction"] = json!(a.train_fraction);
        }
    }
    w.table("online_summary.csv", &summaries)?;
    w.table("stops.csv", &stops)?;
    let manifest = w.finish(meta)?;
    finish_line(&a.dir.out_dir, manifest.files.len());
    Ok(EXIT_OK)
}

fn probe(a: ProbeArgs) -> Result<i32> {
    let traces = load_traces(&a.traces)?;
    let ds = ProbeDataset::from_traces(&traces, &a.feature).map_err(input)?;
    let settings = TransferSettings {
        lambda: a.lambda,
        train_fraction: a.train_fraction,
        seeds: (a.seed..a.seed + a.splits).collect(),
        source: a.source.clone(),
    };
    let mut rows = Vec::new();
    for &mode in &a.mode {
        rows.extend(transfer_eval(&ds, mode, &settings).map_err(input)?);
    }
    let mut w = ReportWriter::new(&a.dir.out_dir)?;
    w.table("transfer.csv", &rows)?;
    if !a.lambdas.is_empty() {
        w.table("lambda_sweep.csv", &lambda_sweep(&ds, &a.lambdas, &settings).map_err(input)?)?;
    }
    if !a.scaling.is_empty() {
        let scaling = sample_size_scaling(&ds, &a.scaling, 1.0 - a.train_fraction, &settings.seeds, a.lambda).map_err(input)?;
        w.table("scaling.csv", &scaling)?;
    }
    let meta = json!({
        "command": "probe",
        "seed": a.seed,
        "feature": a.feature,
        "modes": a.mode.iter().map(|m| m.as_str()).collect::<Vec<_>>(),
        "settings": settings,
        "lambdas": a.lambdas,
        "scaling": a.scaling,
    });
    let manifest = w.finish(meta)?;
    finish_line(&a.dir.out_dir, manifest.files.len());
    Ok(EXIT_OK)
}

fn factorize(a: FactorizeArgs) -> Result<i32> {
    let traces = load_traces(&a.traces)?;
    let ds = ProbeDataset::from_traces(&traces, &a.feature).map_err(input)?;
    let cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            FactorConfig::from_toml_str(&text).map_err(input)?
        }
        None => FactorConfig::default(),
    };
    let (train, test) = grouped_split(&ds, a.train_fraction, a.seed).map_err(input)?;
    let settings = RoleSettings {
        probe_seeds: (a.seed..a.seed + a.probe_seeds).collect(),
        boot: boot_settings(&a.boot, a.seed)?,
        ..RoleSettings::default()
    };
    let seeds: Vec<u64> = (a.seed..a.seed + a.encoder_seeds).collect();
    let results: Vec<MultiSeedRoles> = a
        .controls
        .iter()
        .map(|&c| multi_seed_roles(&train, &test, &cfg, &seeds, c, &settings).map_err(input))
        .collect::<Result<_>>()?;
    let reports: Vec<_> = results.iter().flat_map(|r| r.reports.iter().cloned()).collect();
    let mut w = ReportWriter::new(&a.dir.out_dir)?;
    w.table("roles.csv", &reports)?;
    w.table("roles_summary.csv", &results)?;
    w.json("roles.json", &results)?;
    let meta = json!({
        "command": "factorize",
        "seed": a.seed,
        "feature": a.feature,
        "encoder_seeds": seeds,
        "train_fraction": a.train_fraction,
        "config": cfg,
        "roles": settings,
    });
    let manifest = w.finish(meta)?;
    finish_line(&a.dir.out_dir, manifest.files.len());
    Ok(EXIT_OK)
}

fn sanity(a: SanityArgs) -> Result<i32> {
    let names: Vec<String> = if a.conditions.is_empty() {
        ConditionSpec::builtin_names().iter().map(|s| s.to_string()).collect()
    } else {
        a.conditions.clone()
    };
    let fixtures = fixture_corpus();
    let mut report: Option<SanityReport> = None;
    for (ci, name) in names.iter().enumerate() {
        let spec = ConditionSpec::resolve(name).map_err(input)?;
        for i in 0..a.n {
            let seed = a.seed.wrapping_add((ci as u64) << 40 | i as u64);
            let sample = spec.toy_sample(seed, &ToyStyle::default()).map_err(input)?;
            let b = &sample.backend;
            let reference = |p: &[_], n: usize| replay_greedy(b, p, n);
            let r = run_sanity_suite(b, &[sample.prompt_tokens.clone()], b.path().len() + 1, Some(&reference), &[]);
            report = Some(match report {
                Some(acc) => acc.merge(r),
                None => r,
            });
        }
    }
    let hashed = commitlens::toy::HashedBackend::new(32, a.seed, 3.0);
    let prompts: Vec<Vec<TokenId>> = (0..8).map(|i| vec![i + 1, 2, 3]).collect();
    let reference = |p: &[_], n: usize| replay_greedy(&hashed, p, n);
    let r = run_sanity_suite(&hashed, &prompts, 24, Some(&reference), &fixtures);
    let report = match report {
        Some(acc) => acc.merge(r),
        None => r,
    };
    let mut w = ReportWriter::new(&a.dir.out_dir)?;
    w.json("sanity.json", &report)?;
    let meta = json!({
        "command": "sanity",
        "seed": a.seed,
        "conditions": names,
        "n": a.n,
    });
    w.finish(meta)?;
    let rate = |r: Option<f64>| r.map_or("n/a".to_string(), |x| format!("{x:.3}"));
    println!(
        "greedy match {}, tautology {}, freeze {}, fixture onset {}, max score diff {}",
        rate(report.greedy_match.as_ref().and_then(|g| g.rate)),
        rate(report.tautology.rate),
        rate(report.freeze.rate),
        rate(report.fixture_onset.rate),
        report.consistency.max_abs_error.map_or("n/a".to_string(), |x| format!("{x:e}")),
    );
    if a.strict && !report.all_pass() {
        bail!("sanity checks failed");
    }
    Ok(EXIT_OK)
}

fn validate(a: ValidateArgs) -> Result<i32> {
    let report = validate_file(&a.traces)?;
    for issue in &report.issues {
        match &issue.id {
            Some(id) => eprintln!("line {} ({id}): {}", issue.line, issue.message),
            None => eprintln!("line {}: {}", issue.line, issue.message),
        }
    }
    if !report.is_valid() {
        return Err(input(format!("{} issue(s) in {}", report.issues.len(), a.traces.display())));
    }
    println!("valid: {} traces, {} parsed", report.traces, report.parsed);
    Ok(EXIT_OK)
}
