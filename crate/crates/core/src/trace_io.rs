//! JSONL persistence and schema validation of trace collections.
//!
//! One trajectory per line. Floats are written as shortest round-trip
//! decimals and parsed exactly, so `read(write(x)) == x` bit for bit.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::projection::delta_from_verbalizer_scores;
use crate::trace::{TrajectoryTrace, SCHEMA_VERSION};

/// Tolerance for δ recomputed from stored verbalizer scores.
pub const DELTA_RECOMPUTE_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TraceIoError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("line {line}: schema version {found}, expected {expected}")]
    Version { line: usize, found: u64, expected: u32 },
    #[error("trace {id:?}: non-finite value in {field}")]
    NonFinite { id: String, field: String },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> TraceIoError + '_ {
    move |source| TraceIoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// First non-finite float in a trace, named by field path.
pub fn first_non_finite(trace: &TrajectoryTrace) -> Option<String> {
    let bad = |xs: &[f64]| xs.iter().any(|x| !x.is_finite());
    for s in &trace.states {
        let at = |f: &str| format!("states[t={}].{f}", s.t);
        if !s.delta.is_finite() {
            return Some(at("delta"));
        }
        if s.delta_bare.is_some_and(|d| !d.is_finite()) {
            return Some(at("delta_bare"));
        }
        if let Some((name, _)) = s.features.iter().flatten().find(|(_, v)| bad(v)) {
            return Some(at(&format!("features.{name}")));
        }
        if let Some(l) = s.latents {
            if !(l.commit.is_finite() && l.cursor.is_finite()) {
                return Some(at("latents"));
            }
        }
        if let Some((name, _)) = s.verbalizer_scores.iter().flatten().find(|(_, v)| bad(v)) {
            return Some(at(&format!("verbalizer_scores.{name}")));
        }
    }
    None
}

/// Writes one JSON line per trace. Non-finite values abort before any
/// partial line is written.
pub fn write_traces_to<W: Write>(traces: &[TrajectoryTrace], mut out: W) -> Result<usize, TraceIoError> {
    for t in traces {
        if let Some(field) = first_non_finite(t) {
            return Err(TraceIoError::NonFinite { id: t.id.clone(), field });
        }
    }
    let sink = Path::new("<writer>");
    for t in traces {
        let line = serde_json::to_string(t).map_err(|e| TraceIoError::Malformed {
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(out, "{line}").map_err(io_err(sink))?;
    }
    out.flush().map_err(io_err(sink))?;
    Ok(traces.len())
}

pub fn write_traces(traces: &[TrajectoryTrace], path: &Path) -> Result<usize, TraceIoError> {
    let file = File::create(path).map_err(io_err(path))?;
    write_traces_to(traces, BufWriter::new(file)).map_err(|e| match e {
        TraceIoError::Io { source, .. } => TraceIoError::Io {
            path: path.to_path_buf(),
            source,
        },
        other => other,
    })
}

/// Parses one line, checking the schema version before the structure.
pub fn parse_trace_line(text: &str, line: usize) -> Result<TrajectoryTrace, TraceIoError> {
    let malformed = |message: String| TraceIoError::Malformed { line, message };
    let value: Value = serde_json::from_str(text).map_err(|e| malformed(e.to_string()))?;
    let found = value
        .get("schema_version")
        .ok_or_else(|| malformed("missing schema_version".into()))?
        .as_u64()
        .ok_or_else(|| malformed("schema_version is not a nonnegative integer".into()))?;
    if found != u64::from(SCHEMA_VERSION) {
        return Err(TraceIoError::Version {
            line,
            found,
            expected: SCHEMA_VERSION,
        });
    }
    serde_json::from_value(value).map_err(|e| malformed(e.to_string()))
}

/// Reads every nonblank line; the first bad line aborts with its 1-based number.
pub fn read_traces_from<R: BufRead>(input: R) -> Result<Vec<TrajectoryTrace>, TraceIoError> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let text = line.map_err(|e| TraceIoError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if text.trim().is_empty() {
            continue;
        }
        out.push(parse_trace_line(&text, line_no)?);
    }
    Ok(out)
}

pub fn read_traces(path: &Path) -> Result<Vec<TrajectoryTrace>, TraceIoError> {
    let file = File::open(path).map_err(io_err(path))?;
    read_traces_from(BufReader::new(file))
}

/// Schema invariant violations of one trace, empty when valid.
pub fn validate_trace(trace: &TrajectoryTrace) -> Vec<String> {
    let mut issues = Vec::new();
    if trace.schema_version != SCHEMA_VERSION {
        issues.push(format!(
            "schema version {} (expected {SCHEMA_VERSION})",
            trace.schema_version
        ));
    }
    if trace.id.is_empty() {
        issues.push("empty id".into());
    }
    if trace.tokens.len() != trace.token_texts.len() {
        issues.push(format!(
            "{} tokens but {} token texts",
            trace.tokens.len(),
            trace.token_texts.len()
        ));
    }
    let both = trace.onset.is_some() && trace.final_answer.is_some();
    if trace.parsed != both {
        issues.push(format!(
            "parsed = {} but onset/final_answer defined = {both}",
            trace.parsed
        ));
    }
    if let Some(o) = trace.onset {
        if o > trace.tokens.len() {
            issues.push(format!("onset {o} beyond {} tokens", trace.tokens.len()));
        }
    }
    for w in trace.states.windows(2) {
        if w[1].t <= w[0].t {
            issues.push(format!("state t not strictly increasing ({} then {})", w[0].t, w[1].t));
            break;
        }
    }
    if let (Some(o), Some(last)) = (trace.onset, trace.states.last()) {
        if last.t >= o {
            issues.push(format!("state t = {} not before onset {o}", last.t));
        }
    }
    if let Some(field) = first_non_finite(trace) {
        issues.push(format!("non-finite value in {field}"));
    }
    let mut dims: std::collections::BTreeMap<&str, usize> = Default::default();
    for s in &trace.states {
        for (name, v) in s.features.iter().flatten() {
            let d = *dims.entry(name).or_insert(v.len());
            if d != v.len() {
                issues.push(format!("feature {name:?} changes dimension {d} -> {} at t = {}", v.len(), s.t));
            }
        }
        if let Some(scores) = &s.verbalizer_scores {
            match (scores.get("yes"), scores.get("no")) {
                (Some(y), Some(n)) if scores.len() == 2 => match delta_from_verbalizer_scores(y, n) {
                    Ok(d) if (d - s.delta).abs() <= DELTA_RECOMPUTE_TOL => {}
                    Ok(d) => issues.push(format!(
                        "t = {}: δ {} differs from recomputed {d} by more than {DELTA_RECOMPUTE_TOL}",
                        s.t, s.delta
                    )),
                    Err(e) => issues.push(format!("t = {}: verbalizer scores: {e}", s.t)),
                },
                _ => issues.push(format!("t = {}: verbalizer_scores must have exactly keys yes and no", s.t)),
            }
        }
    }
    issues
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineIssue {
    pub line: usize,
    pub id: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub lines: usize,
    pub traces: usize,
    pub parsed: usize,
    pub issues: Vec<LineIssue>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.issues.is_empty()
    }
}

/// Validates every line of a stream, collecting all problems instead of
/// stopping at the first.
pub fn validate_stream<R: BufRead>(input: R) -> ValidationReport {
    let mut report = ValidationReport {
        lines: 0,
        traces: 0,
        parsed: 0,
        issues: Vec::new(),
    };
    let mut ids = std::collections::BTreeSet::new();
    for (i, line) in input.lines().enumerate() {
        let line_no = i + 1;
        let issue = |id: Option<String>, message: String| LineIssue {
            line: line_no,
            id,
            message,
        };
        let text = match line {
            Ok(t) => t,
            Err(e) => {
                report.issues.push(issue(None, e.to_string()));
                break;
            }
        };
        if text.trim().is_empty() {
            continue;
        }
        report.lines += 1;
        match parse_trace_line(&text, line_no) {
            Ok(t) => {
                report.traces += 1;
                report.parsed += t.parsed as usize;
                if !ids.insert(t.id.clone()) {
                    report.issues.push(issue(Some(t.id.clone()), "duplicate id".into()));
                }
                for m in validate_trace(&t) {
                    report.issues.push(issue(Some(t.id.clone()), m));
                }
            }
            Err(e) => report.issues.push(issue(None, e.to_string())),
        }
    }
    report
}

pub fn validate_file(path: &Path) -> Result<ValidationReport, TraceIoError> {
    let file = File::open(path).map_err(io_err(path))?;
    Ok(validate_stream(BufReader::new(file)))
}
