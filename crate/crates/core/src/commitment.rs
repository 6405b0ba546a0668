//! Retrospective commitment time, lead and signed-δ anatomy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scheme::Verdict;
use crate::stats::{mean, quantile_sorted};
use crate::trace::TrajectoryTrace;

/// Default margin threshold in nats; σ(2) ≈ 0.881.
pub const DEFAULT_GAMMA: f64 = 2.0;

#[derive(Debug, Error, PartialEq)]
pub enum CommitmentError {
    #[error("trace {0:?} is unparsed")]
    Unparsed(String),
    #[error("gamma must be positive and finite, got {0}")]
    BadGamma(f64),
    #[error("gammas must be sorted ascending")]
    UnsortedGammas,
    #[error("empty trace set")]
    Empty,
    #[error("trace {id:?} has {states} states but onset {onset}")]
    SeriesMismatch { id: String, states: usize, onset: usize },
    #[error("bin count must be at least 1")]
    NoBins,
}

fn check_gamma(gamma: f64) -> Result<(), CommitmentError> {
    if gamma > 0.0 && gamma.is_finite() {
        Ok(())
    } else {
        Err(CommitmentError::BadGamma(gamma))
    }
}

/// Minimal `t` whose winner is `answer` with margin at least `gamma` and
/// whose winner stays `answer` at every later pre-onset state.
///
/// `deltas` holds δ_0..δ_{onset-1}.
pub fn commitment_time_series(deltas: &[f64], answer: Verdict, gamma: f64) -> Option<usize> {
    // States from `stable` onward all agree with the final answer.
    let stable = deltas
        .iter()
        .rposition(|&d| Verdict::from_delta(d) != answer)
        .map_or(0, |i| i + 1);
    (stable..deltas.len()).find(|&t| deltas[t].abs() >= gamma)
}

/// Number of adjacent winner changes.
pub fn sign_flips(deltas: &[f64]) -> usize {
    deltas
        .windows(2)
        .filter(|w| Verdict::from_delta(w[0]) != Verdict::from_delta(w[1]))
        .count()
}

/// Validated pre-onset view of a parsed trace.
pub fn parsed_series(trace: &TrajectoryTrace) -> Result<(usize, Verdict, Vec<f64>), CommitmentError> {
    let (onset, answer) = trace
        .parsed_view()
        .ok_or_else(|| CommitmentError::Unparsed(trace.id.clone()))?;
    if trace.states.len() != onset || trace.states.iter().enumerate().any(|(i, s)| s.t != i) {
        return Err(CommitmentError::SeriesMismatch {
            id: trace.id.clone(),
            states: trace.states.len(),
            onset,
        });
    }
    Ok((onset, answer, trace.deltas()))
}

/// Commitment time of a parsed trace; `Err(Unparsed)` is distinct from
/// `Ok(None)` ("never committed").
pub fn commitment_time(trace: &TrajectoryTrace, gamma: f64) -> Result<Option<usize>, CommitmentError> {
    check_gamma(gamma)?;
    let (_, answer, deltas) = parsed_series(trace)?;
    Ok(commitment_time_series(&deltas, answer, gamma))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommitmentReport {
    pub id: String,
    pub condition: String,
    pub gamma: f64,
    pub onset: usize,
    pub final_answer: Verdict,
    pub commit_time: Option<usize>,
    pub lead: Option<usize>,
    pub sign_flips: usize,
    /// |δ| at the last pre-onset state.
    pub final_margin: Option<f64>,
    /// Winner at the last pre-onset state equals the parsed answer.
    pub winner_matches_final: bool,
}

pub fn commitment_report(trace: &TrajectoryTrace, gamma: f64) -> Result<CommitmentReport, CommitmentError> {
    check_gamma(gamma)?;
    let (onset, answer, deltas) = parsed_series(trace)?;
    let commit_time = commitment_time_series(&deltas, answer, gamma);
    let last = deltas.last().copied();
    Ok(CommitmentReport {
        id: trace.id.clone(),
        condition: trace.condition.clone(),
        gamma,
        onset,
        final_answer: answer,
        commit_time,
        lead: commit_time.map(|c| onset - c),
        sign_flips: sign_flips(&deltas),
        final_margin: last.map(f64::abs),
        winner_matches_final: last.is_some_and(|d| Verdict::from_delta(d) == answer),
    })
}

/// δ signed toward the final parsed answer.
pub fn signed_series(trace: &TrajectoryTrace) -> Result<Vec<f64>, CommitmentError> {
    let (_, answer, deltas) = parsed_series(trace)?;
    Ok(deltas.into_iter().map(|d| answer.sign() * d).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub condition: String,
    pub gamma: f64,
    pub n_parsed: usize,
    pub commit_rate: Option<f64>,
    pub mean_lead: Option<f64>,
    pub mean_commit_time: Option<f64>,
}

/// One row per (condition, γ); conditions in lexical order. Unparsed traces
/// are skipped.
pub fn threshold_sweep(traces: &[TrajectoryTrace], gammas: &[f64]) -> Result<Vec<SweepRow>, CommitmentError> {
    if traces.is_empty() || gammas.is_empty() {
        return Err(CommitmentError::Empty);
    }
    for &g in gammas {
        check_gamma(g)?;
    }
    if gammas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CommitmentError::UnsortedGammas);
    }
    let mut by_condition: BTreeMap<&str, Vec<(usize, Verdict, Vec<f64>)>> = BTreeMap::new();
    for tr in traces {
        let entry = by_condition.entry(tr.condition.as_str()).or_default();
        match parsed_series(tr) {
            Ok(s) => entry.push(s),
            Err(CommitmentError::Unparsed(_)) => {}
            Err(e) => return Err(e),
        }
    }
    let mut rows = Vec::new();
    for (condition, series) in by_condition {
        for &gamma in gammas {
            let commits: Vec<(usize, usize)> = series
                .iter()
                .filter_map(|(onset, a, d)| commitment_time_series(d, *a, gamma).map(|c| (c, onset - c)))
                .collect();
            let times: Vec<f64> = commits.iter().map(|c| c.0 as f64).collect();
            let leads: Vec<f64> = commits.iter().map(|c| c.1 as f64).collect();
            rows.push(SweepRow {
                condition: condition.to_string(),
                gamma,
                n_parsed: series.len(),
                commit_rate: (!series.is_empty()).then(|| commits.len() as f64 / series.len() as f64),
                mean_lead: mean(&leads),
                mean_commit_time: mean(&times),
            });
        }
    }
    Ok(rows)
}

fn bin_of(t: usize, onset: usize, bins: usize) -> usize {
    ((t as f64 / onset as f64) * bins as f64).floor().min(bins as f64 - 1.0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub condition: String,
    /// Bin center on normalized pre-onset time t / onset.
    pub progress: f64,
    pub n: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    /// Fraction of states whose winner is the final answer.
    pub winner_match: f64,
    pub mean_margin: f64,
}

/// Signed-δ quartiles, winner stability and mean margin per normalized-time
/// bin, per condition. Unparsed traces are skipped; empty bins are omitted.
pub fn trajectory_profile(traces: &[TrajectoryTrace], bins: usize) -> Result<Vec<ProfileRow>, CommitmentError> {
    if bins == 0 {
        return Err(CommitmentError::NoBins);
    }
    let mut cells: BTreeMap<(&str, usize), Vec<(f64, bool)>> = BTreeMap::new();
    for tr in traces {
        let (onset, answer, deltas) = match parsed_series(tr) {
            Ok(s) => s,
            Err(CommitmentError::Unparsed(_)) => continue,
            Err(e) => return Err(e),
        };
        for (t, d) in deltas.into_iter().enumerate() {
            cells
                .entry((tr.condition.as_str(), bin_of(t, onset, bins)))
                .or_default()
                .push((answer.sign() * d, Verdict::from_delta(d) == answer));
        }
    }
    Ok(cells
        .into_iter()
        .map(|((condition, b), cell)| {
            let n = cell.len();
            let winner_match = cell.iter().filter(|c| c.1).count() as f64 / n as f64;
            let mut v: Vec<f64> = cell.into_iter().map(|c| c.0).collect();
            let mean_margin = v.iter().map(|s| s.abs()).sum::<f64>() / n as f64;
            v.sort_by(f64::total_cmp);
            ProfileRow {
                condition: condition.to_string(),
                progress: (b as f64 + 0.5) / bins as f64,
                n,
                median: quantile_sorted(&v, 0.5).expect("nonempty bin"),
                q25: quantile_sorted(&v, 0.25).expect("nonempty bin"),
                q75: quantile_sorted(&v, 0.75).expect("nonempty bin"),
                winner_match,
                mean_margin,
            }
        })
        .collect())
}
