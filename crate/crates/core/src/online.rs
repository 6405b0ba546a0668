//! Online stopping rules that only look at current and past states.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::commitment::{commitment_time_series, parsed_series, sign_flips, CommitmentError};
use crate::scheme::Verdict;
use crate::stats::{mean, median};
use crate::trace::TrajectoryTrace;

#[derive(Debug, Error, PartialEq)]
pub enum OnlineError {
    #[error("invalid rule: {0}")]
    BadRule(String),
    #[error("empty calibration grid")]
    EmptyGrid,
    #[error("empty train set")]
    NoTraces,
    #[error("no rule in the grid stops on any train trace")]
    NeverStops,
    #[error(transparent)]
    Commitment(#[from] CommitmentError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OnlineRule {
    pub gamma: f64,
    /// Earliest normalized progress t / onset at which a stop is allowed.
    pub min_progress: f64,
    /// Number of consecutive states (ending at t) that must share a winner.
    pub window: usize,
}

impl OnlineRule {
    pub const NAIVE: OnlineRule = OnlineRule {
        gamma: 2.0,
        min_progress: 0.0,
        window: 3,
    };

    pub fn new(gamma: f64, min_progress: f64, window: usize) -> Result<Self, OnlineError> {
        let r = Self {
            gamma,
            min_progress,
            window,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<(), OnlineError> {
        if self.window < 1 {
            return Err(OnlineError::BadRule("window must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.min_progress) {
            return Err(OnlineError::BadRule("progress threshold must lie in [0, 1)".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(OnlineError::BadRule("gamma must be positive".into()));
        }
        Ok(())
    }

    pub fn describe(&self) -> String {
        format!(
            "gamma={}, progress>={}, window {}",
            self.gamma, self.min_progress, self.window
        )
    }
}

/// First state index at which `rule` fires on a δ prefix stream, given the
/// onset used for progress. Only `deltas[..=t]` is consulted at step `t`.
pub fn first_stop(deltas: &[f64], onset: usize, rule: &OnlineRule) -> Option<usize> {
    (0..deltas.len()).find(|&t| {
        if deltas[t].abs() < rule.gamma || t + 1 < rule.window {
            return false;
        }
        if onset == 0 || (t as f64) < rule.min_progress * onset as f64 {
            return false;
        }
        let w = Verdict::from_delta(deltas[t]);
        deltas[t + 1 - rule.window..=t].iter().all(|&d| Verdict::from_delta(d) == w)
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StopRecord {
    pub id: String,
    pub condition: String,
    pub stop: Option<usize>,
    pub predicted: Option<Verdict>,
    pub final_answer: Option<Verdict>,
    pub correct: Option<bool>,
    /// onset − stop.
    pub online_lead: Option<usize>,
}

pub fn apply_online_rule(rule: &OnlineRule, trace: &TrajectoryTrace) -> StopRecord {
    let deltas = trace.deltas();
    let onset = trace.onset.unwrap_or(deltas.len());
    let stop = first_stop(&deltas, onset, rule);
    let predicted = stop.map(|t| Verdict::from_delta(deltas[t]));
    StopRecord {
        id: trace.id.clone(),
        condition: trace.condition.clone(),
        stop,
        predicted,
        final_answer: trace.final_answer,
        correct: predicted.zip(trace.final_answer).map(|(p, a)| p == a),
        online_lead: stop.map(|t| onset.saturating_sub(t)),
    }
}

/// The naive rule: |δ_t| ≥ γ and the last `window` winners identical.
pub fn naive_online_stop(trace: &TrajectoryTrace, gamma: f64, window: usize) -> Result<StopRecord, OnlineError> {
    let rule = OnlineRule::new(gamma, 0.0, window)?;
    Ok(apply_online_rule(&rule, trace))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineSummary {
    pub condition: String,
    pub rule: OnlineRule,
    pub n: usize,
    pub stop_rate: f64,
    /// Correct stops over stopped traces.
    pub stop_accuracy: Option<f64>,
    /// Correct stops over all traces; no-stop counts as wrong.
    pub overall_accuracy: f64,
    /// Over stopped traces only.
    pub mean_online_lead: Option<f64>,
    pub median_online_lead: Option<f64>,
    pub mean_retro_lead: Option<f64>,
    pub mean_sign_flips: Option<f64>,
}

pub fn summarize_online(
    condition: &str,
    rule: &OnlineRule,
    traces: &[TrajectoryTrace],
    retro_gamma: f64,
) -> Result<OnlineSummary, OnlineError> {
    let mut records = Vec::new();
    let mut retro = Vec::new();
    let mut flips = Vec::new();
    for tr in traces {
        let (onset, answer, deltas) = parsed_series(tr)?;
        records.push(apply_online_rule(rule, tr));
        if let Some(c) = commitment_time_series(&deltas, answer, retro_gamma) {
            retro.push((onset - c) as f64);
        }
        flips.push(sign_flips(&deltas) as f64);
    }
    let n = records.len();
    let stopped: Vec<&StopRecord> = records.iter().filter(|r| r.stop.is_some()).collect();
    let correct = stopped.iter().filter(|r| r.correct == Some(true)).count();
    let leads: Vec<f64> = stopped.iter().filter_map(|r| r.online_lead).map(|l| l as f64).collect();
    Ok(OnlineSummary {
        condition: condition.to_string(),
        rule: *rule,
        n,
        stop_rate: if n == 0 { 0.0 } else { stopped.len() as f64 / n as f64 },
        stop_accuracy: (!stopped.is_empty()).then(|| correct as f64 / stopped.len() as f64),
        overall_accuracy: if n == 0 { 0.0 } else { correct as f64 / n as f64 },
        mean_online_lead: mean(&leads),
        median_online_lead: median(&leads),
        mean_retro_lead: mean(&retro),
        mean_sign_flips: mean(&flips),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationGrid {
    pub gammas: Vec<f64>,
    pub progress: Vec<f64>,
    pub windows: Vec<usize>,
}

impl Default for CalibrationGrid {
    fn default() -> Self {
        Self {
            gammas: vec![1.0, 2.0, 5.0, 8.0],
            progress: vec![0.35, 0.45, 0.55, 0.65, 0.75],
            windows: vec![1, 2, 3],
        }
    }
}

impl CalibrationGrid {
    pub fn rules(&self) -> Result<Vec<OnlineRule>, OnlineError> {
        let mut out = Vec::new();
        for &g in &self.gammas {
            for &p in &self.progress {
                for &w in &self.windows {
                    out.push(OnlineRule::new(g, p, w)?);
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub rule: OnlineRule,
    pub train: OnlineSummary,
}

/// Picks the rule with the highest train accuracy (no-stop counts as wrong),
/// then the larger mean online lead, then the smaller γ; remaining ties keep
/// grid order.
pub fn calibrate_online_rule(
    condition: &str,
    train: &[TrajectoryTrace],
    grid: &CalibrationGrid,
    retro_gamma: f64,
) -> Result<Calibration, OnlineError> {
    if train.is_empty() {
        return Err(OnlineError::NoTraces);
    }
    let rules = grid.rules()?;
    if rules.is_empty() {
        return Err(OnlineError::EmptyGrid);
    }
    let mut best: Option<OnlineSummary> = None;
    for rule in &rules {
        let s = summarize_online(condition, rule, train, retro_gamma)?;
        if s.stop_rate == 0.0 {
            continue;
        }
        let better = match &best {
            None => true,
            Some(b) => {
                let lead = |x: &OnlineSummary| x.mean_online_lead.unwrap_or(0.0);
                (s.overall_accuracy, lead(&s), -s.rule.gamma) > (b.overall_accuracy, lead(b), -b.rule.gamma)
            }
        };
        if better {
            best = Some(s);
        }
    }
    let train = best.ok_or(OnlineError::NeverStops)?;
    Ok(Calibration { rule: train.rule, train })
}

/// Splits traces into train and held-out sets within each condition;
/// `train_fraction` of each condition's traces (rounded, at least one on each
/// side when possible) go to train. Output keeps input order.
pub fn split_traces(
    traces: &[TrajectoryTrace],
    train_fraction: f64,
    seed: u64,
) -> (Vec<TrajectoryTrace>, Vec<TrajectoryTrace>) {
    let mut by: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in traces.iter().enumerate() {
        by.entry(t.condition.as_str()).or_default().push(i);
    }
    let mut in_train = vec![false; traces.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for idx in by.values_mut() {
        idx.shuffle(&mut rng);
        let n = idx.len();
        let k = ((train_fraction * n as f64).round() as usize).clamp(n.min(1), n.saturating_sub(1).max(1));
        for &i in &idx[..k] {
            in_train[i] = true;
        }
    }
    let (train, test): (Vec<_>, Vec<_>) = traces.iter().zip(in_train).partition(|(_, tr)| *tr);
    (
        train.into_iter().map(|(t, _)| t.clone()).collect(),
        test.into_iter().map(|(t, _)| t.clone()).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::StateRecord;

    fn trace(deltas: &[f64], answer: Verdict) -> TrajectoryTrace {
        let mut tr = TrajectoryTrace::new("x", "c");
        tr.onset = Some(deltas.len());
        tr.final_answer = Some(answer);
        tr.parsed = true;
        tr.states = deltas.iter().enumerate().map(|(t, &d)| StateRecord::new(t, d)).collect();
        tr
    }

    #[test]
    fn naive_needs_a_full_window() {
        let r = naive_online_stop(&trace(&[3.0; 4], Verdict::Yes), 2.0, 3).unwrap();
        assert_eq!(r.stop, Some(2));
        assert_eq!(r.predicted, Some(Verdict::Yes));
        assert_eq!(r.online_lead, Some(2));
    }

    #[test]
    fn naive_no_stop_cases() {
        let alt: Vec<f64> = (0..10).map(|i| if i % 2 == 0 { 3.0 } else { -3.0 }).collect();
        assert_eq!(naive_online_stop(&trace(&alt, Verdict::Yes), 2.0, 3).unwrap().stop, None);
        assert_eq!(naive_online_stop(&trace(&[1.0; 6], Verdict::Yes), 2.0, 3).unwrap().stop, None);
    }

    #[test]
    fn progress_bound_delays_the_stop() {
        let tr = trace(&[2.0; 10], Verdict::Yes);
        assert_eq!(apply_online_rule(&OnlineRule::new(1.0, 0.0, 1).unwrap(), &tr).stop, Some(0));
        assert_eq!(apply_online_rule(&OnlineRule::new(1.0, 0.9, 1).unwrap(), &tr).stop, Some(9));
        assert_eq!(apply_online_rule(&OnlineRule::new(5.0, 0.0, 1).unwrap(), &tr).stop, None);
    }

    #[test]
    fn rule_validation() {
        assert!(OnlineRule::new(1.0, 1.0, 1).is_err());
        assert!(OnlineRule::new(1.0, 0.5, 0).is_err());
        assert!(OnlineRule::new(0.0, 0.5, 1).is_err());
    }

    #[test]
    fn single_rule_grid_returns_it() {
        let grid = CalibrationGrid {
            gammas: vec![2.0],
            progress: vec![0.35],
            windows: vec![2],
        };
        let c = calibrate_online_rule("c", &[trace(&[3.0; 10], Verdict::Yes)], &grid, 2.0).unwrap();
        assert_eq!(c.rule, OnlineRule::new(2.0, 0.35, 2).unwrap());
    }

    #[test]
    fn calibration_prefers_accuracy_then_lead_then_small_gamma() {
        // Early weak wrong sign, later strong correct sign.
        let mut d = vec![-1.5; 5];
        d.extend([6.0; 5]);
        let train = vec![trace(&d, Verdict::Yes)];
        let c = calibrate_online_rule("c", &train, &CalibrationGrid::default(), 2.0).unwrap();
        assert_eq!(c.train.overall_accuracy, 1.0);
        // Several rules stop correctly at t = 5; the smallest γ wins the tie.
        assert_eq!(c.rule.gamma, 1.0);
        assert_eq!(c.train.mean_online_lead, Some(5.0));
        assert!(matches!(
            calibrate_online_rule("c", &[trace(&[0.1; 4], Verdict::Yes)], &CalibrationGrid::default(), 2.0),
            Err(OnlineError::NeverStops)
        ));
    }

    #[test]
    fn split_is_per_condition_and_disjoint() {
        let mut traces = Vec::new();
        for c in ["a", "b"] {
            for i in 0..10 {
                let mut t = trace(&[1.0], Verdict::Yes);
                t.id = format!("{c}{i}");
                t.condition = c.into();
                traces.push(t);
            }
        }
        let (train, test) = split_traces(&traces, 0.7, 4);
        assert_eq!((train.len(), test.len()), (14, 6));
        assert_eq!(train.iter().filter(|t| t.condition == "a").count(), 7);
        assert!(train.iter().all(|t| test.iter().all(|u| u.id != t.id)));
        assert_eq!(split_traces(&traces, 0.7, 4).0, train);
    }
}
