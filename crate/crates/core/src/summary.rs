//! Per-condition summaries over trace collections.

use serde::{Deserialize, Serialize};

use crate::bootstrap::{grouped_bootstrap_ci, BootstrapCi, BootstrapError};
use crate::commitment::{commitment_report, CommitmentError};
use crate::stats::mean;
use crate::trace::TrajectoryTrace;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSettings {
    pub replicates: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for BootstrapSettings {
    fn default() -> Self {
        Self {
            replicates: crate::bootstrap::DEFAULT_REPLICATES,
            alpha: crate::bootstrap::DEFAULT_ALPHA,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSummary {
    pub condition: String,
    pub gamma: f64,
    pub n: usize,
    pub n_parsed: usize,
    pub parse_rate: f64,
    /// Final answer equals ground truth, over parsed traces that carry one.
    pub accuracy: Option<f64>,
    pub winner_matches_final_rate: Option<f64>,
    pub commit_rate: Option<f64>,
    pub onset: Option<BootstrapCi>,
    /// Over committed traces only.
    pub lead: Option<BootstrapCi>,
    pub mean_sign_flips: Option<f64>,
    pub mean_final_margin: Option<f64>,
}

fn rate(hits: usize, n: usize) -> Option<f64> {
    (n > 0).then(|| hits as f64 / n as f64)
}

fn ci(values: &[f64], b: &BootstrapSettings) -> Result<Option<BootstrapCi>, BootstrapError> {
    if values.is_empty() {
        return Ok(None);
    }
    grouped_bootstrap_ci(values, b.replicates, b.alpha, b.seed).map(Some)
}

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum SummaryError {
    #[error("traces mix conditions {0:?} and {1:?}")]
    MixedConditions(String, String),
    #[error("empty trace set")]
    Empty,
    #[error(transparent)]
    Commitment(#[from] CommitmentError),
    #[error(transparent)]
    Bootstrap(#[from] BootstrapError),
}

pub fn summarize_condition(
    traces: &[TrajectoryTrace],
    gamma: f64,
    boot: &BootstrapSettings,
) -> Result<ConditionSummary, SummaryError> {
    let first = traces.first().ok_or(SummaryError::Empty)?;
    if let Some(other) = traces.iter().find(|t| t.condition != first.condition) {
        return Err(SummaryError::MixedConditions(first.condition.clone(), other.condition.clone()));
    }
    let mut reports = Vec::new();
    for tr in traces.iter().filter(|t| t.is_parsed()) {
        reports.push(commitment_report(tr, gamma)?);
    }
    let n_parsed = reports.len();
    let graded: Vec<bool> = traces
        .iter()
        .filter_map(|t| Some(t.final_answer? == t.ground_truth?))
        .collect();
    let onsets: Vec<f64> = reports.iter().map(|r| r.onset as f64).collect();
    let leads: Vec<f64> = reports.iter().filter_map(|r| r.lead).map(|l| l as f64).collect();
    let flips: Vec<f64> = reports.iter().map(|r| r.sign_flips as f64).collect();
    let margins: Vec<f64> = reports.iter().filter_map(|r| r.final_margin).collect();
    Ok(ConditionSummary {
        condition: first.condition.clone(),
        gamma,
        n: traces.len(),
        n_parsed,
        parse_rate: n_parsed as f64 / traces.len() as f64,
        accuracy: rate(graded.iter().filter(|&&g| g).count(), graded.len()),
        winner_matches_final_rate: rate(reports.iter().filter(|r| r.winner_matches_final).count(), n_parsed),
        commit_rate: rate(leads.len(), n_parsed),
        onset: ci(&onsets, boot)?,
        lead: ci(&leads, boot)?,
        mean_sign_flips: mean(&flips),
        mean_final_margin: mean(&margins),
    })
}

/// Summaries for every condition present, in lexical order.
pub fn summarize_all(
    traces: &[TrajectoryTrace],
    gamma: f64,
    boot: &BootstrapSettings,
) -> Result<Vec<ConditionSummary>, SummaryError> {
    let mut by: std::collections::BTreeMap<&str, Vec<TrajectoryTrace>> = Default::default();
    for t in traces {
        by.entry(t.condition.as_str()).or_default().push(t.clone());
    }
    by.values().map(|v| summarize_condition(v, gamma, boot)).collect()
}

/// Contextual vs bare verbalizer δ agreement for one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BareComparison {
    pub condition: String,
    /// Parsed traces whose every state carries a bare δ.
    pub n_traces: usize,
    pub n_states: usize,
    /// Mean within-trace Pearson correlation over traces where it is defined.
    pub mean_correlation: Option<f64>,
    /// Fraction of states where both codes pick the same winner.
    pub winner_agreement: Option<f64>,
    /// Fraction of traces whose last pre-onset bare winner is the final answer.
    pub bare_final_match: Option<f64>,
    pub contextual_final_match: Option<f64>,
}

/// Per-condition comparison in lexical order; conditions without bare δ are
/// omitted.
pub fn bare_contextual_comparison(traces: &[TrajectoryTrace]) -> Vec<BareComparison> {
    use crate::scheme::Verdict;
    let mut by: std::collections::BTreeMap<&str, Vec<&TrajectoryTrace>> = Default::default();
    for t in traces.iter().filter(|t| t.is_parsed() && !t.states.is_empty()) {
        if t.states.iter().all(|s| s.delta_bare.is_some()) {
            by.entry(t.condition.as_str()).or_default().push(t);
        }
    }
    by.into_iter()
        .map(|(condition, ts)| {
            let (mut corrs, mut agree, mut states, mut bare_ok, mut ctx_ok) = (Vec::new(), 0usize, 0usize, 0usize, 0usize);
            for t in &ts {
                let ctx = t.deltas();
                let bare: Vec<f64> = t.states.iter().filter_map(|s| s.delta_bare).collect();
                if let Some(r) = crate::stats::pearson(&ctx, &bare) {
                    corrs.push(r);
                }
                agree += ctx
                    .iter()
                    .zip(&bare)
                    .filter(|(a, b)| Verdict::from_delta(**a) == Verdict::from_delta(**b))
                    .count();
                states += ctx.len();
                let fin = t.final_answer;
                bare_ok += (Some(Verdict::from_delta(bare[bare.len() - 1])) == fin) as usize;
                ctx_ok += (Some(Verdict::from_delta(ctx[ctx.len() - 1])) == fin) as usize;
            }
            BareComparison {
                condition: condition.to_string(),
                n_traces: ts.len(),
                n_states: states,
                mean_correlation: mean(&corrs),
                winner_agreement: rate(agree, states),
                bare_final_match: rate(bare_ok, ts.len()),
                contextual_final_match: rate(ctx_ok, ts.len()),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheme::Verdict;
    use crate::synthetic::{synthesize_trace, CommitDynamics, MixingKind, SyntheticWorld};

    #[test]
    fn forced_commitment_leads_by_onset() {
        let w = SyntheticWorld::new(&["c"], MixingKind::Shared, 0).with_commit(CommitDynamics {
            start: 5.0,
            drift_rate: 0.0,
            target: 4.0,
            noise: 0.0,
        });
        let traces: Vec<_> = (0..8).map(|s| synthesize_trace(&w, "c", s, format!("t{s}")).unwrap()).collect();
        let s = summarize_condition(&traces, 2.0, &BootstrapSettings::default()).unwrap();
        assert_eq!(s.commit_rate, Some(1.0));
        let lead = s.lead.unwrap();
        assert_eq!((lead.estimate, lead.lower, lead.upper), (40.0, 40.0, 40.0));
        assert_eq!(s.onset.unwrap().estimate, 40.0);
        assert_eq!(s.parse_rate, 1.0);
    }

    #[test]
    fn unparsed_only_batch() {
        let mut t = TrajectoryTrace::new("a", "c");
        t.ground_truth = Some(Verdict::Yes);
        let s = summarize_condition(&[t.clone(), t], 2.0, &BootstrapSettings::default()).unwrap();
        assert_eq!(s.parse_rate, 0.0);
        assert_eq!(s.n_parsed, 0);
        assert!(s.lead.is_none() && s.commit_rate.is_none() && s.accuracy.is_none());
    }

    #[test]
    fn mixed_conditions_are_rejected() {
        let (a, b) = (TrajectoryTrace::new("a", "x"), TrajectoryTrace::new("b", "y"));
        assert!(matches!(
            summarize_condition(&[a, b], 2.0, &BootstrapSettings::default()),
            Err(SummaryError::MixedConditions(..))
        ));
    }

    #[test]
    fn bare_comparison_counts_agreement() {
        let mut t = TrajectoryTrace::new("x", "c");
        t.tokens = vec![0; 3];
        t.token_texts = vec![String::new(); 3];
        t.onset = Some(3);
        t.final_answer = Some(Verdict::Yes);
        t.parsed = true;
        for (i, (c, b)) in [(1.0, 2.0), (2.0, -1.0), (3.0, 4.0)].into_iter().enumerate() {
            let mut s = crate::trace::StateRecord::new(i, c);
            s.delta_bare = Some(b);
            t.states.push(s);
        }
        let mut plain = t.clone();
        plain.id = "y".into();
        plain.states[0].delta_bare = None;
        let rows = bare_contextual_comparison(&[t, plain]);
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].n_traces, 1);
        assert_eq!(rows[0].winner_agreement, Some(2.0 / 3.0));
        assert_eq!(rows[0].bare_final_match, Some(1.0));
    }
}
