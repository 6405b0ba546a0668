//! Exact continuation scores, answer-level marginalization and the binary
//! commitment code.
//!
//! Everything stays in the log domain until the final projection; verbalizer
//! scores routinely differ by tens of nats.

use thiserror::Error;

use crate::backend::{BackendError, ModelBackend, TokenId};
use crate::scheme::{AnswerScheme, Verdict};
use crate::stats::pearson;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error("empty continuation")]
    EmptyContinuation,
    #[error("empty verbalizer set")]
    EmptyVerbalizerSet,
    #[error("probability {0} outside the open interval (0, 1)")]
    Domain(f64),
    #[error("series lengths differ: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("series need at least two values, got {0}")]
    TooShort(usize),
    #[error("non-finite score {0}")]
    NonFinite(f64),
    #[error(transparent)]
    Backend(#[from] BackendError),
}

/// Max-shifted log-sum-exp. Returns `-inf` for an empty slice or when every
/// term is `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if m == f64::INFINITY {
        return f64::INFINITY;
    }
    let s: f64 = xs.iter().map(|x| (x - m).exp()).sum();
    m + s.ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of [`sigmoid`]: `ln(p / (1 - p))`.
pub fn logit(p: f64) -> Result<f64, ProjectionError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(ProjectionError::Domain(p));
    }
    Ok(p.ln() - (-p).ln_1p())
}

/// Sum of per-token log-probabilities of `tokens` continuing from `state`.
/// Not length-normalized.
pub fn score_continuation<B: ModelBackend + ?Sized>(
    backend: &B,
    state: &B::State,
    tokens: &[TokenId],
) -> Result<f64, ProjectionError> {
    if tokens.is_empty() {
        return Err(ProjectionError::EmptyContinuation);
    }
    let vocab = backend.vocab_size();
    if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
        return Err(BackendError::UnknownToken {
            token: bad,
            vocab_size: vocab,
        }
        .into());
    }
    let mut total = 0.0f64;
    let mut cur = state.clone();
    for (i, &tok) in tokens.iter().enumerate() {
        let lp = backend.next_token_logprobs(&cur)?;
        total += lp[tok as usize];
        if i + 1 < tokens.len() {
            cur = backend.advance(&cur, tok)?;
        }
    }
    Ok(total)
}

/// Answer-level score: log-sum-exp of the continuation score of every
/// verbalizer in the set.
pub fn score_answer<B: ModelBackend + ?Sized>(
    backend: &B,
    state: &B::State,
    verbalizers: &[Vec<TokenId>],
) -> Result<f64, ProjectionError> {
    Ok(score_answer_detailed(backend, state, verbalizers)?.0)
}

/// Like [`score_answer`] but also returns every per-verbalizer score.
pub fn score_answer_detailed<B: ModelBackend + ?Sized>(
    backend: &B,
    state: &B::State,
    verbalizers: &[Vec<TokenId>],
) -> Result<(f64, Vec<f64>), ProjectionError> {
    if verbalizers.is_empty() {
        return Err(ProjectionError::EmptyVerbalizerSet);
    }
    let scores = verbalizers
        .iter()
        .map(|v| score_continuation(backend, state, v))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((log_sum_exp(&scores), scores))
}

/// Finite-answer projection of one state.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerProjection {
    /// Answer-level log-probability mass, in scheme order.
    pub scores: Vec<f64>,
    /// Per-verbalizer continuation scores, in scheme order.
    pub verbalizer_scores: Vec<Vec<f64>>,
    /// `scores[yes] - scores[no]`.
    pub delta: f64,
    pub distribution: Vec<f64>,
    pub winner: Verdict,
}

pub fn project<B: ModelBackend + ?Sized>(
    backend: &B,
    state: &B::State,
    scheme: &AnswerScheme,
) -> Result<AnswerProjection, ProjectionError> {
    let mut scores = Vec::with_capacity(2);
    let mut verbalizer_scores = Vec::with_capacity(2);
    for set in scheme.verbalizer_sets() {
        let (s, per) = score_answer_detailed(backend, state, set)?;
        scores.push(s);
        verbalizer_scores.push(per);
    }
    projection_from_scores(scores, verbalizer_scores)
}

/// Builds the projection from answer-level scores (yes-like first).
pub fn projection_from_scores(
    scores: Vec<f64>,
    verbalizer_scores: Vec<Vec<f64>>,
) -> Result<AnswerProjection, ProjectionError> {
    if let Some(&bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(ProjectionError::NonFinite(bad));
    }
    let delta = scores[0] - scores[1];
    if !delta.is_finite() {
        return Err(ProjectionError::NonFinite(delta));
    }
    // Binary softmax written through the logistic so that P(yes) = σ(δ) exactly.
    let distribution = vec![sigmoid(delta), sigmoid(-delta)];
    Ok(AnswerProjection {
        scores,
        verbalizer_scores,
        delta,
        distribution,
        winner: Verdict::from_delta(delta),
    })
}

/// δ recomputed from per-verbalizer continuation scores (yes-like set first).
pub fn delta_from_verbalizer_scores(yes: &[f64], no: &[f64]) -> Result<f64, ProjectionError> {
    if yes.is_empty() || no.is_empty() {
        return Err(ProjectionError::EmptyVerbalizerSet);
    }
    Ok(log_sum_exp(yes) - log_sum_exp(no))
}

/// Agreement between two δ series over the same states.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaComparison {
    pub n: usize,
    /// `None` when either series has zero variance.
    pub correlation: Option<f64>,
    pub winner_agreement: f64,
    pub final_winner_match: bool,
}

pub fn compare_delta_series(a: &[f64], b: &[f64]) -> Result<DeltaComparison, ProjectionError> {
    if a.len() != b.len() {
        return Err(ProjectionError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(ProjectionError::TooShort(a.len()));
    }
    let agree = a
        .iter()
        .zip(b)
        .filter(|(x, y)| Verdict::from_delta(**x) == Verdict::from_delta(**y))
        .count();
    let last = a.len() - 1;
    Ok(DeltaComparison {
        n: a.len(),
        correlation: pearson(a, b),
        winner_agreement: agree as f64 / a.len() as f64,
        final_winner_match: Verdict::from_delta(a[last]) == Verdict::from_delta(b[last]),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheme::Variant;
    use crate::toy::{TableBackend, UniformBackend};

    #[test]
    fn uniform_two_token_continuation() {
        let b = UniformBackend::new(4);
        let s = b.initial_state(&[]).unwrap();
        let v = score_continuation(&b, &s, &[1, 3]).unwrap();
        assert!((v - 2.0 * (0.25f64).ln()).abs() < 1e-12);
        assert!((v + 2.772588722239781).abs() < 1e-12);
    }

    #[test]
    fn single_token_matches_logprob_vector() {
        let b = crate::toy::HashedBackend::new(7, 11, 1.0);
        let s = b.initial_state(&[2, 3]).unwrap();
        let lp = b.next_token_logprobs(&s).unwrap();
        assert_eq!(score_continuation(&b, &s, &[5]).unwrap(), lp[5]);
    }

    #[test]
    fn scripted_product() {
        // p(1 | root) = 0.5, p(2 | [1]) = 0.25
        let mut t = TableBackend::new(4);
        t.set(&[], &[0.25, 0.5, 0.125, 0.125]);
        t.set(&[1], &[0.25, 0.25, 0.25, 0.25]);
        let s = t.initial_state(&[]).unwrap();
        let v = score_continuation(&t, &s, &[1, 2]).unwrap();
        // hand oracle: ln(0.5 * 0.25)
        assert!((v - 0.125f64.ln()).abs() < 1e-12);
        assert!((v + 2.0794415416798357).abs() < 1e-12);
    }

    #[test]
    fn continuation_errors() {
        let b = UniformBackend::new(4);
        let s = b.initial_state(&[]).unwrap();
        assert_eq!(
            score_continuation(&b, &s, &[]),
            Err(ProjectionError::EmptyContinuation)
        );
        assert!(matches!(
            score_continuation(&b, &s, &[9]),
            Err(ProjectionError::Backend(BackendError::UnknownToken { .. }))
        ));
        assert_eq!(
            score_answer(&b, &s, &[]),
            Err(ProjectionError::EmptyVerbalizerSet)
        );
    }

    #[test]
    fn log_sum_exp_values() {
        assert_eq!(log_sum_exp(&[-1.5]), -1.5);
        assert!((log_sum_exp(&[-0.7, -0.7]) - (-0.7 + 2f64.ln())).abs() < 1e-15);
        // direct summation oracle: ln(e^-1 + e^-2 + e^-3)
        let direct = ((-1f64).exp() + (-2f64).exp() + (-3f64).exp()).ln();
        let v = log_sum_exp(&[-1.0, -2.0, -3.0]);
        assert!((v - direct).abs() < 1e-14);
        assert!((v + 0.5923940355556479).abs() < 1e-12);
        assert!((log_sum_exp(&[-1000.0, -1001.0]) - (-1000.0 + (1.0 + (-1f64).exp()).ln())).abs() < 1e-12);
    }

    #[test]
    fn projection_equal_scores_ties_to_yes() {
        let p = projection_from_scores(vec![-2.0, -2.0], vec![vec![-2.0], vec![-2.0]]).unwrap();
        assert_eq!(p.delta, 0.0);
        assert_eq!(p.distribution, vec![0.5, 0.5]);
        assert_eq!(p.winner, Verdict::Yes);
    }

    #[test]
    fn projection_delta_two() {
        let p = projection_from_scores(vec![-1.0, -3.0], vec![vec![-1.0], vec![-3.0]]).unwrap();
        assert_eq!(p.delta, 2.0);
        assert!((p.distribution[0] - 0.8807970779778823).abs() < 1e-12);
        assert!((sigmoid(2.0) - 0.881).abs() < 5e-4);
    }

    #[test]
    fn project_against_uniform_backend() {
        let b = UniformBackend::new(6);
        let s = b.initial_state(&[]).unwrap();
        let scheme = AnswerScheme::new(
            vec!["yes".into(), "no".into()],
            vec![vec![vec![1], vec![2]], vec![vec![3]]],
            Variant::Bare,
        )
        .unwrap();
        let p = project(&b, &s, &scheme).unwrap();
        assert!((p.delta - 2f64.ln()).abs() < 1e-12);
        assert_eq!(p.winner, Verdict::Yes);
    }

    #[test]
    fn logit_roundtrip_values() {
        assert_eq!(logit(0.5).unwrap(), 0.0);
        assert!((logit(0.9).unwrap() - 9f64.ln()).abs() < 1e-12);
        assert!((logit(0.881).unwrap() - 2.001).abs() < 1e-3);
        assert_eq!(logit(0.0), Err(ProjectionError::Domain(0.0)));
        assert_eq!(logit(1.0), Err(ProjectionError::Domain(1.0)));
        for p in [1e-9, 0.01, 0.3, 0.77, 0.999999] {
            assert!((sigmoid(logit(p).unwrap()) - p).abs() < 1e-12);
        }
    }

    #[test]
    fn compare_identical_and_negated() {
        let a = [1.0, -2.0, 3.5, 0.5];
        let c = compare_delta_series(&a, &a).unwrap();
        assert!((c.correlation.unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(c.winner_agreement, 1.0);
        assert!(c.final_winner_match);
        let neg: Vec<f64> = a.iter().map(|x| -x).collect();
        let c = compare_delta_series(&a, &neg).unwrap();
        assert!((c.correlation.unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(c.winner_agreement, 0.0);
        assert!(!c.final_winner_match);
    }

    #[test]
    fn compare_errors_and_zero_variance() {
        assert_eq!(
            compare_delta_series(&[1.0], &[1.0, 2.0]),
            Err(ProjectionError::LengthMismatch(1, 2))
        );
        assert_eq!(compare_delta_series(&[1.0], &[1.0]), Err(ProjectionError::TooShort(1)));
        let c = compare_delta_series(&[1.0, 1.0, 1.0], &[2.0, -1.0, 3.0]).unwrap();
        assert_eq!(c.correlation, None);
        assert!((c.winner_agreement - 2.0 / 3.0).abs() < 1e-15);
    }
}
