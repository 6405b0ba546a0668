//! Report-only sanity suite: greedy agreement with a reference generator,
//! restart tautology, parser freeze over fixtures, and teacher-forced score
//! consistency.

use serde::{Deserialize, Serialize};

use crate::backend::{argmax_lowest, BackendError, ModelBackend, TokenId, Vocabulary};
use crate::conditions::{ConditionSpec, ParserFixture};
use crate::generate::{greedy_generate, verify_greedy_tautology, OnsetStop};
use crate::parser::{freezes_on, OnsetParser};
use crate::projection::score_continuation;

/// Reference decoder: returns the greedy response for a prompt.
pub type ReferenceGenerator<'a> = &'a dyn Fn(&[TokenId], usize) -> Result<Vec<TokenId>, BackendError>;

/// Greedy decoding that keeps no state between steps: every step rebuilds
/// the state from the prompt by replaying the whole prefix, then takes the
/// argmax. A cache-free reference for incremental decoding.
pub fn replay_greedy<B: ModelBackend + ?Sized>(
    backend: &B,
    prompt: &[TokenId],
    max_tokens: usize,
) -> Result<Vec<TokenId>, BackendError> {
    let eos = backend.eos_token();
    let mut out = Vec::new();
    while out.len() < max_tokens {
        let mut state = backend.initial_state(prompt)?;
        for &t in &out {
            state = backend.advance(&state, t)?;
        }
        let lp = backend.next_token_logprobs(&state)?;
        let tok = argmax_lowest(&lp).ok_or_else(|| BackendError::Failure("empty distribution".into()))?;
        if Some(tok) == eos {
            break;
        }
        out.push(tok);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateCheck {
    pub n: usize,
    pub passed: usize,
    pub rate: Option<f64>,
    pub failures: Vec<String>,
}

impl RateCheck {
    fn new() -> Self {
        Self {
            n: 0,
            passed: 0,
            rate: None,
            failures: Vec::new(),
        }
    }

    fn record(&mut self, ok: bool, label: impl FnOnce() -> String) {
        self.n += 1;
        if ok {
            self.passed += 1;
        } else {
            self.failures.push(label());
        }
        self.rate = Some(self.passed as f64 / self.n as f64);
    }

    fn merge(mut self, other: RateCheck) -> Self {
        self.n += other.n;
        self.passed += other.passed;
        self.failures.extend(other.failures);
        self.rate = (self.n > 0).then(|| self.passed as f64 / self.n as f64);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsistencyCheck {
    pub n: usize,
    /// Max |stepwise-accumulated − single-pass| continuation score, in nats.
    pub max_abs_error: Option<f64>,
    pub mean_abs_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SanityReport {
    /// Present only when a reference generator was supplied.
    pub greedy_match: Option<RateCheck>,
    /// Greedy restarts from every intermediate state reproduce the suffix.
    pub tautology: RateCheck,
    /// Fixtures whose parser stays defined with the same answer on every
    /// character extension once defined.
    pub freeze: RateCheck,
    /// Fixtures parsed to their expected answer with onset at the verdict line.
    pub fixture_onset: RateCheck,
    pub consistency: ConsistencyCheck,
}

impl SanityReport {
    /// Pools two reports, e.g. from runs on different backends.
    pub fn merge(self, other: SanityReport) -> SanityReport {
        let greedy_match = match (self.greedy_match, other.greedy_match) {
            (Some(a), Some(b)) => Some(a.merge(b)),
            (a, b) => a.or(b),
        };
        let (a, b) = (self.consistency, other.consistency);
        let n = a.n + b.n;
        let total = a.mean_abs_error.unwrap_or(0.0) * a.n as f64 + b.mean_abs_error.unwrap_or(0.0) * b.n as f64;
        SanityReport {
            greedy_match,
            tautology: self.tautology.merge(other.tautology),
            freeze: self.freeze.merge(other.freeze),
            fixture_onset: self.fixture_onset.merge(other.fixture_onset),
            consistency: ConsistencyCheck {
                n,
                max_abs_error: [a.max_abs_error, b.max_abs_error].into_iter().flatten().reduce(f64::max),
                mean_abs_error: (n > 0).then(|| total / n as f64),
            },
        }
    }

    /// True when every agreement rate that was measured is 1.
    pub fn all_pass(&self) -> bool {
        let full = |c: &RateCheck| c.failures.is_empty();
        self.greedy_match.as_ref().is_none_or(full) && full(&self.tautology) && full(&self.freeze) && full(&self.fixture_onset)
    }
}

fn fixture_parser(f: &ParserFixture) -> Result<OnsetParser, String> {
    ConditionSpec::resolve(&f.condition)
        .and_then(|c| c.parser())
        .map_err(|e| e.to_string())
}

/// First character count at which the parser is defined on `text`.
fn char_onset(parser: &OnsetParser, text: &str) -> Option<usize> {
    let ends: Vec<usize> = text.char_indices().map(|(i, c)| i + c.len_utf8()).collect();
    std::iter::once(0)
        .chain(ends)
        .find(|&end| parser.parse(&text[..end]).is_some())
}

/// Runs the suite on `prompts` and `fixtures`. Backend failures are recorded
/// as check failures, never raised.
pub fn run_sanity_suite<B: ModelBackend + ?Sized>(
    backend: &B,
    prompts: &[Vec<TokenId>],
    max_tokens: usize,
    reference: Option<ReferenceGenerator<'_>>,
    fixtures: &[ParserFixture],
) -> SanityReport {
    let mut greedy_match = reference.map(|_| RateCheck::new());
    let mut tautology = RateCheck::new();
    let mut errors = Vec::new();
    for (i, prompt) in prompts.iter().enumerate() {
        let generated = match greedy_generate(backend, prompt, max_tokens, None::<&OnsetStop<'_, Vocabulary>>) {
            Ok(g) => g.tokens,
            Err(e) => {
                tautology.record(false, || format!("prompt {i}: generation failed: {e}"));
                continue;
            }
        };
        if let (Some(check), Some(reference)) = (greedy_match.as_mut(), reference) {
            match reference(prompt, max_tokens) {
                Ok(r) => check.record(r == generated, || format!("prompt {i}: reference differs")),
                Err(e) => check.record(false, || format!("prompt {i}: reference failed: {e}")),
            }
        }
        let ok = (0..generated.len()).all(|t| verify_greedy_tautology(backend, prompt, &generated, t).unwrap_or(false));
        tautology.record(ok, || format!("prompt {i}: restart diverged"));
        if !generated.is_empty() {
            let pass = backend.initial_state(prompt).and_then(|s| {
                let single: f64 = backend.teacher_forced_logprobs(&s, &generated)?.iter().sum();
                let step = score_continuation(backend, &s, &generated).map_err(|e| BackendError::Failure(e.to_string()))?;
                Ok((single - step).abs())
            });
            match pass {
                Ok(err) => errors.push(err),
                Err(e) => log::warn!("consistency check on prompt {i} failed: {e}"),
            }
        }
    }

    let mut freeze = RateCheck::new();
    let mut fixture_onset = RateCheck::new();
    for (i, f) in fixtures.iter().enumerate() {
        let label = || format!("fixture {i} ({})", f.condition);
        let parser = match fixture_parser(f) {
            Ok(p) => p,
            Err(e) => {
                freeze.record(false, || format!("{}: {e}", label()));
                fixture_onset.record(false, || format!("{}: {e}", label()));
                continue;
            }
        };
        let chars: Vec<String> = f.text.chars().map(String::from).collect();
        freeze.record(freezes_on(&parser, &chars), label);
        let ok = parser.parse(&f.text) == f.expected && char_onset(&parser, &f.text) == f.onset_chars;
        fixture_onset.record(ok, label);
    }

    let n = errors.len();
    SanityReport {
        greedy_match,
        tautology,
        freeze,
        fixture_onset,
        consistency: ConsistencyCheck {
            n,
            max_abs_error: errors.iter().copied().reduce(f64::max),
            mean_abs_error: (n > 0).then(|| errors.iter().sum::<f64>() / n as f64),
        },
    }
}
