//! Greedy generation, the greedy-restart tautology check and trace building.

use rayon::prelude::*;
use thiserror::Error;

use crate::backend::{argmax_lowest, BackendError, ModelBackend, TokenId, Tokenizer};
use crate::conditions::{ConditionError, ConditionSpec, ToyStyle};
use crate::parser::{find_onset, OnsetParser};
use crate::projection::{project, ProjectionError};
use crate::scheme::{AnswerScheme, Variant, Verdict};
use crate::trace::{StateRecord, TrajectoryTrace};

pub const DEFAULT_MAX_TOKENS: usize = 128;

#[derive(Debug, Error)]
pub enum TraceError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("scoring failed at state {t}: {source}")]
    Scoring {
        t: usize,
        #[source]
        source: ProjectionError,
    },
    #[error("invalid options: {0}")]
    Options(String),
    #[error(transparent)]
    Condition(#[from] ConditionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    Eos,
    OnsetLineComplete,
    MaxTokens,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub stop: StopReason,
}

/// Optional early stop once the parser is defined and its line has ended.
pub struct OnsetStop<'a, T: Tokenizer + ?Sized> {
    pub parser: &'a OnsetParser,
    pub tokenizer: &'a T,
}

/// Deterministic greedy decoding from `prompt`. Ties go to the lowest id; the
/// eos token (if any) ends generation and is not included.
pub fn greedy_generate<B, T>(
    backend: &B,
    prompt: &[TokenId],
    max_tokens: usize,
    onset_stop: Option<&OnsetStop<'_, T>>,
) -> Result<Generation, TraceError>
where
    B: ModelBackend + ?Sized,
    T: Tokenizer + ?Sized,
{
    if max_tokens == 0 {
        return Err(TraceError::Options("max_tokens must be at least 1".into()));
    }
    let eos = backend.eos_token();
    let mut state = backend.initial_state(prompt)?;
    let mut tokens = Vec::new();
    let mut onset_seen = false;
    while tokens.len() < max_tokens {
        let lp = backend.next_token_logprobs(&state)?;
        let tok = argmax_lowest(&lp).ok_or_else(|| BackendError::Failure("empty distribution".into()))?;
        if Some(tok) == eos {
            return Ok(Generation {
                tokens,
                stop: StopReason::Eos,
            });
        }
        tokens.push(tok);
        if let Some(stop) = onset_stop {
            let text = stop.tokenizer.decode(&tokens);
            if !onset_seen && stop.parser.parse(&text).is_some() {
                onset_seen = true;
            }
            if onset_seen && text.ends_with('\n') {
                return Ok(Generation {
                    tokens,
                    stop: StopReason::OnsetLineComplete,
                });
            }
        }
        state = backend.advance(&state, tok)?;
    }
    Ok(Generation {
        tokens,
        stop: StopReason::MaxTokens,
    })
}

/// Restarts greedy decoding from state `t` of a greedy response and checks
/// that it reproduces `response[t..]` token for token.
pub fn verify_greedy_tautology<B: ModelBackend + ?Sized>(
    backend: &B,
    prompt: &[TokenId],
    response: &[TokenId],
    t: usize,
) -> Result<bool, BackendError> {
    if t >= response.len() {
        return Ok(false);
    }
    let mut state = backend.initial_state(prompt)?;
    for &tok in &response[..t] {
        state = backend.advance(&state, tok)?;
    }
    for (pos, &want) in response.iter().enumerate().skip(t) {
        let lp = backend.next_token_logprobs(&state)?;
        let got = argmax_lowest(&lp);
        if got != Some(want) {
            log::warn!("greedy restart from t={t} diverged at position {pos}: got {got:?}, want {want}");
            return Ok(false);
        }
        state = backend.advance(&state, want)?;
    }
    Ok(true)
}

#[derive(Debug, Clone)]
pub struct TraceOptions {
    pub id: String,
    pub condition: String,
    pub prompt_text: String,
    pub ground_truth: Option<Verdict>,
    pub max_tokens: usize,
    /// Stop once the onset line is complete instead of waiting for eos.
    pub stop_at_onset_line: bool,
    /// Keep per-verbalizer continuation scores on every state.
    pub keep_verbalizer_scores: bool,
    pub seed: Option<u64>,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self {
            id: "trace-0".into(),
            condition: "default".into(),
            prompt_text: String::new(),
            ground_truth: None,
            max_tokens: DEFAULT_MAX_TOKENS,
            stop_at_onset_line: false,
            keep_verbalizer_scores: false,
            seed: None,
        }
    }
}

/// Generates a response, locates the onset and scores every pre-onset state.
pub fn build_trace<B>(
    backend: &B,
    prompt: &[TokenId],
    scheme: &AnswerScheme,
    bare_scheme: Option<&AnswerScheme>,
    parser: &OnsetParser,
    opts: &TraceOptions,
) -> Result<TrajectoryTrace, TraceError>
where
    B: ModelBackend + Tokenizer,
{
    let stop = OnsetStop {
        parser,
        tokenizer: backend,
    };
    let generation = greedy_generate(
        backend,
        prompt,
        opts.max_tokens,
        opts.stop_at_onset_line.then_some(&stop),
    )?;
    let tokens = generation.tokens;

    let mut trace = TrajectoryTrace::new(&opts.id, &opts.condition);
    trace.prompt_text = opts.prompt_text.clone();
    trace.prompt_tokens = prompt.to_vec();
    trace.token_texts = tokens.iter().map(|&t| backend.token_text(t)).collect();
    trace.ground_truth = opts.ground_truth;
    trace.meta.backend = backend.name().to_string();
    trace.meta.scheme = scheme.describe();
    trace.meta.parser = parser.name().to_string();
    trace.meta.seed = opts.seed;

    let onset = find_onset(parser, &tokens, backend);
    trace.tokens = tokens;
    let Some(onset) = onset else {
        log::debug!("trace {} unparsed after {} tokens", opts.id, trace.tokens.len());
        return Ok(trace);
    };
    trace.onset = Some(onset.index);
    trace.final_answer = parser.parse(&backend.decode(&trace.tokens));
    trace.parsed = trace.final_answer.is_some();

    let mut state = backend.initial_state(prompt)?;
    for t in 0..onset.index {
        let scored = project(backend, &state, scheme).map_err(|source| TraceError::Scoring { t, source })?;
        let mut rec = StateRecord::new(t, scored.delta);
        if let Some(bare) = bare_scheme {
            let b = project(backend, &state, bare).map_err(|source| TraceError::Scoring { t, source })?;
            rec.delta_bare = Some(b.delta);
        }
        if opts.keep_verbalizer_scores {
            rec.verbalizer_scores = Some(
                [Verdict::Yes, Verdict::No]
                    .iter()
                    .map(|v| v.as_str().to_string())
                    .zip(scored.verbalizer_scores)
                    .collect(),
            );
        }
        rec.features = backend.features(&state);
        rec.latents = backend.latents(&state);
        trace.states.push(rec);
        state = backend.advance(&state, trace.tokens[t])?;
    }
    Ok(trace)
}

/// Runs independent trace jobs in parallel; one failing job does not abort
/// the others. Output order matches input order.
pub fn run_batch<J, F>(jobs: Vec<J>, build: F) -> Vec<Result<TrajectoryTrace, TraceError>>
where
    J: Send,
    F: Fn(J) -> Result<TrajectoryTrace, TraceError> + Sync + Send,
{
    jobs.into_par_iter().map(build).collect()
}

/// Options for a batch of toy-template traces.
#[derive(Debug, Clone)]
pub struct ToyBatch {
    pub n: usize,
    pub seed: u64,
    pub style: ToyStyle,
    /// Also score the bare verbalizers into `delta_bare`.
    pub bare: bool,
    pub keep_verbalizer_scores: bool,
    pub stop_at_onset_line: bool,
}

/// Generates `batch.n` traces of `spec` from scripted template backends.
/// Sample `i` uses a seed derived from `batch.seed` and `i`, so batches are
/// deterministic and prefix-stable.
pub fn toy_condition_batch(spec: &ConditionSpec, batch: &ToyBatch) -> Result<Vec<TrajectoryTrace>, TraceError> {
    let parser = spec.parser()?;
    let jobs: Vec<usize> = (0..batch.n).collect();
    run_batch(jobs, |i| {
        let seed = batch.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(i as u64);
        let sample = spec.toy_sample(seed, &batch.style)?;
        let b = &sample.backend;
        let scheme = spec.scheme(b, Variant::Contextual)?;
        let bare = batch.bare.then(|| spec.scheme(b, Variant::Bare)).transpose()?;
        let opts = TraceOptions {
            id: format!("{}-{i:04}", spec.name),
            condition: spec.name.clone(),
            prompt_text: sample.prompt.clone(),
            ground_truth: Some(sample.truth),
            max_tokens: b.path().len() + 1,
            stop_at_onset_line: batch.stop_at_onset_line,
            keep_verbalizer_scores: batch.keep_verbalizer_scores,
            seed: Some(seed),
        };
        build_trace(b, &sample.prompt_tokens, &scheme, bare.as_ref(), &parser, &opts)
    })
    .into_iter()
    .collect()
}
