//! Deterministic toy backends with known answers.
//!
//! * [`UniformBackend`]: every token equally likely.
//! * [`TableBackend`]: explicit per-history probability tables.
//! * [`HashedBackend`]: pseudo-random but fully deterministic distributions
//!   keyed by a rolling hash of the history.
//! * [`ScriptedPathBackend`]: a greedy path through a vocabulary with a
//!   designed commitment code at every state.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backend::{BackendError, ModelBackend, TokenId, Tokenizer, Vocabulary};
use crate::trace::Latents;

fn check_token(token: TokenId, vocab_size: usize) -> Result<(), BackendError> {
    if (token as usize) < vocab_size {
        Ok(())
    } else {
        Err(BackendError::UnknownToken { token, vocab_size })
    }
}

fn log_normalize(weights: &[f64]) -> Vec<f64> {
    let total: f64 = weights.iter().sum();
    weights.iter().map(|w| (w / total).ln()).collect()
}

#[derive(Debug, Clone)]
pub struct UniformBackend {
    vocab_size: usize,
}

impl UniformBackend {
    pub fn new(vocab_size: usize) -> Self {
        assert!(vocab_size > 0);
        Self { vocab_size }
    }
}

impl ModelBackend for UniformBackend {
    type State = usize;

    fn name(&self) -> &str {
        "uniform"
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn initial_state(&self, prompt: &[TokenId]) -> Result<usize, BackendError> {
        for &t in prompt {
            check_token(t, self.vocab_size)?;
        }
        Ok(prompt.len())
    }

    fn next_token_logprobs(&self, _state: &usize) -> Result<Vec<f64>, BackendError> {
        Ok(vec![-(self.vocab_size as f64).ln(); self.vocab_size])
    }

    fn advance(&self, state: &usize, token: TokenId) -> Result<usize, BackendError> {
        check_token(token, self.vocab_size)?;
        Ok(state + 1)
    }
}

/// Backend driven by explicit probability tables keyed on the full token
/// history (prompt followed by continuation). Unlisted histories are uniform.
#[derive(Debug, Clone)]
pub struct TableBackend {
    vocab_size: usize,
    table: HashMap<Vec<TokenId>, Vec<f64>>,
    eos: Option<TokenId>,
}

impl TableBackend {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            table: HashMap::new(),
            eos: None,
        }
    }

    pub fn with_eos(mut self, eos: TokenId) -> Self {
        self.eos = Some(eos);
        self
    }

    /// Sets the next-token distribution after `history` from unnormalized weights.
    pub fn set(&mut self, history: &[TokenId], weights: &[f64]) {
        assert_eq!(weights.len(), self.vocab_size);
        self.table.insert(history.to_vec(), log_normalize(weights));
    }

    /// Scripts a path whose greedy continuation from `history` is `path`
    /// followed by eos (when set).
    pub fn script_path(&mut self, history: &[TokenId], path: &[TokenId], mass: f64) {
        let mut h = history.to_vec();
        let mut steps: Vec<TokenId> = path.to_vec();
        if let Some(e) = self.eos {
            steps.push(e);
        }
        for &tok in &steps {
            let rest = (1.0 - mass) / (self.vocab_size - 1) as f64;
            let mut w = vec![rest; self.vocab_size];
            w[tok as usize] = mass;
            self.set(&h, &w);
            h.push(tok);
        }
    }
}

impl ModelBackend for TableBackend {
    type State = Vec<TokenId>;

    fn name(&self) -> &str {
        "table"
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn initial_state(&self, prompt: &[TokenId]) -> Result<Self::State, BackendError> {
        for &t in prompt {
            check_token(t, self.vocab_size)?;
        }
        Ok(prompt.to_vec())
    }

    fn next_token_logprobs(&self, state: &Self::State) -> Result<Vec<f64>, BackendError> {
        Ok(self
            .table
            .get(state)
            .cloned()
            .unwrap_or_else(|| vec![-(self.vocab_size as f64).ln(); self.vocab_size]))
    }

    fn advance(&self, state: &Self::State, token: TokenId) -> Result<Self::State, BackendError> {
        check_token(token, self.vocab_size)?;
        let mut next = state.clone();
        next.push(token);
        Ok(next)
    }

    fn eos_token(&self) -> Option<TokenId> {
        self.eos
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Pseudo-random deterministic backend. The state is a rolling hash of the
/// history, so equal histories give bitwise-equal distributions.
#[derive(Debug, Clone)]
pub struct HashedBackend {
    vocab_size: usize,
    seed: u64,
    scale: f64,
}

impl HashedBackend {
    /// `scale` is the half-width of the uniform logit range.
    pub fn new(vocab_size: usize, seed: u64, scale: f64) -> Self {
        assert!(vocab_size > 1);
        Self {
            vocab_size,
            seed,
            scale,
        }
    }
}

impl ModelBackend for HashedBackend {
    type State = u64;

    fn name(&self) -> &str {
        "hashed"
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn initial_state(&self, prompt: &[TokenId]) -> Result<u64, BackendError> {
        let mut h = splitmix64(self.seed);
        for &t in prompt {
            h = self.advance(&h, t)?;
        }
        Ok(h)
    }

    fn next_token_logprobs(&self, state: &u64) -> Result<Vec<f64>, BackendError> {
        let mut rng = ChaCha8Rng::seed_from_u64(*state);
        let logits: Vec<f64> = (0..self.vocab_size)
            .map(|_| rng.random_range(-self.scale..=self.scale))
            .collect();
        let z = crate::projection::log_sum_exp(&logits);
        Ok(logits.into_iter().map(|l| l - z).collect())
    }

    fn advance(&self, state: &u64, token: TokenId) -> Result<u64, BackendError> {
        check_token(token, self.vocab_size)?;
        Ok(splitmix64(state ^ splitmix64(token as u64 + 1)))
    }
}

/// State of a [`ScriptedPathBackend`]: position along the scripted path plus
/// any tokens appended after leaving it.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct PathState {
    pub pos: usize,
    pub off: Vec<TokenId>,
}

/// Per-position payload of a scripted path.
#[derive(Debug, Clone, Default)]
pub struct PathAnnotations {
    /// Designed contextual δ at each state `0..=path.len()`.
    pub preference: Vec<f64>,
    /// Designed bare-label δ at each state.
    pub bare_preference: Vec<f64>,
    pub features: Option<Vec<BTreeMap<String, Vec<f64>>>>,
    pub latents: Option<Vec<Latents>>,
}

/// Greedy path backend with an exactly designed commitment code.
///
/// On the path, the scripted token receives `on_path_mass`; the rest of the
/// mass goes half to the two answer tokens (split by the bare preference) and
/// half uniformly elsewhere. After leaving the path with exactly the answer
/// prefix tokens, the answer tokens receive `(1 - eps)` split by the
/// contextual preference of the anchor state, so contextual δ at state `t`
/// equals `preference[t]`. Any other off-path history is uniform.
#[derive(Debug, Clone)]
pub struct ScriptedPathBackend {
    name: String,
    vocab: Arc<Vocabulary>,
    path: Vec<TokenId>,
    notes: PathAnnotations,
    answer_prefix: Vec<TokenId>,
    yes: TokenId,
    no: TokenId,
    on_path_mass: f64,
    off_path_eps: f64,
}

impl ScriptedPathBackend {
    pub fn new(
        name: impl Into<String>,
        vocab: Arc<Vocabulary>,
        path: Vec<TokenId>,
        notes: PathAnnotations,
        answer_prefix: Vec<TokenId>,
        yes: TokenId,
        no: TokenId,
    ) -> Result<Self, BackendError> {
        let n = vocab.len();
        for &t in path.iter().chain(&answer_prefix).chain([&yes, &no]) {
            check_token(t, n)?;
        }
        if notes.preference.len() != path.len() + 1 || notes.bare_preference.len() != path.len() + 1 {
            return Err(BackendError::Failure(format!(
                "preference series must have {} entries",
                path.len() + 1
            )));
        }
        if answer_prefix.is_empty() || yes == no || n < 6 {
            return Err(BackendError::Failure("degenerate answer layout".into()));
        }
        Ok(Self {
            name: name.into(),
            vocab,
            path,
            notes,
            answer_prefix,
            yes,
            no,
            on_path_mass: 0.9,
            off_path_eps: 1e-3,
        })
    }

    pub fn path(&self) -> &[TokenId] {
        &self.path
    }

    pub fn vocabulary(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn preference(&self) -> &[f64] {
        &self.notes.preference
    }

    fn answer_slot(&self, pref: f64) -> Vec<f64> {
        let n = self.vocab.len();
        // log sigma(x) = -softplus(-x)
        let softplus = |x: f64| if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
        let keep = (1.0 - self.off_path_eps).ln();
        let other = (self.off_path_eps / (n - 2) as f64).ln();
        let mut lp = vec![other; n];
        lp[self.yes as usize] = keep - softplus(-pref);
        lp[self.no as usize] = keep - softplus(pref);
        lp
    }

    fn on_path(&self, pos: usize) -> Vec<f64> {
        let n = self.vocab.len();
        let scripted = self.path.get(pos).copied().unwrap_or(self.vocab.eos());
        let rest = 1.0 - self.on_path_mass;
        let s = crate::projection::sigmoid(self.notes.bare_preference[pos]);
        let mut w = vec![0.5 * rest / (n - 3) as f64; n];
        w[self.yes as usize] = 0.5 * rest * s;
        w[self.no as usize] = 0.5 * rest * (1.0 - s);
        w[scripted as usize] = self.on_path_mass;
        log_normalize(&w)
    }
}

impl ModelBackend for ScriptedPathBackend {
    type State = PathState;

    fn name(&self) -> &str {
        &self.name
    }

    fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    fn initial_state(&self, prompt: &[TokenId]) -> Result<PathState, BackendError> {
        for &t in prompt {
            check_token(t, self.vocab.len())?;
        }
        Ok(PathState {
            pos: 0,
            off: Vec::new(),
        })
    }

    fn next_token_logprobs(&self, state: &PathState) -> Result<Vec<f64>, BackendError> {
        if state.off.is_empty() {
            return Ok(self.on_path(state.pos.min(self.path.len())));
        }
        if state.off == self.answer_prefix {
            return Ok(self.answer_slot(self.notes.preference[state.pos]));
        }
        let n = self.vocab.len();
        Ok(vec![-(n as f64).ln(); n])
    }

    fn advance(&self, state: &PathState, token: TokenId) -> Result<PathState, BackendError> {
        check_token(token, self.vocab.len())?;
        let mut next = state.clone();
        if next.off.is_empty() && self.path.get(next.pos) == Some(&token) {
            next.pos += 1;
        } else {
            next.off.push(token);
        }
        Ok(next)
    }

    fn features(&self, state: &PathState) -> Option<BTreeMap<String, Vec<f64>>> {
        if !state.off.is_empty() {
            return None;
        }
        self.notes.features.as_ref()?.get(state.pos).cloned()
    }

    fn latents(&self, state: &PathState) -> Option<Latents> {
        if !state.off.is_empty() {
            return None;
        }
        self.notes.latents.as_ref()?.get(state.pos).copied()
    }

    fn eos_token(&self) -> Option<TokenId> {
        Some(self.vocab.eos())
    }
}

impl Tokenizer for ScriptedPathBackend {
    fn encode(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        self.vocab.encode(text)
    }

    fn decode(&self, tokens: &[TokenId]) -> String {
        self.vocab.decode(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sums_to_one(lp: &[f64]) -> bool {
        (lp.iter().map(|x| x.exp()).sum::<f64>() - 1.0).abs() < 1e-9
    }

    #[test]
    fn distributions_are_normalized() {
        let h = HashedBackend::new(50, 3, 4.0);
        let mut s = h.initial_state(&[1, 2]).unwrap();
        for t in 0..20 {
            assert!(sums_to_one(&h.next_token_logprobs(&s).unwrap()));
            s = h.advance(&s, t).unwrap();
        }
        assert!(sums_to_one(&UniformBackend::new(9).next_token_logprobs(&0).unwrap()));
    }

    #[test]
    fn hashed_is_history_deterministic() {
        let h = HashedBackend::new(10, 5, 2.0);
        let a = h.advance(&h.initial_state(&[1]).unwrap(), 4).unwrap();
        let b = h.advance(&h.initial_state(&[1]).unwrap(), 4).unwrap();
        assert_eq!(h.next_token_logprobs(&a).unwrap(), h.next_token_logprobs(&b).unwrap());
        let c = h.advance(&h.initial_state(&[1]).unwrap(), 5).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn unknown_tokens_are_rejected() {
        let h = HashedBackend::new(10, 5, 2.0);
        assert!(h.advance(&0, 10).is_err());
        assert!(TableBackend::new(3).initial_state(&[3]).is_err());
    }

    #[test]
    fn scripted_path_contextual_delta_is_exact() {
        let vocab = Arc::new(Vocabulary::with_ascii(["Verdict:", " yes", " no"]));
        let path = vocab.encode("ab\n").unwrap();
        let pref = vec![2.5, -1.25, 7.0, 0.0];
        let notes = PathAnnotations {
            preference: pref.clone(),
            bare_preference: vec![0.0; 4],
            ..Default::default()
        };
        let prefix = vec![vocab.id("Verdict:").unwrap()];
        let (y, n) = (vocab.id(" yes").unwrap(), vocab.id(" no").unwrap());
        let b = ScriptedPathBackend::new("p", vocab.clone(), path.clone(), notes, prefix.clone(), y, n).unwrap();
        let mut s = b.initial_state(&[]).unwrap();
        for (t, want) in pref.iter().enumerate() {
            let mut yes = prefix.clone();
            yes.push(y);
            let mut no = prefix.clone();
            no.push(n);
            let d = crate::projection::score_continuation(&b, &s, &yes).unwrap()
                - crate::projection::score_continuation(&b, &s, &no).unwrap();
            assert!((d - want).abs() < 1e-12, "t={t} d={d}");
            assert!(sums_to_one(&b.next_token_logprobs(&s).unwrap()));
            if t < path.len() {
                s = b.advance(&s, path[t]).unwrap();
            }
        }
    }
}
