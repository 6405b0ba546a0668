//! Model backend abstraction and a small piece-based vocabulary.
//!
//! A backend owns its state representation. The core only ever asks for
//! next-token log-probabilities, advances states by one token, and reads
//! optional per-state summaries (hidden features, synthetic latents).

use std::collections::BTreeMap;

use thiserror::Error;

use crate::trace::Latents;

pub type TokenId = u32;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("token id {token} outside vocabulary of size {vocab_size}")]
    UnknownToken { token: TokenId, vocab_size: usize },
    #[error("cannot tokenize {0:?}")]
    Untokenizable(String),
    #[error("backend failure: {0}")]
    Failure(String),
}

/// Autoregressive model interface.
///
/// `next_token_logprobs` must return a full log-probability vector over the
/// vocabulary whose exponentials sum to one. `advance` must be deterministic.
pub trait ModelBackend {
    type State: Clone;

    fn name(&self) -> &str;

    fn vocab_size(&self) -> usize;

    fn initial_state(&self, prompt: &[TokenId]) -> Result<Self::State, BackendError>;

    fn next_token_logprobs(&self, state: &Self::State) -> Result<Vec<f64>, BackendError>;

    fn advance(&self, state: &Self::State, token: TokenId) -> Result<Self::State, BackendError>;

    /// Per-token log-probabilities of `tokens` from `state` in one pass.
    ///
    /// Backends with a batched teacher-forced path override this; the default
    /// steps through `advance`.
    fn teacher_forced_logprobs(
        &self,
        state: &Self::State,
        tokens: &[TokenId],
    ) -> Result<Vec<f64>, BackendError> {
        let mut out = Vec::with_capacity(tokens.len());
        let mut cur = state.clone();
        for (i, &tok) in tokens.iter().enumerate() {
            let lp = self.next_token_logprobs(&cur)?;
            let v = *lp.get(tok as usize).ok_or(BackendError::UnknownToken {
                token: tok,
                vocab_size: lp.len(),
            })?;
            out.push(v);
            if i + 1 < tokens.len() {
                cur = self.advance(&cur, tok)?;
            }
        }
        Ok(out)
    }

    /// Hidden summaries at `state`, keyed by summary name.
    fn features(&self, _state: &Self::State) -> Option<BTreeMap<String, Vec<f64>>> {
        None
    }

    /// Ground-truth latents at `state` (synthetic backends only).
    fn latents(&self, _state: &Self::State) -> Option<Latents> {
        None
    }

    /// End-of-sequence token, if the backend has one.
    fn eos_token(&self) -> Option<TokenId> {
        None
    }
}

pub trait Tokenizer {
    fn encode(&self, text: &str) -> Result<Vec<TokenId>, BackendError>;

    fn decode(&self, tokens: &[TokenId]) -> String;

    fn token_text(&self, token: TokenId) -> String {
        self.decode(&[token])
    }
}

/// Piece vocabulary with greedy longest-match encoding.
///
/// Token 0 is the end-of-sequence marker and decodes to the empty string.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    pieces: Vec<String>,
    index: BTreeMap<String, TokenId>,
    max_piece_len: usize,
}

pub const EOS_PIECE: &str = "<eos>";

impl Vocabulary {
    pub fn new<I, S>(pieces: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all = vec![EOS_PIECE.to_string()];
        let mut index = BTreeMap::new();
        index.insert(EOS_PIECE.to_string(), 0);
        for p in pieces {
            let p = p.into();
            if p.is_empty() || index.contains_key(&p) {
                continue;
            }
            index.insert(p.clone(), all.len() as TokenId);
            all.push(p);
        }
        let max_piece_len = all.iter().skip(1).map(|p| p.len()).max().unwrap_or(1);
        Self {
            pieces: all,
            index,
            max_piece_len,
        }
    }

    /// Printable ASCII plus newline, followed by `extra` multi-character pieces.
    pub fn with_ascii<I, S>(extra: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut pieces: Vec<String> = vec!["\n".to_string()];
        pieces.extend((0x20u8..0x7f).map(|b| (b as char).to_string()));
        pieces.extend(extra.into_iter().map(Into::into));
        Self::new(pieces)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn eos(&self) -> TokenId {
        0
    }

    pub fn id(&self, piece: &str) -> Option<TokenId> {
        self.index.get(piece).copied()
    }

    pub fn piece(&self, token: TokenId) -> Option<&str> {
        self.pieces.get(token as usize).map(String::as_str)
    }
}

impl Tokenizer for Vocabulary {
    fn encode(&self, text: &str) -> Result<Vec<TokenId>, BackendError> {
        let mut out = Vec::new();
        let mut rest = text;
        while !rest.is_empty() {
            let mut found = None;
            let upper = self.max_piece_len.min(rest.len());
            for len in (1..=upper).rev() {
                if !rest.is_char_boundary(len) {
                    continue;
                }
                if let Some(&id) = self.index.get(&rest[..len]) {
                    if id != 0 {
                        found = Some((id, len));
                        break;
                    }
                }
            }
            let (id, len) = found.ok_or_else(|| BackendError::Untokenizable(rest.to_string()))?;
            out.push(id);
            rest = &rest[len..];
        }
        Ok(out)
    }

    fn decode(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .filter(|&&t| t != 0)
            .filter_map(|&t| self.piece(t))
            .collect()
    }
}

/// Argmax with ties broken toward the lowest token id.
pub fn argmax_lowest(logprobs: &[f64]) -> Option<TokenId> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in logprobs.iter().enumerate() {
        match best {
            Some((_, b)) if v <= b => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i as TokenId)
}
