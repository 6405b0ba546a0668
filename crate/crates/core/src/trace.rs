//! Trajectory trace records as carried on the wire.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::backend::TokenId;
use crate::scheme::Verdict;

pub const SCHEMA_VERSION: u32 = 1;

/// Ground-truth latent coordinates of a synthetic state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Latents {
    pub commit: f64,
    pub cursor: f64,
}

/// One pre-onset state. `t` counts emitted response tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateRecord {
    pub t: usize,
    pub delta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_bare: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<BTreeMap<String, Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latents: Option<Latents>,
    /// Per-verbalizer continuation scores keyed by verdict label (`yes`, `no`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verbalizer_scores: Option<BTreeMap<String, Vec<f64>>>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl StateRecord {
    pub fn new(t: usize, delta: f64) -> Self {
        Self {
            t,
            delta,
            delta_bare: None,
            features: None,
            latents: None,
            verbalizer_scores: None,
            extra: Map::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TraceMeta {
    #[serde(default)]
    pub backend: String,
    #[serde(default)]
    pub scheme: String,
    #[serde(default)]
    pub parser: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub created: Option<String>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

/// One generated response with its parser onset and pre-onset δ series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryTrace {
    pub schema_version: u32,
    pub id: String,
    pub condition: String,
    #[serde(default)]
    pub prompt_text: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub prompt_tokens: Vec<TokenId>,
    pub tokens: Vec<TokenId>,
    pub token_texts: Vec<String>,
    pub onset: Option<usize>,
    pub final_answer: Option<Verdict>,
    pub parsed: bool,
    #[serde(default)]
    pub ground_truth: Option<Verdict>,
    pub states: Vec<StateRecord>,
    #[serde(default)]
    pub meta: TraceMeta,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl TrajectoryTrace {
    pub fn new(id: impl Into<String>, condition: impl Into<String>) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            id: id.into(),
            condition: condition.into(),
            prompt_text: String::new(),
            prompt_tokens: Vec::new(),
            tokens: Vec::new(),
            token_texts: Vec::new(),
            onset: None,
            final_answer: None,
            parsed: false,
            ground_truth: None,
            states: Vec::new(),
            meta: TraceMeta::default(),
            extra: Map::new(),
        }
    }

    /// Onset and final answer when both are defined.
    pub fn parsed_view(&self) -> Option<(usize, Verdict)> {
        match (self.onset, self.final_answer) {
            (Some(o), Some(a)) => Some((o, a)),
            _ => None,
        }
    }

    pub fn is_parsed(&self) -> bool {
        self.parsed_view().is_some()
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.states.iter().map(|s| s.delta).collect()
    }

    /// `(t, δ_t)` pairs in state order.
    pub fn delta_points(&self) -> Vec<(usize, f64)> {
        self.states.iter().map(|s| (s.t, s.delta)).collect()
    }

    /// Number of completed newlines in the first `t` response tokens.
    pub fn line_index(&self, t: usize) -> usize {
        self.token_texts
            .iter()
            .take(t)
            .map(|s| s.matches('\n').count())
            .sum()
    }

    pub fn response_text(&self) -> String {
        self.token_texts.concat()
    }
}
