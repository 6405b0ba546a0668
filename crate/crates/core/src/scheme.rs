//! Finite answer sets and their verbalizers.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, TokenId, Tokenizer};

/// Binary answer label. `Yes` is the first listed (yes-like) answer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Yes,
    No,
}

impl Verdict {
    /// Sign rule: `delta >= 0` maps to the yes-like answer.
    pub fn from_delta(delta: f64) -> Self {
        if delta >= 0.0 {
            Verdict::Yes
        } else {
            Verdict::No
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Verdict::Yes => 1.0,
            Verdict::No => -1.0,
        }
    }

    pub fn flip(self) -> Self {
        match self {
            Verdict::Yes => Verdict::No,
            Verdict::No => Verdict::Yes,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Yes => "yes",
            Verdict::No => "no",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "yes" => Some(Verdict::Yes),
            "no" => Some(Verdict::No),
            _ => None,
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Contextual,
    Bare,
}

#[derive(Debug, Error)]
pub enum SchemeError {
    #[error("answer {0:?} has no verbalizers")]
    EmptyVerbalizers(String),
    #[error("empty verbalizer token sequence for answer {0:?}")]
    EmptySequence(String),
    #[error("verbalizer {seq:?} is shared by answers {first:?} and {second:?}")]
    Overlap {
        seq: Vec<TokenId>,
        first: String,
        second: String,
    },
    #[error("binary scheme needs exactly two answers, got {0}")]
    NotBinary(usize),
    #[error("verbalizer list length {verbalizers} does not match answer count {answers}")]
    Shape { answers: usize, verbalizers: usize },
    #[error(transparent)]
    Tokenize(#[from] BackendError),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Ordered answer set with one nonempty verbalizer set per answer.
#[derive(Debug, Clone, PartialEq)]
pub struct AnswerScheme {
    answers: Vec<String>,
    verbalizers: Vec<Vec<Vec<TokenId>>>,
    variant: Variant,
}

impl AnswerScheme {
    pub fn new(
        answers: Vec<String>,
        verbalizers: Vec<Vec<Vec<TokenId>>>,
        variant: Variant,
    ) -> Result<Self, SchemeError> {
        if answers.len() != verbalizers.len() {
            return Err(SchemeError::Shape {
                answers: answers.len(),
                verbalizers: verbalizers.len(),
            });
        }
        if answers.len() != 2 {
            return Err(SchemeError::NotBinary(answers.len()));
        }
        let mut seen: Vec<(Vec<TokenId>, usize)> = Vec::new();
        for (i, set) in verbalizers.iter().enumerate() {
            if set.is_empty() {
                return Err(SchemeError::EmptyVerbalizers(answers[i].clone()));
            }
            for seq in set {
                if seq.is_empty() {
                    return Err(SchemeError::EmptySequence(answers[i].clone()));
                }
                if let Some((_, j)) = seen.iter().find(|(s, j)| s == seq && *j != i) {
                    return Err(SchemeError::Overlap {
                        seq: seq.clone(),
                        first: answers[*j].clone(),
                        second: answers[i].clone(),
                    });
                }
                seen.push((seq.clone(), i));
            }
        }
        Ok(Self {
            answers,
            verbalizers,
            variant,
        })
    }

    /// Binary scheme from yes-like and no-like verbalizer texts.
    pub fn binary_from_texts<T: Tokenizer + ?Sized>(
        tokenizer: &T,
        yes: &[&str],
        no: &[&str],
        variant: Variant,
    ) -> Result<Self, SchemeError> {
        let enc = |xs: &[&str]| -> Result<Vec<Vec<TokenId>>, SchemeError> {
            xs.iter()
                .map(|t| tokenizer.encode(t).map_err(SchemeError::from))
                .collect()
        };
        Self::new(
            vec!["yes".into(), "no".into()],
            vec![enc(yes)?, enc(no)?],
            variant,
        )
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn verbalizers(&self, answer: usize) -> &[Vec<TokenId>] {
        &self.verbalizers[answer]
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn verbalizer_sets(&self) -> &[Vec<Vec<TokenId>>] {
        &self.verbalizers
    }

    /// Short human-readable identifier used in trace metadata.
    pub fn describe(&self) -> String {
        let v = match self.variant {
            Variant::Contextual => "contextual",
            Variant::Bare => "bare",
        };
        format!("{}:{}", v, self.answers.join("/"))
    }
}

/// A verbalizer given either as token ids or as text to tokenize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum VerbalizerSpec {
    Ids(Vec<TokenId>),
    Text(String),
}

/// Serialized scheme configuration.
///
/// ```toml
/// answers = ["yes", "no"]
/// variant = "contextual"
/// suffix = ""            # appended to text verbalizers
/// [verbalizers]
/// yes = ["Verdict: yes"]
/// no = [[3, 5]]
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeConfig {
    pub answers: Vec<String>,
    pub verbalizers: std::collections::BTreeMap<String, Vec<VerbalizerSpec>>,
    pub variant: Variant,
    #[serde(default)]
    pub suffix: Option<String>,
}

impl SchemeConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, SchemeError> {
        toml::from_str(s).map_err(|e| SchemeError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, SchemeError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn resolve<T: Tokenizer + ?Sized>(&self, tokenizer: &T) -> Result<AnswerScheme, SchemeError> {
        let suffix = self.suffix.clone().unwrap_or_default();
        let keys: BTreeSet<&String> = self.verbalizers.keys().collect();
        let mut sets = Vec::with_capacity(self.answers.len());
        for a in &self.answers {
            let specs = self
                .verbalizers
                .get(a)
                .ok_or_else(|| SchemeError::EmptyVerbalizers(a.clone()))?;
            let mut set = Vec::with_capacity(specs.len());
            for spec in specs {
                set.push(match spec {
                    VerbalizerSpec::Ids(ids) => ids.clone(),
                    VerbalizerSpec::Text(t) => tokenizer.encode(&format!("{t}{suffix}"))?,
                });
            }
            sets.push(set);
        }
        if keys.len() != self.answers.len() {
            return Err(SchemeError::Config(format!(
                "verbalizer keys {:?} do not match answers {:?}",
                keys, self.answers
            )));
        }
        AnswerScheme::new(self.answers.clone(), sets, self.variant)
    }
}
