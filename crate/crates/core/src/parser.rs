//! Line-anchored onset parsers.
//!
//! A parser is evaluated on detokenized response prefixes. Every complete
//! line and the trailing partial line are matched against the pattern; the
//! first matching line decides the answer.

use std::collections::BTreeMap;
use std::path::Path;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{TokenId, Tokenizer};
use crate::scheme::Verdict;

#[derive(Debug, Error)]
pub enum ParserError {
    #[error("invalid pattern {pattern:?}: {source}")]
    Pattern {
        pattern: String,
        #[source]
        source: regex::Error,
    },
    #[error("pattern {0:?} has no capture group")]
    NoCapture(String),
    #[error("answer map value {0:?} is not yes/no")]
    BadAnswer(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strictness {
    Strict,
    Relaxed,
}

/// Optional line-number label accepted by relaxed parsers ("line5: ...").
const LINE_LABEL: &str = r"(?:line\s*\d+\s*[:.)]\s*)?";

#[derive(Debug, Clone)]
pub struct OnsetParser {
    name: String,
    pattern: String,
    regex: Regex,
    answers: BTreeMap<String, Verdict>,
    strictness: Strictness,
}

/// Result of parsing one prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Onset {
    /// Number of response tokens at which the parser first becomes defined.
    pub index: usize,
    pub answer: Verdict,
}

impl OnsetParser {
    /// `pattern` must be line-anchored and capture the answer word in group 1.
    pub fn new(
        name: impl Into<String>,
        pattern: &str,
        answers: BTreeMap<String, Verdict>,
        strictness: Strictness,
    ) -> Result<Self, ParserError> {
        let effective = match strictness {
            Strictness::Strict => pattern.to_string(),
            Strictness::Relaxed => relax(pattern),
        };
        let regex = Regex::new(&effective).map_err(|source| ParserError::Pattern {
            pattern: effective.clone(),
            source,
        })?;
        if regex.captures_len() < 2 {
            return Err(ParserError::NoCapture(pattern.to_string()));
        }
        Ok(Self {
            name: name.into(),
            pattern: pattern.to_string(),
            regex,
            answers,
            strictness,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn pattern(&self) -> &str {
        &self.pattern
    }

    pub fn strictness(&self) -> Strictness {
        self.strictness
    }

    /// Same pattern and answers with a different strictness.
    pub fn with_strictness(&self, strictness: Strictness) -> Self {
        let suffix = match strictness {
            Strictness::Strict => "",
            Strictness::Relaxed => "-relaxed",
        };
        let base = self.name.trim_end_matches("-relaxed");
        Self::new(
            format!("{base}{suffix}"),
            &self.pattern,
            self.answers.clone(),
            strictness,
        )
        .expect("pattern already validated")
    }

    /// Answer for a text prefix, if any line matches.
    pub fn parse(&self, text: &str) -> Option<Verdict> {
        text.split('\n').find_map(|line| {
            let caps = self.regex.captures(line)?;
            self.answers.get(caps.get(1)?.as_str()).copied()
        })
    }

    /// Parser `name` in the standard parity/comparison format.
    pub fn verdict_line(name: &str, label_pattern: &str, yes: &str, no: &str) -> Self {
        let pattern = format!(
            r"^\s*{label_pattern}\s*({}|{})\s*$",
            regex::escape(yes),
            regex::escape(no)
        );
        let answers = BTreeMap::from([(yes.to_string(), Verdict::Yes), (no.to_string(), Verdict::No)]);
        Self::new(name, &pattern, answers, Strictness::Strict).expect("built-in pattern")
    }

    pub fn canonical() -> Self {
        Self::verdict_line("canonical", "Verdict:", "yes", "no")
    }

    pub fn prompt_shift() -> Self {
        Self::verdict_line("prompt_shift", r"Final answer\s*[:=]", "yes", "no")
    }

    pub fn verbalizer_shift() -> Self {
        Self::verdict_line("verbalizer_shift", "Decision:", "affirmative", "negative")
    }

    pub fn task_family() -> Self {
        Self::verdict_line("task_family", "Verdict:", "yes", "no")
    }
}

/// Inserts the optional line label after the leading anchor.
fn relax(pattern: &str) -> String {
    if let Some(rest) = pattern.strip_prefix(r"^\s*") {
        format!(r"^\s*{LINE_LABEL}{rest}")
    } else if let Some(rest) = pattern.strip_prefix('^') {
        format!(r"^\s*{LINE_LABEL}{rest}")
    } else {
        format!(r"^\s*{LINE_LABEL}{pattern}")
    }
}

/// Minimal `t` such that the parser is defined on the decoded prefix `r_{1:t}`.
pub fn find_onset<T: Tokenizer + ?Sized>(
    parser: &OnsetParser,
    tokens: &[TokenId],
    tokenizer: &T,
) -> Option<Onset> {
    (0..=tokens.len()).find_map(|t| {
        parser.parse(&tokenizer.decode(&tokens[..t])).map(|answer| Onset { index: t, answer })
    })
}

/// [`find_onset`] over per-token texts whose concatenation is the response.
pub fn find_onset_in_texts(parser: &OnsetParser, token_texts: &[String]) -> Option<Onset> {
    let mut prefix = String::new();
    if let Some(answer) = parser.parse(&prefix) {
        return Some(Onset { index: 0, answer });
    }
    for (i, piece) in token_texts.iter().enumerate() {
        prefix.push_str(piece);
        if let Some(answer) = parser.parse(&prefix) {
            return Some(Onset { index: i + 1, answer });
        }
    }
    None
}

/// Whether the parser freezes on `pieces`: once defined on a prefix it stays
/// defined with the same answer on every longer prefix.
pub fn freezes_on(parser: &OnsetParser, pieces: &[String]) -> bool {
    let mut prefix = String::new();
    let mut seen: Option<Verdict> = parser.parse(&prefix);
    for piece in pieces {
        prefix.push_str(piece);
        let now = parser.parse(&prefix);
        if let Some(prev) = seen {
            if now != Some(prev) {
                log::warn!(
                    "parser {} lost freeze at prefix {:?}",
                    parser.name(),
                    prefix
                );
                return false;
            }
        }
        seen = now;
    }
    true
}

/// Serialized parser definition.
///
/// ```toml
/// name = "canonical"
/// pattern = '^\s*Verdict:\s*(yes|no)\s*$'
/// strictness = "strict"
/// [answers]
/// yes = "yes"
/// no = "no"
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParserConfig {
    pub name: String,
    pub pattern: String,
    #[serde(default = "default_strictness")]
    pub strictness: Strictness,
    pub answers: BTreeMap<String, String>,
}

fn default_strictness() -> Strictness {
    Strictness::Strict
}

impl ParserConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, ParserError> {
        toml::from_str(s).map_err(|e| ParserError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ParserError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn build(&self) -> Result<OnsetParser, ParserError> {
        let answers = self
            .answers
            .iter()
            .map(|(k, v)| {
                Verdict::parse(v)
                    .map(|a| (k.clone(), a))
                    .ok_or_else(|| ParserError::BadAnswer(v.clone()))
            })
            .collect::<Result<_, _>>()?;
        OnsetParser::new(&self.name, &self.pattern, answers, self.strictness)
    }

    pub fn from_parser(p: &OnsetParser) -> Self {
        Self {
            name: p.name.clone(),
            pattern: p.pattern.clone(),
            strictness: p.strictness,
            answers: p
                .answers
                .iter()
                .map(|(k, v)| (k.clone(), v.as_str().to_string()))
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pieces(s: &str) -> Vec<String> {
        s.chars().map(|c| c.to_string()).collect()
    }

    #[test]
    fn canonical_pattern_matches_the_documented_regex() {
        assert_eq!(OnsetParser::canonical().pattern(), r"^\s*Verdict:\s*(yes|no)\s*$");
        assert_eq!(
            OnsetParser::prompt_shift().pattern(),
            r"^\s*Final answer\s*[:=]\s*(yes|no)\s*$"
        );
    }

    #[test]
    fn verdict_line_parses_on_its_own_line_only() {
        let p = OnsetParser::canonical();
        assert_eq!(p.parse("s1 = 3\nVerdict: yes"), Some(Verdict::Yes));
        assert_eq!(p.parse("s1 = 3\n  Verdict:no  \n"), Some(Verdict::No));
        assert_eq!(p.parse("The Verdict: yes"), None);
        assert_eq!(p.parse("Verdict: ye"), None);
        assert_eq!(p.parse("Verdict: yes or no"), None);
    }

    #[test]
    fn verbalizer_shift_maps_to_yes_no() {
        let p = OnsetParser::verbalizer_shift();
        assert_eq!(p.parse("Decision: affirmative"), Some(Verdict::Yes));
        assert_eq!(p.parse("Decision: negative"), Some(Verdict::No));
    }

    #[test]
    fn relaxed_accepts_line_numbered_variants() {
        let strict = OnsetParser::prompt_shift();
        let relaxed = strict.with_strictness(Strictness::Relaxed);
        let text = "line4: even_check = even\nline5: Final answer = yes";
        assert_eq!(strict.parse(text), None);
        assert_eq!(relaxed.parse(text), Some(Verdict::Yes));
        assert_eq!(relaxed.parse("Final answer = no"), Some(Verdict::No));
        assert_eq!(relaxed.name(), "prompt_shift-relaxed");
    }

    #[test]
    fn onset_is_minimal_prefix() {
        let p = OnsetParser::canonical();
        let text = "a = 1\nVerdict: yes\n";
        let ps = pieces(text);
        let on = find_onset_in_texts(&p, &ps).unwrap();
        // brute-force oracle
        let k = (0..=ps.len()).find(|&t| p.parse(&ps[..t].concat()).is_some()).unwrap();
        assert_eq!(on.index, k);
        assert_eq!(on.index, "a = 1\nVerdict: yes".len());
        assert_eq!(on.answer, Verdict::Yes);
        assert!(find_onset_in_texts(&p, &pieces("no verdict here\n")).is_none());
    }

    #[test]
    fn freeze_detects_lost_definition() {
        let p = OnsetParser::canonical();
        assert!(freezes_on(&p, &pieces("x\nVerdict: no\nmore\n")));
        assert!(!freezes_on(&p, &pieces("Verdict: yes!")));
    }

    #[test]
    fn config_roundtrip() {
        let cfg = ParserConfig::from_toml_str(
            "name='d'\npattern='^\\s*Decision:\\s*(affirmative|negative)\\s*$'\n[answers]\naffirmative='yes'\nnegative='no'\n",
        )
        .unwrap();
        let p = cfg.build().unwrap();
        assert_eq!(p.parse("Decision: negative"), Some(Verdict::No));
        assert_eq!(ParserConfig::from_parser(&p), cfg);
        let bad = ParserConfig {
            answers: BTreeMap::from([("y".into(), "maybe".into())]),
            ..cfg.clone()
        };
        assert!(matches!(bad.build(), Err(ParserError::BadAnswer(_))));
        let nocap = ParserConfig {
            pattern: "^Verdict$".into(),
            ..cfg
        };
        assert!(matches!(nocap.build(), Err(ParserError::NoCapture(_))));
    }
}
