//! Delayed-verdict conditions: prompts, response templates, parsers and
//! verbalizers, plus the fixture corpus used for parser tests.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, TokenId, Tokenizer, Vocabulary};
use crate::parser::{OnsetParser, ParserConfig, ParserError};
use crate::scheme::{AnswerScheme, SchemeError, Variant, Verdict};
use crate::toy::{PathAnnotations, ScriptedPathBackend};

pub const CANONICAL_PROMPT: &str = r#"Fill the exact 5-line template and nothing else.

s1 = a + b = ?
s2 = c + d = ?
total = s1 + s2 = ?
parity = even or odd
Verdict: yes or no

Question: Is a+b+c+d even?
a=..., b=..., c=..., d=...

Rules:
- Keep exactly 5 lines.
- Use the same left-hand labels.
- The last line must be exactly "Verdict: yes" or "Verdict: no"."#;

pub const PROMPT_SHIFT_PROMPT: &str = r#"Write exactly five lines, no extra text.

line1: left_part = a+b = ?
line2: right_part = c+d = ?
line3: sum_all = left_part+right_part = ?
line4: even_check = even or odd
line5: Final answer = yes or no

Task: decide whether a+b+c+d is even.
Values: a=..., b=..., c=..., d=...

The fifth line must be exactly "Final answer = yes" or
"Final answer = no"."#;

pub const VERBALIZER_SHIFT_PROMPT: &str = r#"Fill the exact 5-line template and nothing else.

s1 = a + b = ?
s2 = c + d = ?
total = s1 + s2 = ?
parity = even or odd
Decision: affirmative or negative

Question: Is a+b+c+d even?
a=..., b=..., c=..., d=...

Rules:
- Keep exactly 5 lines.
- Use the same left-hand labels.
- The last line must be exactly "Decision: affirmative" or "Decision: negative"."#;

pub const TASK_FAMILY_PROMPT: &str = r#"Fill the exact 5-line template and nothing else.

left = a + b = ?
right = c + d = ?
gap = left - right = ?
comparison = greater or not greater
Verdict: yes or no

Question: Is (a+b) > (c+d)?
a=..., b=..., c=..., d=...

Rules:
- Keep exactly 5 lines.
- Use the same left-hand labels.
- The last line must be exactly "Verdict: yes" or "Verdict: no"."#;

const VALUES_PLACEHOLDER: &str = "a=..., b=..., c=..., d=...";

#[derive(Debug, Error)]
pub enum ConditionError {
    #[error("unknown condition {0:?}")]
    Unknown(String),
    #[error(transparent)]
    Parser(#[from] ParserError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// Is a+b+c+d even?
    Parity,
    /// Is (a+b) > (c+d)?
    Comparison,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Operands {
    pub a: i64,
    pub b: i64,
    pub c: i64,
    pub d: i64,
}

impl Operands {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            a: rng.random_range(1..=20),
            b: rng.random_range(1..=20),
            c: rng.random_range(1..=20),
            d: rng.random_range(1..=20),
        }
    }

    pub fn truth(&self, task: Task) -> Verdict {
        let yes = match task {
            Task::Parity => (self.a + self.b + self.c + self.d) % 2 == 0,
            Task::Comparison => self.a + self.b > self.c + self.d,
        };
        if yes {
            Verdict::Yes
        } else {
            Verdict::No
        }
    }
}

/// One delayed-verdict condition.
///
/// `response_template` placeholders: `{a} {b} {c} {d} {ab} {cd} {sum}
/// {parity} {gap} {cmp} {answer}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionSpec {
    pub name: String,
    pub task: Task,
    pub prompt: String,
    pub response_template: String,
    pub parser: ParserConfig,
    /// Answer-line label preceding the answer word (e.g. `Verdict:`).
    pub answer_prefix: String,
    /// Answer words for yes-like and no-like answers.
    pub yes_word: String,
    pub no_word: String,
}

impl ConditionSpec {
    pub fn builtin(name: &str) -> Result<Self, ConditionError> {
        let parity_body = "s1 = {a} + {b} = {ab}\ns2 = {c} + {d} = {cd}\ntotal = {ab} + {cd} = {sum}\nparity = {parity}\n";
        let spec = match name {
            "canonical" => Self {
                name: name.into(),
                task: Task::Parity,
                prompt: CANONICAL_PROMPT.into(),
                response_template: format!("{parity_body}Verdict: {{answer}}\n"),
                parser: ParserConfig::from_parser(&OnsetParser::canonical()),
                answer_prefix: "Verdict:".into(),
                yes_word: "yes".into(),
                no_word: "no".into(),
            },
            "prompt_shift" => Self {
                name: name.into(),
                task: Task::Parity,
                prompt: PROMPT_SHIFT_PROMPT.into(),
                response_template: "line1: left_part = {a}+{b} = {ab}\nline2: right_part = {c}+{d} = {cd}\nline3: sum_all = {ab}+{cd} = {sum}\nline4: even_check = {parity}\nFinal answer = {answer}\n".into(),
                parser: ParserConfig::from_parser(&OnsetParser::prompt_shift()),
                answer_prefix: "Final answer =".into(),
                yes_word: "yes".into(),
                no_word: "no".into(),
            },
            "verbalizer_shift" => Self {
                name: name.into(),
                task: Task::Parity,
                prompt: VERBALIZER_SHIFT_PROMPT.into(),
                response_template: format!("{parity_body}Decision: {{answer}}\n"),
                parser: ParserConfig::from_parser(&OnsetParser::verbalizer_shift()),
                answer_prefix: "Decision:".into(),
                yes_word: "affirmative".into(),
                no_word: "negative".into(),
            },
            "task_family" => Self {
                name: name.into(),
                task: Task::Comparison,
                prompt: TASK_FAMILY_PROMPT.into(),
                response_template: "left = {a} + {b} = {ab}\nright = {c} + {d} = {cd}\ngap = {ab} - {cd} = {gap}\ncomparison = {cmp}\nVerdict: {answer}\n".into(),
                parser: ParserConfig::from_parser(&OnsetParser::task_family()),
                answer_prefix: "Verdict:".into(),
                yes_word: "yes".into(),
                no_word: "no".into(),
            },
            other => return Err(ConditionError::Unknown(other.to_string())),
        };
        Ok(spec)
    }

    pub fn builtin_names() -> [&'static str; 4] {
        ["canonical", "prompt_shift", "verbalizer_shift", "task_family"]
    }

    pub fn from_toml_str(s: &str) -> Result<Self, ConditionError> {
        toml::from_str(s).map_err(|e| ConditionError::Config(e.to_string()))
    }

    /// Built-in name or path to a TOML condition file.
    pub fn resolve(name_or_path: &str) -> Result<Self, ConditionError> {
        let p = Path::new(name_or_path);
        if p.extension().is_some_and(|e| e == "toml") {
            Self::from_toml_str(&std::fs::read_to_string(p)?)
        } else {
            Self::builtin(name_or_path)
        }
    }

    pub fn parser(&self) -> Result<OnsetParser, ConditionError> {
        Ok(self.parser.build()?)
    }

    pub fn render_prompt(&self, ops: &Operands) -> String {
        let values = format!("a={}, b={}, c={}, d={}", ops.a, ops.b, ops.c, ops.d);
        self.prompt.replace(VALUES_PLACEHOLDER, &values)
    }

    /// Template response for `ops` ending in the verbalized `answer`.
    pub fn render_response(&self, ops: &Operands, answer: Verdict) -> String {
        let ab = ops.a + ops.b;
        let cd = ops.c + ops.d;
        let sum = ab + cd;
        let word = match answer {
            Verdict::Yes => &self.yes_word,
            Verdict::No => &self.no_word,
        };
        let subs: [(&str, String); 11] = [
            ("{a}", ops.a.to_string()),
            ("{b}", ops.b.to_string()),
            ("{c}", ops.c.to_string()),
            ("{d}", ops.d.to_string()),
            ("{ab}", ab.to_string()),
            ("{cd}", cd.to_string()),
            ("{sum}", sum.to_string()),
            ("{parity}", if sum % 2 == 0 { "even" } else { "odd" }.to_string()),
            ("{gap}", (ab - cd).to_string()),
            ("{cmp}", if ab > cd { "greater" } else { "not greater" }.to_string()),
            ("{answer}", word.clone()),
        ];
        subs.iter()
            .fold(self.response_template.clone(), |acc, (k, v)| acc.replace(k, v))
    }

    pub fn contextual_texts(&self) -> [String; 2] {
        [
            format!("{} {}", self.answer_prefix, self.yes_word),
            format!("{} {}", self.answer_prefix, self.no_word),
        ]
    }

    pub fn bare_texts(&self) -> [String; 2] {
        [format!(" {}", self.yes_word), format!(" {}", self.no_word)]
    }

    pub fn scheme<T: Tokenizer + ?Sized>(
        &self,
        tokenizer: &T,
        variant: Variant,
    ) -> Result<AnswerScheme, ConditionError> {
        let [y, n] = match variant {
            Variant::Contextual => self.contextual_texts(),
            Variant::Bare => self.bare_texts(),
        };
        Ok(AnswerScheme::binary_from_texts(tokenizer, &[&y], &[&n], variant)?)
    }

    /// Vocabulary covering this condition's prompts, responses and verbalizers.
    pub fn vocabulary(&self) -> Vocabulary {
        let mut extra: Vec<String> = [
            "s1", "s2", " = ", " + ", "total", "parity", " even", " odd", "left", "right", "gap",
            "comparison", " greater", " not", "line", "_part", "sum_all", "even_check",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        extra.push(self.answer_prefix.clone());
        extra.push(label_stem(&self.answer_prefix));
        extra.push(format!(" {}", self.yes_word));
        extra.push(format!(" {}", self.no_word));
        Vocabulary::with_ascii(extra)
    }
}

/// Answer prefix without its trailing punctuation ("Verdict:" -> "Verdict").
fn label_stem(prefix: &str) -> String {
    prefix
        .trim_end_matches(|c: char| c == ':' || c == '=' || c == ' ')
        .to_string()
}

/// Longest-match encoding that never emits the `excluded` token ids.
pub fn encode_avoiding(vocab: &Vocabulary, text: &str, excluded: &[TokenId]) -> Result<Vec<TokenId>, BackendError> {
    let mut out = Vec::new();
    let mut rest = text;
    while !rest.is_empty() {
        let mut found = None;
        for len in (1..=rest.len()).rev() {
            if !rest.is_char_boundary(len) {
                continue;
            }
            if let Some(id) = vocab.id(&rest[..len]) {
                if id != vocab.eos() && !excluded.contains(&id) {
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

/// Knobs for the designed commitment code of template toy trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyStyle {
    /// Plateau magnitude of δ after commitment.
    pub amplitude: f64,
    /// Standard deviation of per-state jitter.
    pub jitter: f64,
    /// Fraction of samples whose final answer is wrong.
    pub wrong_rate: f64,
    /// Feature summary dimensionality.
    pub feature_dim: usize,
    pub feature_noise: f64,
}

impl Default for ToyStyle {
    fn default() -> Self {
        Self {
            amplitude: 8.0,
            jitter: 1.5,
            wrong_rate: 0.0,
            feature_dim: 16,
            feature_noise: 0.1,
        }
    }
}

/// A rendered template sample with its scripted backend.
pub struct ToySample {
    pub operands: Operands,
    pub truth: Verdict,
    pub answer: Verdict,
    pub prompt: String,
    pub prompt_tokens: Vec<TokenId>,
    pub backend: ScriptedPathBackend,
}

fn condition_hash(name: &str) -> u64 {
    name.bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

impl ConditionSpec {
    /// Builds a scripted toy backend that greedily emits this condition's
    /// template response for random operands.
    pub fn toy_sample(&self, seed: u64, style: &ToyStyle) -> Result<ToySample, ConditionError> {
        let vocab = Arc::new(self.vocabulary());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let operands = Operands::random(&mut rng);
        let truth = operands.truth(self.task);
        let answer = if rng.random_bool(style.wrong_rate.clamp(0.0, 1.0)) {
            truth.flip()
        } else {
            truth
        };
        let prompt = self.render_prompt(&operands);
        let prompt_tokens = vocab.encode(&prompt)?;
        let prefix = vocab.encode(&self.answer_prefix)?;
        let yes = vocab.encode(&format!(" {}", self.yes_word))?;
        let no = vocab.encode(&format!(" {}", self.no_word))?;
        let (yes, no) = match (yes.as_slice(), no.as_slice()) {
            ([y], [n]) => (*y, *n),
            _ => return Err(ConditionError::Config("answer words must be single tokens".into())),
        };
        let path = encode_avoiding(&vocab, &self.render_response(&operands, answer), &prefix)?;

        let len = path.len();
        let sign = answer.sign();
        let commit_at = rng.random_range(0.2..0.7) * len as f64;
        let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };
        let mut preference = Vec::with_capacity(len + 1);
        let mut bare = Vec::with_capacity(len + 1);
        for t in 0..=len {
            let ramp = crate::projection::sigmoid((t as f64 - commit_at) / 2.0);
            let p = sign * style.amplitude * ramp + style.jitter * (1.0 - ramp) * normal(&mut rng);
            preference.push(p);
            bare.push(0.8 * p + 0.3 * normal(&mut rng));
        }

        // Per-condition mixing of (preference, progress) into the summary.
        let mut mix_rng = ChaCha8Rng::seed_from_u64(condition_hash(&self.name));
        let mixing: Vec<[f64; 2]> = (0..style.feature_dim)
            .map(|_| [normal(&mut mix_rng), normal(&mut mix_rng)])
            .collect();
        let features = (0..=len)
            .map(|t| {
                let progress = t as f64 / len as f64;
                let v: Vec<f64> = mixing
                    .iter()
                    .map(|m| m[0] * preference[t] / style.amplitude + m[1] * progress + style.feature_noise * normal(&mut rng))
                    .collect();
                BTreeMap::from([("last_L21".to_string(), v)])
            })
            .collect();
        let notes = PathAnnotations {
            preference,
            bare_preference: bare,
            features: Some(features),
            latents: None,
        };
        let backend = ScriptedPathBackend::new(format!("toy-template:{}", self.name), vocab, path, notes, prefix, yes, no)?;
        Ok(ToySample {
            operands,
            truth,
            answer,
            prompt,
            prompt_tokens,
            backend,
        })
    }
}

/// One parser fixture: a template output with its expected answer.
#[derive(Debug, Clone)]
pub struct ParserFixture {
    pub condition: String,
    pub text: String,
    pub expected: Option<Verdict>,
    /// Text before the answer line completes (onset is at its end in chars).
    pub onset_chars: Option<usize>,
}

/// Template outputs for every built-in condition, both answers, plus
/// line-numbered prompt-shift variants that only the relaxed parser accepts.
pub fn fixture_corpus() -> Vec<ParserFixture> {
    let ops = [
        Operands { a: 3, b: 5, c: 2, d: 8 },
        Operands { a: 7, b: 4, c: 1, d: 9 },
        Operands { a: 12, b: 1, c: 6, d: 6 },
    ];
    let mut out = Vec::new();
    for name in ConditionSpec::builtin_names() {
        let spec = ConditionSpec::builtin(name).expect("builtin");
        for o in &ops {
            for ans in [Verdict::Yes, Verdict::No] {
                let text = spec.render_response(o, ans);
                let line_start = text.trim_end_matches('\n').rfind('\n').map_or(0, |i| i + 1);
                let answer_line = text[line_start..].trim_end_matches('\n');
                out.push(ParserFixture {
                    condition: name.to_string(),
                    onset_chars: Some(line_start + answer_line.len()),
                    text,
                    expected: Some(ans),
                });
            }
        }
    }
    out
}

/// Prompt-shift outputs whose answer line carries a `line5:` label.
pub fn line_numbered_fixtures() -> Vec<ParserFixture> {
    let spec = ConditionSpec::builtin("prompt_shift").expect("builtin");
    [Verdict::Yes, Verdict::No]
        .into_iter()
        .map(|ans| {
            let text = spec
                .render_response(&Operands { a: 3, b: 5, c: 2, d: 8 }, ans)
                .replace("Final answer =", "line5: Final answer =");
            ParserFixture {
                condition: "prompt_shift".into(),
                onset_chars: Some(text.trim_end_matches('\n').len()),
                text,
                expected: Some(ans),
            }
        })
        .collect()
}
