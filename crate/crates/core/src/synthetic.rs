//! Synthetic worlds with ground-truth commitment and cursor latents.
//!
//! Features are a per-condition linear mixing of `(commit, cursor)` plus
//! Gaussian noise, so every readout and factorization experiment has a known
//! answer. The same trajectory can be emitted directly as a trace or served
//! through a scripted backend whose exact δ equals the commitment latent.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{BackendError, TokenId, Vocabulary};
use crate::scheme::{AnswerScheme, Variant, Verdict};
use crate::toy::{PathAnnotations, ScriptedPathBackend};
use crate::trace::{Latents, StateRecord, TrajectoryTrace};

#[derive(Debug, Error)]
pub enum WorldError {
    #[error("mixing matrix for {0:?} has rank < 2")]
    DegenerateMixing(String),
    #[error("mixing matrix for {name:?} has {rows} rows, expected {dim}")]
    MixingShape { name: String, rows: usize, dim: usize },
    #[error("unknown condition {0:?}")]
    UnknownCondition(String),
    #[error("invalid world: {0}")]
    Invalid(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CommitDynamics {
    pub start: f64,
    /// Fraction of the remaining distance to the signed target covered per step.
    pub drift_rate: f64,
    /// Magnitude of the signed target.
    pub target: f64,
    /// Standard deviation of the per-step innovation.
    pub noise: f64,
}

impl Default for CommitDynamics {
    fn default() -> Self {
        Self {
            start: 0.0,
            drift_rate: 0.1,
            target: 4.0,
            noise: 0.5,
        }
    }
}

/// Cursor `t / steps`, capped at 1; onset at the first state whose cursor
/// reaches `threshold`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CursorSchedule {
    pub steps: usize,
    pub threshold: f64,
}

impl Default for CursorSchedule {
    fn default() -> Self {
        Self {
            steps: 40,
            threshold: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConditionMixing {
    pub name: String,
    /// `feature_dim` rows of `[commit_loading, cursor_loading]`.
    pub mixing: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticWorld {
    pub feature_dim: usize,
    pub feature_name: String,
    pub feature_noise: f64,
    pub tokens_per_line: usize,
    pub commit: CommitDynamics,
    pub cursor: CursorSchedule,
    pub conditions: Vec<ConditionMixing>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixingKind {
    /// Every condition shares one mixing matrix.
    Shared,
    /// Each condition's mixing is an orthogonal rotation of the base plane
    /// onto its own plane, with planes mutually orthogonal across conditions
    /// while `2·conditions ≤ dim`; beyond that, independent random rotations.
    Rotated,
    /// Each condition applies an independent random orthogonal rotation.
    Random,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| normal(rng))
}

/// Random `dim x 2` matrix with orthonormal columns.
fn orthonormal_pair(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    gaussian_matrix(dim, 2, rng).qr().q()
}

fn random_rotation(dim: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    gaussian_matrix(dim, dim, rng).qr().q()
}

fn to_rows(m: &DMatrix<f64>) -> Vec<[f64; 2]> {
    (0..m.nrows()).map(|i| [m[(i, 0)], m[(i, 1)]]).collect()
}

impl SyntheticWorld {
    /// Default desk-scale world: 16 features, noise 0.1, drift toward ±4,
    /// onset when the cursor reaches 1 after 40 steps.
    pub fn new(conditions: &[&str], kind: MixingKind, seed: u64) -> Self {
        Self::with_dim(conditions, kind, 16, seed)
    }

    pub fn with_dim(conditions: &[&str], kind: MixingKind, feature_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = orthonormal_pair(feature_dim, &mut rng);
        let disjoint = (kind == MixingKind::Rotated && 2 * conditions.len() <= feature_dim)
            .then(|| random_rotation(feature_dim, &mut rng));
        let conditions = conditions
            .iter()
            .enumerate()
            .map(|(k, name)| {
                let m = match (kind, &disjoint) {
                    (MixingKind::Shared, _) => base.clone(),
                    (MixingKind::Rotated, Some(q)) => q.columns(2 * k, 2).into_owned(),
                    _ => random_rotation(feature_dim, &mut rng) * &base,
                };
                ConditionMixing {
                    name: name.to_string(),
                    mixing: to_rows(&m),
                }
            })
            .collect();
        Self {
            feature_dim,
            feature_name: "last_L21".into(),
            feature_noise: 0.1,
            tokens_per_line: 8,
            commit: CommitDynamics::default(),
            cursor: CursorSchedule::default(),
            conditions,
        }
    }

    pub fn with_feature_noise(mut self, noise: f64) -> Self {
        self.feature_noise = noise;
        self
    }

    pub fn with_commit(mut self, commit: CommitDynamics) -> Self {
        self.commit = commit;
        self
    }

    pub fn with_cursor(mut self, cursor: CursorSchedule) -> Self {
        self.cursor = cursor;
        self
    }

    pub fn condition_names(&self) -> Vec<&str> {
        self.conditions.iter().map(|c| c.name.as_str()).collect()
    }

    pub fn validate(&self) -> Result<(), WorldError> {
        if self.conditions.is_empty() {
            return Err(WorldError::Invalid("no conditions".into()));
        }
        if self.cursor.steps < 4 {
            return Err(WorldError::Invalid("cursor schedule needs at least 4 steps".into()));
        }
        if !(self.cursor.threshold > 0.0 && self.cursor.threshold <= 1.0) {
            return Err(WorldError::Invalid("cursor threshold must lie in (0, 1]".into()));
        }
        if self.tokens_per_line < 2 {
            return Err(WorldError::Invalid("tokens_per_line must be at least 2".into()));
        }
        for c in &self.conditions {
            if c.mixing.len() != self.feature_dim {
                return Err(WorldError::MixingShape {
                    name: c.name.clone(),
                    rows: c.mixing.len(),
                    dim: self.feature_dim,
                });
            }
            let m = DMatrix::from_fn(self.feature_dim, 2, |i, j| c.mixing[i][j]);
            let sv = m.singular_values();
            let top = sv.max();
            if !(top > 0.0) || sv.min() <= 1e-10 * top {
                return Err(WorldError::DegenerateMixing(c.name.clone()));
            }
        }
        Ok(())
    }

    fn mixing(&self, condition: &str) -> Result<&ConditionMixing, WorldError> {
        self.conditions
            .iter()
            .find(|c| c.name == condition)
            .ok_or_else(|| WorldError::UnknownCondition(condition.to_string()))
    }

    pub fn onset(&self) -> usize {
        (0..=self.cursor.steps)
            .find(|&t| self.cursor_at(t) >= self.cursor.threshold)
            .unwrap_or(self.cursor.steps)
    }

    pub fn cursor_at(&self, t: usize) -> f64 {
        (t as f64 / self.cursor.steps as f64).min(1.0)
    }

    pub fn vocabulary() -> Vocabulary {
        Vocabulary::with_ascii(["Verdict:", "Verdict", " yes", " no", " step"])
    }

    /// Contextual and bare schemes matching the synthetic verdict line.
    pub fn schemes(vocab: &Vocabulary) -> (AnswerScheme, AnswerScheme) {
        let ctx = AnswerScheme::binary_from_texts(vocab, &["Verdict: yes"], &["Verdict: no"], Variant::Contextual)
            .expect("synthetic vocabulary covers verbalizers");
        let bare = AnswerScheme::binary_from_texts(vocab, &[" yes"], &[" no"], Variant::Bare)
            .expect("synthetic vocabulary covers verbalizers");
        (ctx, bare)
    }
}

/// Fully materialized synthetic trajectory.
#[derive(Debug, Clone)]
pub struct SyntheticTrajectory {
    pub condition: String,
    /// Response tokens (verdict line plus trailing newline).
    pub tokens: Vec<TokenId>,
    pub onset: usize,
    /// Commitment latent at states `0..=tokens.len()`.
    pub commit: Vec<f64>,
    pub cursor: Vec<f64>,
    pub features: Vec<Vec<f64>>,
    pub answer: Verdict,
    pub truth: Verdict,
}

impl SyntheticWorld {
    pub fn trajectory(&self, condition: &str, seed: u64) -> Result<SyntheticTrajectory, WorldError> {
        self.validate()?;
        let mix = self.mixing(condition)?;
        let vocab = Self::vocabulary();
        let id = |p: &str| vocab.id(p).expect("synthetic piece");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        let truth = if rng.random_bool(0.5) { Verdict::Yes } else { Verdict::No };
        let onset = self.onset();
        let states = onset + 2;
        let target = truth.sign() * self.commit.target;
        let mut commit = Vec::with_capacity(states);
        let mut c = self.commit.start;
        for t in 0..states {
            if t >= onset {
                // Latents are frozen once the answer is verbalized.
                commit.push(commit[onset - 1]);
                continue;
            }
            commit.push(c);
            c += self.commit.drift_rate * (target - c) + self.commit.noise * normal(&mut rng);
        }
        let answer = Verdict::from_delta(commit[onset - 1]);

        let filler = id(" step");
        let newline = id("\n");
        let mut tokens: Vec<TokenId> = (0..onset - 4)
            .map(|i| if (i + 1) % self.tokens_per_line == 0 { newline } else { filler })
            .collect();
        tokens.extend([newline, id("Verdict"), id(":")]);
        tokens.push(match answer {
            Verdict::Yes => id(" yes"),
            Verdict::No => id(" no"),
        });
        tokens.push(newline);

        let cursor: Vec<f64> = (0..states).map(|t| self.cursor_at(t)).collect();
        let features = (0..states)
            .map(|t| {
                mix.mixing
                    .iter()
                    .map(|m| m[0] * commit[t] + m[1] * cursor[t] + self.feature_noise * normal(&mut rng))
                    .collect()
            })
            .collect();
        Ok(SyntheticTrajectory {
            condition: condition.to_string(),
            tokens,
            onset,
            commit,
            cursor,
            features,
            answer,
            truth,
        })
    }

    /// Backend whose greedy path is the synthetic response and whose exact
    /// contextual δ equals the commitment latent at every state.
    pub fn backend(&self, condition: &str, seed: u64) -> Result<ScriptedPathBackend, WorldError> {
        let traj = self.trajectory(condition, seed)?;
        let vocab = Arc::new(Self::vocabulary());
        let notes = PathAnnotations {
            bare_preference: traj.commit.iter().map(|c| 0.9 * c + 0.25).collect(),
            preference: traj.commit.clone(),
            features: Some(
                traj.features
                    .iter()
                    .map(|f| BTreeMap::from([(self.feature_name.clone(), f.clone())]))
                    .collect(),
            ),
            latents: Some(
                traj.commit
                    .iter()
                    .zip(&traj.cursor)
                    .map(|(&commit, &cursor)| Latents { commit, cursor })
                    .collect(),
            ),
        };
        let prefix = vec![vocab.id("Verdict:").expect("piece")];
        let yes = vocab.id(" yes").expect("piece");
        let no = vocab.id(" no").expect("piece");
        Ok(ScriptedPathBackend::new("synthetic", vocab, traj.tokens, notes, prefix, yes, no)?)
    }
}

/// Emits a synthetic trajectory directly as a trace with ground-truth latents.
pub fn synthesize_trace(
    world: &SyntheticWorld,
    condition: &str,
    seed: u64,
    id: impl Into<String>,
) -> Result<TrajectoryTrace, WorldError> {
    let traj = world.trajectory(condition, seed)?;
    let vocab = SyntheticWorld::vocabulary();
    let mut trace = TrajectoryTrace::new(id, condition);
    trace.token_texts = traj
        .tokens
        .iter()
        .map(|&t| vocab.piece(t).unwrap_or_default().to_string())
        .collect();
    trace.tokens = traj.tokens.clone();
    trace.onset = Some(traj.onset);
    trace.final_answer = Some(traj.answer);
    trace.parsed = true;
    trace.ground_truth = Some(traj.truth);
    trace.meta.backend = "synthetic".into();
    trace.meta.scheme = "contextual:yes/no".into();
    trace.meta.parser = "canonical".into();
    trace.meta.seed = Some(seed);
    trace.states = (0..traj.onset)
        .map(|t| {
            let mut s = StateRecord::new(t, traj.commit[t]);
            s.features = Some(BTreeMap::from([(world.feature_name.clone(), traj.features[t].clone())]));
            s.latents = Some(Latents {
                commit: traj.commit[t],
                cursor: traj.cursor[t],
            });
            s
        })
        .collect();
    Ok(trace)
}

/// `n` traces per condition with seeds derived from `seed`.
pub fn synthesize_batch(world: &SyntheticWorld, per_condition: usize, seed: u64) -> Result<Vec<TrajectoryTrace>, WorldError> {
    let mut out = Vec::with_capacity(per_condition * world.conditions.len());
    for (ci, cond) in world.conditions.iter().enumerate() {
        for i in 0..per_condition {
            let s = seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add((ci as u64) << 32 | i as u64);
            out.push(synthesize_trace(world, &cond.name, s, format!("{}-{:04}", cond.name, i))?);
        }
    }
    Ok(out)
}

/// World configuration file.
///
/// ```toml
/// conditions = ["canonical", "prompt_shift", "verbalizer_shift"]
/// mixing = "rotated"
/// mixing_seed = 7
/// feature_dim = 16
/// feature_noise = 0.1
/// [commit]
/// start = 0.0
/// drift_rate = 0.1
/// target = 4.0
/// noise = 0.5
/// [cursor]
/// steps = 40
/// threshold = 1.0
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldConfig {
    pub conditions: Vec<String>,
    #[serde(default = "default_kind")]
    pub mixing: MixingKind,
    #[serde(default)]
    pub mixing_seed: u64,
    #[serde(default = "default_dim")]
    pub feature_dim: usize,
    #[serde(default = "default_noise")]
    pub feature_noise: f64,
    #[serde(default)]
    pub feature_name: Option<String>,
    #[serde(default)]
    pub tokens_per_line: Option<usize>,
    #[serde(default)]
    pub commit: CommitDynamics,
    #[serde(default)]
    pub cursor: CursorSchedule,
    /// Explicit mixing matrices override the generated ones by name.
    #[serde(default)]
    pub explicit: Vec<ConditionMixing>,
}

fn default_kind() -> MixingKind {
    MixingKind::Shared
}
fn default_dim() -> usize {
    16
}
fn default_noise() -> f64 {
    0.1
}

impl WorldConfig {
    pub fn from_toml_str(s: &str) -> Result<Self, WorldError> {
        toml::from_str(s).map_err(|e| WorldError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, WorldError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn build(&self) -> Result<SyntheticWorld, WorldError> {
        let names: Vec<&str> = self.conditions.iter().map(String::as_str).collect();
        let mut world = SyntheticWorld::with_dim(&names, self.mixing, self.feature_dim, self.mixing_seed)
            .with_feature_noise(self.feature_noise)
            .with_commit(self.commit)
            .with_cursor(self.cursor);
        if let Some(n) = &self.feature_name {
            world.feature_name = n.clone();
        }
        if let Some(k) = self.tokens_per_line {
            world.tokens_per_line = k;
        }
        for e in &self.explicit {
            match world.conditions.iter_mut().find(|c| c.name == e.name) {
                Some(c) => c.mixing = e.mixing.clone(),
                None => world.conditions.push(e.clone()),
            }
        }
        world.validate()?;
        Ok(world)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::{find_onset_in_texts, OnsetParser};

    fn world() -> SyntheticWorld {
        SyntheticWorld::new(&["canonical"], MixingKind::Shared, 1)
    }

    #[test]
    fn same_seed_same_trace() {
        let w = world();
        assert_eq!(
            synthesize_trace(&w, "canonical", 5, "a").unwrap(),
            synthesize_trace(&w, "canonical", 5, "a").unwrap()
        );
        assert_ne!(
            synthesize_trace(&w, "canonical", 5, "a").unwrap().deltas(),
            synthesize_trace(&w, "canonical", 6, "a").unwrap().deltas()
        );
    }

    #[test]
    fn onset_matches_parser_on_emitted_text() {
        let w = world();
        let tr = synthesize_trace(&w, "canonical", 11, "a").unwrap();
        let on = find_onset_in_texts(&OnsetParser::canonical(), &tr.token_texts).unwrap();
        assert_eq!(on.index, 40);
        assert_eq!(tr.onset, Some(40));
        assert_eq!(Some(on.answer), tr.final_answer);
        assert_eq!(tr.states.len(), 40);
    }

    #[test]
    fn cursor_is_nondecreasing_and_delta_is_commit() {
        let w = world();
        let tr = synthesize_trace(&w, "canonical", 3, "a").unwrap();
        let cur: Vec<f64> = tr.states.iter().map(|s| s.latents.unwrap().cursor).collect();
        assert!(cur.windows(2).all(|p| p[0] <= p[1]));
        assert!(tr.states.iter().all(|s| s.delta == s.latents.unwrap().commit));
    }

    #[test]
    fn noiseless_features_reconstruct_latents() {
        let w = world().with_feature_noise(0.0);
        let tr = synthesize_trace(&w, "canonical", 4, "a").unwrap();
        let m = &w.conditions[0].mixing;
        let mm = DMatrix::from_fn(16, 2, |i, j| m[i][j]);
        let pinv = mm.clone().pseudo_inverse(1e-12).unwrap();
        for s in &tr.states {
            let f = nalgebra::DVector::from_vec(s.features.as_ref().unwrap()["last_L21"].clone());
            let z = &pinv * f;
            let l = s.latents.unwrap();
            assert!((z[0] - l.commit).abs() < 1e-9);
            assert!((z[1] - l.cursor).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_commitment_without_drift() {
        let w = world().with_commit(CommitDynamics {
            start: 3.0,
            drift_rate: 0.0,
            target: 4.0,
            noise: 0.0,
        });
        for seed in 0..5 {
            let tr = synthesize_trace(&w, "canonical", seed, "a").unwrap();
            assert!(tr.deltas().iter().all(|&d| d == 3.0));
            assert_eq!(tr.final_answer, Some(Verdict::Yes));
        }
    }

    #[test]
    fn degenerate_mixing_is_rejected() {
        let mut w = world();
        w.conditions[0].mixing = vec![[1.0, 2.0]; 16];
        assert!(matches!(w.validate(), Err(WorldError::DegenerateMixing(_))));
        assert!(matches!(
            synthesize_trace(&w, "canonical", 0, "a"),
            Err(WorldError::DegenerateMixing(_))
        ));
    }

    #[test]
    fn rotated_conditions_differ_but_share_geometry() {
        let w = SyntheticWorld::new(&["a", "b"], MixingKind::Rotated, 9);
        assert_ne!(w.conditions[0].mixing, w.conditions[1].mixing);
        let gram = |m: &[[f64; 2]]| {
            let mut g = [0.0; 3];
            for r in m {
                g[0] += r[0] * r[0];
                g[1] += r[0] * r[1];
                g[2] += r[1] * r[1];
            }
            g
        };
        let (g0, g1) = (gram(&w.conditions[0].mixing), gram(&w.conditions[1].mixing));
        for k in 0..3 {
            assert!((g0[k] - g1[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn rotated_planes_are_mutually_orthogonal() {
        let w = SyntheticWorld::new(&["a", "b", "c"], MixingKind::Rotated, 4);
        for (i, a) in w.conditions.iter().enumerate() {
            for b in &w.conditions[i + 1..] {
                for p in 0..2 {
                    for q in 0..2 {
                        let dot: f64 = a.mixing.iter().zip(&b.mixing).map(|(x, y)| x[p] * y[q]).sum();
                        assert!(dot.abs() < 1e-12);
                    }
                }
            }
        }
        let r = SyntheticWorld::new(&["a", "b"], MixingKind::Random, 4);
        assert_ne!(r.conditions[0].mixing, r.conditions[1].mixing);
        assert!(r.validate().is_ok());
    }

    #[test]
    fn world_config_builds() {
        let cfg = WorldConfig::from_toml_str(
            "conditions=['x','y']\nmixing='rotated'\nmixing_seed=3\n[cursor]\nsteps=20\nthreshold=1.0\n",
        )
        .unwrap();
        let w = cfg.build().unwrap();
        assert_eq!(w.onset(), 20);
        assert_eq!(w.condition_names(), vec!["x", "y"]);
        assert!(WorldConfig::from_toml_str("conditions=['x']\nbogus=1\n").is_err());
    }
}
