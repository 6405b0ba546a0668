use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{grouped_split, ridge_fit, ProbeDataset, ReadoutError, ReadoutModel};
use crate::commitment::commitment_time_series;
use crate::scheme::Verdict;
use crate::stats::{mean, pearson, population_std, sample_std};

/// |true δ| threshold for the high-margin winner accuracy.
pub const HIGH_MARGIN: f64 = 5.0;
/// Margin used when locating commitment times for tau MAE.
pub const TAU_GAMMA: f64 = 2.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReadoutMetrics {
    pub n: usize,
    pub corr: Option<f64>,
    pub high_margin_acc: Option<f64>,
    pub n_high_margin: usize,
    /// Mean |predicted − true| commitment time over trajectories where both
    /// are defined; predicted times use the true onset and final answer.
    pub tau_mae: Option<f64>,
    pub n_tau: usize,
}

pub fn readout_metrics(ds: &ProbeDataset, pred: &[f64]) -> Result<ReadoutMetrics, ReadoutError> {
    if pred.len() != ds.len() {
        return Err(ReadoutError::LengthMismatch {
            got: pred.len(),
            expected: ds.len(),
        });
    }
    let truth = ds.deltas();
    let high: Vec<bool> = truth
        .iter()
        .zip(pred)
        .filter(|(t, _)| t.abs() >= HIGH_MARGIN)
        .map(|(t, p)| Verdict::from_delta(*t) == Verdict::from_delta(*p))
        .collect();
    let mut tau_err = Vec::new();
    for (g, range) in ds.group_ranges().into_iter().enumerate() {
        let answer = ds.groups[g].answer;
        let t_true = commitment_time_series(&truth[range.clone()], answer, TAU_GAMMA);
        let t_pred = commitment_time_series(&pred[range], answer, TAU_GAMMA);
        if let (Some(a), Some(b)) = (t_true, t_pred) {
            tau_err.push(a.abs_diff(b) as f64);
        }
    }
    Ok(ReadoutMetrics {
        n: ds.len(),
        corr: pearson(pred, &truth),
        high_margin_acc: (!high.is_empty()).then(|| high.iter().filter(|&&h| h).count() as f64 / high.len() as f64),
        n_high_margin: high.len(),
        tau_mae: mean(&tau_err),
        n_tau: tau_err.len(),
    })
}

/// Positive affine map giving `pred` the mean and spread of `target`.
pub fn affine_align(pred: &[f64], target: &[f64]) -> Result<Vec<f64>, ReadoutError> {
    let (mt, st) = match (mean(target), population_std(target)) {
        (Some(m), Some(s)) if s > 0.0 => (m, s),
        _ => return Err(ReadoutError::DegenerateTarget),
    };
    let (mp, sp) = match (mean(pred), population_std(pred)) {
        (Some(m), Some(s)) if s > 0.0 => (m, s),
        _ => return Err(ReadoutError::DegeneratePredictions),
    };
    let a = st / sp;
    Ok(pred.iter().map(|p| mt + a * (p - mp)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransferMode {
    Within,
    Pooled,
    Loco,
    CanonicalRaw,
    CanonicalAffine,
}

impl TransferMode {
    pub const ALL: [TransferMode; 5] = [
        TransferMode::Within,
        TransferMode::Pooled,
        TransferMode::Loco,
        TransferMode::CanonicalRaw,
        TransferMode::CanonicalAffine,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TransferMode::Within => "within",
            TransferMode::Pooled => "pooled",
            TransferMode::Loco => "loco",
            TransferMode::CanonicalRaw => "canonical-raw",
            TransferMode::CanonicalAffine => "canonical-affine",
        }
    }
}

impl fmt::Display for TransferMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransferMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown mode {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSettings {
    pub lambda: f64,
    pub train_fraction: f64,
    pub seeds: Vec<u64>,
    /// Training condition for the canonical-* modes.
    pub source: String,
}

impl Default for TransferSettings {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            train_fraction: 0.8,
            seeds: (0..10).collect(),
            source: "canonical".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub mode: TransferMode,
    pub train: String,
    pub test: String,
    pub lambda: f64,
    pub n_splits: usize,
    pub corr_mean: Option<f64>,
    pub corr_std: Option<f64>,
    pub acc_mean: Option<f64>,
    pub tau_mae_mean: Option<f64>,
}

struct Split {
    train: BTreeMap<String, ProbeDataset>,
    test: BTreeMap<String, ProbeDataset>,
}

fn split_all(ds: &ProbeDataset, conditions: &[String], frac: f64, seed: u64) -> Result<Split, ReadoutError> {
    let mut s = Split {
        train: BTreeMap::new(),
        test: BTreeMap::new(),
    };
    for c in conditions {
        let (tr, te) = grouped_split(&ds.condition(c)?, frac, seed)?;
        s.train.insert(c.clone(), tr);
        s.test.insert(c.clone(), te);
    }
    Ok(s)
}

fn fit(parts: &[&ProbeDataset], lambda: f64) -> Result<ReadoutModel, ReadoutError> {
    let joined = ProbeDataset::concat(parts);
    ridge_fit(&joined.features(), &joined.deltas(), lambda)
}

/// Metrics for one seed: (train label, test condition) → metrics.
fn eval_seed(
    ds: &ProbeDataset,
    conditions: &[String],
    mode: TransferMode,
    settings: &TransferSettings,
    seed: u64,
) -> Result<Vec<(String, String, ReadoutMetrics)>, ReadoutError> {
    let sp = split_all(ds, conditions, settings.train_fraction, seed)?;
    let lambda = settings.lambda;
    let mut out = Vec::new();
    let score = |m: &ReadoutModel, test: &ProbeDataset| readout_metrics(test, &m.predict(&test.features()));
    match mode {
        TransferMode::Within => {
            for c in conditions {
                let m = fit(&[&sp.train[c]], lambda)?;
                out.push((c.clone(), c.clone(), score(&m, &sp.test[c])?));
            }
        }
        TransferMode::Pooled => {
            let parts: Vec<&ProbeDataset> = sp.train.values().collect();
            let m = fit(&parts, lambda)?;
            for c in conditions {
                out.push(("pooled".into(), c.clone(), score(&m, &sp.test[c])?));
            }
        }
        TransferMode::Loco => {
            for c in conditions {
                let parts: Vec<&ProbeDataset> = sp.train.iter().filter(|(k, _)| *k != c).map(|(_, v)| v).collect();
                let m = fit(&parts, lambda)?;
                out.push((format!("all-but-{c}"), c.clone(), score(&m, &sp.test[c])?));
            }
        }
        TransferMode::CanonicalRaw | TransferMode::CanonicalAffine => {
            let src = &settings.source;
            let m = fit(&[&sp.train[src]], lambda)?;
            for c in conditions.iter().filter(|c| *c != src) {
                let test = &sp.test[c];
                let mut pred = m.predict(&test.features());
                if mode == TransferMode::CanonicalAffine {
                    // Distribution-level target: the shifted condition's train δ.
                    pred = affine_align(&pred, &sp.train[c].deltas())?;
                }
                out.push((src.clone(), c.clone(), readout_metrics(test, &pred)?));
            }
        }
    }
    Ok(out)
}

fn mean_defined(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    mean(&v)
}

/// Trains and evaluates readouts per `mode`, averaging over seeds. Test groups
/// are held out from every condition's training data.
pub fn transfer_eval(
    ds: &ProbeDataset,
    mode: TransferMode,
    settings: &TransferSettings,
) -> Result<Vec<TransferRow>, ReadoutError> {
    let conditions = ds.conditions();
    if conditions.is_empty() {
        return Err(ReadoutError::Empty);
    }
    let cross = matches!(
        mode,
        TransferMode::Loco | TransferMode::CanonicalRaw | TransferMode::CanonicalAffine
    );
    if cross && conditions.len() < 2 {
        return Err(ReadoutError::NeedConditions {
            mode: mode.to_string(),
        });
    }
    if matches!(mode, TransferMode::CanonicalRaw | TransferMode::CanonicalAffine) && !conditions.contains(&settings.source) {
        return Err(ReadoutError::MissingCondition(settings.source.clone()));
    }
    let per_seed: Vec<Vec<(String, String, ReadoutMetrics)>> = settings
        .seeds
        .par_iter()
        .map(|&s| eval_seed(ds, &conditions, mode, settings, s))
        .collect::<Result<_, _>>()?;

    let mut cells: BTreeMap<(String, String), Vec<ReadoutMetrics>> = BTreeMap::new();
    let mut order = Vec::new();
    for seed_rows in per_seed {
        for (train, test, m) in seed_rows {
            let key = (train, test);
            if !cells.contains_key(&key) {
                order.push(key.clone());
            }
            cells.entry(key).or_default().push(m);
        }
    }
    Ok(order
        .into_iter()
        .map(|key| {
            let ms = &cells[&key];
            let corrs: Vec<f64> = ms.iter().filter_map(|m| m.corr).collect();
            TransferRow {
                mode,
                train: key.0,
                test: key.1,
                lambda: settings.lambda,
                n_splits: ms.len(),
                corr_mean: mean(&corrs),
                corr_std: if corrs.len() >= 2 { sample_std(&corrs) } else { None },
                acc_mean: mean_defined(ms.iter().map(|m| m.high_margin_acc)),
                tau_mae_mean: mean_defined(ms.iter().map(|m| m.tau_mae)),
            }
        })
        .collect())
}

/// Within-condition rows for each λ.
pub fn lambda_sweep(
    ds: &ProbeDataset,
    lambdas: &[f64],
    settings: &TransferSettings,
) -> Result<Vec<TransferRow>, ReadoutError> {
    let mut out = Vec::new();
    for &lambda in lambdas {
        let s = TransferSettings {
            lambda,
            ..settings.clone()
        };
        out.extend(transfer_eval(ds, TransferMode::Within, &s)?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub condition: String,
    pub train_groups: usize,
    pub n_seeds: usize,
    pub corr_mean: Option<f64>,
}

/// Test correlation as a function of training group count. Per seed the test
/// groups are fixed and training sets are nested prefixes of one shuffled pool.
pub fn sample_size_scaling(
    ds: &ProbeDataset,
    sizes: &[usize],
    test_fraction: f64,
    seeds: &[u64],
    lambda: f64,
) -> Result<Vec<ScalingRow>, ReadoutError> {
    let mut rows = Vec::new();
    for c in ds.conditions() {
        let cd = ds.condition(&c)?;
        let n = cd.n_groups();
        let n_test = ((test_fraction * n as f64).round() as usize).clamp(1, n.saturating_sub(1).max(1));
        let pool = n - n_test;
        if let Some(&bad) = sizes.iter().find(|&&k| k == 0 || k > pool) {
            return Err(ReadoutError::TooFewGroups {
                needed: bad.max(1) + n_test,
                have: n,
            });
        }
        let per_seed: Vec<Vec<Option<f64>>> = seeds
            .par_iter()
            .map(|&seed| {
                let mut order: Vec<usize> = (0..n).collect();
                order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let test = cd.subset(&order[..n_test]);
                sizes
                    .iter()
                    .map(|&k| {
                        let m = fit(&[&cd.subset(&order[n_test..n_test + k])], lambda)?;
                        Ok(readout_metrics(&test, &m.predict(&test.features()))?.corr)
                    })
                    .collect::<Result<Vec<_>, ReadoutError>>()
            })
            .collect::<Result<_, _>>()?;
        for (i, &k) in sizes.iter().enumerate() {
            rows.push(ScalingRow {
                condition: c.clone(),
                train_groups: k,
                n_seeds: seeds.len(),
                corr_mean: mean_defined(per_seed.iter().map(|s| s[i])),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::readout::{GroupInfo, ProbeRow};

    fn ds_from(series: &[Vec<f64>], answer: Verdict) -> ProbeDataset {
        let mut ds = ProbeDataset {
            feature: "f".into(),
            dim: 1,
            groups: Vec::new(),
            rows: Vec::new(),
        };
        for (g, s) in series.iter().enumerate() {
            ds.groups.push(GroupInfo {
                id: format!("g{g}"),
                condition: "c".into(),
                onset: s.len(),
                answer,
            });
            for (t, &d) in s.iter().enumerate() {
                ds.rows.push(ProbeRow {
                    features: vec![d],
                    delta: d,
                    progress: t as f64 / s.len() as f64,
                    line_index: 0,
                    t,
                    group: g,
                });
            }
        }
        ds
    }

    #[test]
    fn perfect_predictions() {
        let ds = ds_from(&[vec![-6.0, 1.0, 3.0, 7.0], vec![0.5, 2.5, 9.0]], Verdict::Yes);
        let m = readout_metrics(&ds, &ds.deltas()).unwrap();
        assert_eq!(m.corr, Some(1.0));
        assert_eq!(m.high_margin_acc, Some(1.0));
        assert_eq!(m.n_high_margin, 3);
        assert_eq!(m.tau_mae, Some(0.0));
    }

    #[test]
    fn monotone_distortion_keeps_acc_and_tau() {
        let ds = ds_from(&[vec![-6.0, -1.0, 0.5, 3.0, 7.0, 12.0]], Verdict::Yes);
        // Odd, strictly increasing and fixed at ±γ, so commit times agree.
        let pred: Vec<f64> = ds.deltas().iter().map(|&d| 2.0 * (d / 2.0).tanh() / 1f64.tanh()).collect();
        let m = readout_metrics(&ds, &pred).unwrap();
        assert_eq!(m.high_margin_acc, Some(1.0));
        assert_eq!(m.tau_mae, Some(0.0));
        assert!(m.corr.unwrap() < 1.0);
    }

    #[test]
    fn no_high_margin_states() {
        let ds = ds_from(&[vec![1.0, 2.0]], Verdict::Yes);
        assert_eq!(readout_metrics(&ds, &[1.0, 2.0]).unwrap().high_margin_acc, None);
        assert!(readout_metrics(&ds, &[1.0]).is_err());
    }

    #[test]
    fn affine_alignment_cases() {
        let target = [1.0, 2.0, 4.0, 8.0];
        assert_eq!(affine_align(&target, &target).unwrap(), target.to_vec());
        let pred: Vec<f64> = target.iter().map(|t| 2.0 * t + 3.0).collect();
        for (a, t) in affine_align(&pred, &target).unwrap().iter().zip(&target) {
            assert!((a - t).abs() < 1e-12);
        }
        assert_eq!(affine_align(&[1.0, 1.0], &target), Err(ReadoutError::DegeneratePredictions));
        assert_eq!(affine_align(&pred, &[2.0]), Err(ReadoutError::DegenerateTarget));
    }

    #[test]
    fn mode_names_roundtrip() {
        for m in TransferMode::ALL {
            assert_eq!(m.as_str().parse::<TransferMode>().unwrap(), m);
        }
        assert!("bogus".parse::<TransferMode>().is_err());
    }
}
