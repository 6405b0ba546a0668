use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ReadoutError;
use crate::scheme::Verdict;
use crate::trace::TrajectoryTrace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupInfo {
    pub id: String,
    pub condition: String,
    pub onset: usize,
    pub answer: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub features: Vec<f64>,
    pub delta: f64,
    /// t / onset, in [0, 1).
    pub progress: f64,
    pub line_index: usize,
    pub t: usize,
    /// Index into `ProbeDataset::groups`.
    pub group: usize,
}

/// State-level rows grouped by trajectory. Rows of a group are contiguous and
/// ordered by `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeDataset {
    pub feature: String,
    pub dim: usize,
    pub groups: Vec<GroupInfo>,
    pub rows: Vec<ProbeRow>,
}

impl ProbeDataset {
    /// Rows from every parsed trace; unparsed traces carry no states and are
    /// skipped.
    pub fn from_traces(traces: &[TrajectoryTrace], feature: &str) -> Result<Self, ReadoutError> {
        let mut ds = ProbeDataset {
            feature: feature.to_string(),
            dim: 0,
            groups: Vec::new(),
            rows: Vec::new(),
        };
        let mut dim = None;
        for tr in traces {
            let Some((onset, answer)) = tr.parsed_view() else { continue };
            if onset == 0 {
                continue;
            }
            let g = ds.groups.len();
            ds.groups.push(GroupInfo {
                id: tr.id.clone(),
                condition: tr.condition.clone(),
                onset,
                answer,
            });
            for s in &tr.states {
                let f = s
                    .features
                    .as_ref()
                    .and_then(|m| m.get(feature))
                    .ok_or_else(|| ReadoutError::MissingFeature {
                        id: tr.id.clone(),
                        t: s.t,
                        feature: feature.to_string(),
                    })?;
                let expected = *dim.get_or_insert(f.len());
                if f.len() != expected {
                    return Err(ReadoutError::DimensionMismatch {
                        feature: feature.to_string(),
                        got: f.len(),
                        expected,
                    });
                }
                if !s.delta.is_finite() || f.iter().any(|v| !v.is_finite()) {
                    return Err(ReadoutError::NonFinite);
                }
                ds.rows.push(ProbeRow {
                    features: f.clone(),
                    delta: s.delta,
                    progress: s.t as f64 / onset as f64,
                    line_index: tr.line_index(s.t),
                    t: s.t,
                    group: g,
                });
            }
        }
        ds.dim = dim.unwrap_or(0);
        ds.rows.sort_by_key(|r| (r.group, r.t));
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn n_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn conditions(&self) -> Vec<String> {
        self.groups
            .iter()
            .map(|g| g.condition.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Dataset restricted to the listed groups, re-indexed in the given order.
    pub fn subset(&self, groups: &[usize]) -> ProbeDataset {
        let mut map = vec![usize::MAX; self.groups.len()];
        for (new, &old) in groups.iter().enumerate() {
            map[old] = new;
        }
        let mut rows: Vec<ProbeRow> = self
            .rows
            .iter()
            .filter(|r| map[r.group] != usize::MAX)
            .map(|r| ProbeRow {
                group: map[r.group],
                ..r.clone()
            })
            .collect();
        rows.sort_by_key(|r| (r.group, r.t));
        ProbeDataset {
            feature: self.feature.clone(),
            dim: self.dim,
            groups: groups.iter().map(|&g| self.groups[g].clone()).collect(),
            rows,
        }
    }

    pub fn condition(&self, name: &str) -> Result<ProbeDataset, ReadoutError> {
        let idx: Vec<usize> = (0..self.groups.len()).filter(|&g| self.groups[g].condition == name).collect();
        if idx.is_empty() {
            return Err(ReadoutError::MissingCondition(name.to_string()));
        }
        Ok(self.subset(&idx))
    }

    /// Concatenation; group indices of `other` are shifted.
    pub fn concat(parts: &[&ProbeDataset]) -> ProbeDataset {
        let mut out = ProbeDataset {
            feature: parts.first().map(|p| p.feature.clone()).unwrap_or_default(),
            dim: parts.first().map_or(0, |p| p.dim),
            groups: Vec::new(),
            rows: Vec::new(),
        };
        for p in parts {
            let base = out.groups.len();
            out.groups.extend(p.groups.iter().cloned());
            out.rows.extend(p.rows.iter().map(|r| ProbeRow {
                group: r.group + base,
                ..r.clone()
            }));
        }
        out
    }

    pub fn features(&self) -> Vec<&[f64]> {
        self.rows.iter().map(|r| r.features.as_slice()).collect()
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.delta).collect()
    }

    pub fn progress(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.progress).collect()
    }

    pub fn group_ids(&self) -> BTreeSet<&str> {
        self.groups.iter().map(|g| g.id.as_str()).collect()
    }

    /// Row index ranges per group.
    pub fn group_ranges(&self) -> Vec<std::ops::Range<usize>> {
        let mut out = vec![0..0; self.groups.len()];
        let mut i = 0;
        while i < self.rows.len() {
            let g = self.rows[i].group;
            let start = i;
            while i < self.rows.len() && self.rows[i].group == g {
                i += 1;
            }
            out[g] = start..i;
        }
        out
    }
}

/// Splits by trajectory group; `train_fraction` of the groups (rounded, at
/// least one on each side) go to train.
pub fn grouped_split(
    ds: &ProbeDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(ProbeDataset, ProbeDataset), ReadoutError> {
    let n = ds.n_groups();
    if n < 2 {
        return Err(ReadoutError::TooFewGroups { needed: 2, have: n });
    }
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(ReadoutError::BadFraction(train_fraction));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = ((train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let (mut train, mut test) = (order[..k].to_vec(), order[k..].to_vec());
    train.sort_unstable();
    test.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&test)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{synthesize_batch, MixingKind, SyntheticWorld};

    fn data(n: usize) -> ProbeDataset {
        let w = SyntheticWorld::new(&["a", "b"], MixingKind::Shared, 3);
        ProbeDataset::from_traces(&synthesize_batch(&w, n, 1).unwrap(), "last_L21").unwrap()
    }

    #[test]
    fn builds_rows_per_state() {
        let ds = data(3);
        assert_eq!(ds.n_groups(), 6);
        assert_eq!(ds.len(), 6 * 40);
        assert_eq!(ds.dim, 16);
        assert_eq!(ds.conditions(), vec!["a", "b"]);
        assert!(ds.rows.iter().all(|r| (0.0..1.0).contains(&r.progress)));
        assert_eq!(ds.group_ranges()[1], 40..80);
    }

    #[test]
    fn split_counts_and_disjointness() {
        let ds = data(5);
        let (tr, te) = grouped_split(&ds, 0.8, 4).unwrap();
        assert_eq!((tr.n_groups(), te.n_groups()), (8, 2));
        assert!(tr.group_ids().is_disjoint(&te.group_ids()));
        assert_eq!(tr.len() + te.len(), ds.len());
        assert_eq!(grouped_split(&ds, 0.8, 4).unwrap().1, te);
    }

    #[test]
    fn every_group_is_tested_across_seeds() {
        let ds = data(5);
        let mut seen = BTreeSet::new();
        for seed in 0..10 {
            let (_, te) = grouped_split(&ds, 0.5, seed).unwrap();
            seen.extend(te.groups.iter().map(|g| g.id.clone()));
        }
        assert_eq!(seen.len(), 10);
    }

    #[test]
    fn single_group_cannot_split() {
        let ds = data(1).condition("a").unwrap();
        assert!(matches!(grouped_split(&ds, 0.5, 0), Err(ReadoutError::TooFewGroups { .. })));
    }

    #[test]
    fn missing_feature_is_reported() {
        let w = SyntheticWorld::new(&["a"], MixingKind::Shared, 3);
        let traces = synthesize_batch(&w, 1, 1).unwrap();
        assert!(matches!(
            ProbeDataset::from_traces(&traces, "nope"),
            Err(ReadoutError::MissingFeature { .. })
        ));
    }
}
