use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{fit_factorizer, Control, FactorConfig, FactorEncoder, FactorError};
use crate::bootstrap::{grouped_bootstrap, BootstrapCi};
use crate::readout::{grouped_split, ridge_fit, ridge_fit_many, ProbeDataset, ReadoutModel};
use crate::stats::{mean, pearson};
use crate::summary::BootstrapSettings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleSettings {
    /// Fraction of test groups used to fit the post-hoc probes.
    pub probe_fraction: f64,
    pub probe_seeds: Vec<u64>,
    pub lambda: f64,
    pub boot: BootstrapSettings,
}

impl Default for RoleSettings {
    fn default() -> Self {
        Self {
            probe_fraction: 0.5,
            probe_seeds: (0..5).collect(),
            lambda: 1.0,
            boot: BootstrapSettings::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRoles {
    pub probe_seed: u64,
    pub perf_u_delta: f64,
    pub perf_v_delta: f64,
    pub progress_u: f64,
    pub progress_v: f64,
    pub line_acc_u: f64,
    pub line_acc_v: f64,
    pub perf_u_cursor: f64,
    pub perf_v_cursor: f64,
    pub commitment_gap: f64,
    pub cursor_gap: f64,
    /// Out-of-sample R² of the v→δ probe.
    pub leak_delta_from_v: f64,
    /// Out-of-sample R² of the u→progress probe.
    pub leak_cursor_from_u: f64,
    pub commitment_gap_ci: BootstrapCi,
    pub cursor_gap_ci: BootstrapCi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleReport {
    pub encoder_seed: u64,
    pub control: Control,
    pub probe_seeds: Vec<u64>,
    pub perf_u_delta: f64,
    pub perf_v_delta: f64,
    pub perf_u_cursor: f64,
    pub perf_v_cursor: f64,
    pub commitment_gap: f64,
    pub cursor_gap: f64,
    pub leak_delta_from_v: f64,
    pub leak_cursor_from_u: f64,
    pub per_seed: Vec<SeedRoles>,
}

/// Per-row probe outputs of one evaluation group.
#[derive(Default)]
struct GroupEval {
    delta: Vec<f64>,
    u_delta: Vec<f64>,
    v_delta: Vec<f64>,
    progress: Vec<f64>,
    u_progress: Vec<f64>,
    v_progress: Vec<f64>,
    u_line_ok: Vec<bool>,
    v_line_ok: Vec<bool>,
}

fn corr0(a: &[f64], b: &[f64]) -> f64 {
    pearson(a, b).unwrap_or(0.0)
}

fn frac(xs: impl Iterator<Item = bool>) -> f64 {
    let (mut hit, mut n) = (0usize, 0usize);
    for x in xs {
        n += 1;
        hit += x as usize;
    }
    if n == 0 {
        0.0
    } else {
        hit as f64 / n as f64
    }
}

fn oos_r2(pred: &[f64], truth: &[f64]) -> f64 {
    let m = mean(truth).unwrap_or(0.0);
    let sst: f64 = truth.iter().map(|t| (t - m).powi(2)).sum();
    let sse: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    if sst > 0.0 {
        1.0 - sse / sst
    } else {
        0.0
    }
}

struct Perf {
    u_delta: f64,
    v_delta: f64,
    progress_u: f64,
    progress_v: f64,
    line_u: f64,
    line_v: f64,
}

impl Perf {
    fn of(groups: &[&GroupEval]) -> Self {
        let cat = |f: fn(&GroupEval) -> &Vec<f64>| groups.iter().flat_map(|g| f(g).iter().copied()).collect::<Vec<f64>>();
        let d = cat(|g| &g.delta);
        let p = cat(|g| &g.progress);
        Self {
            u_delta: corr0(&cat(|g| &g.u_delta), &d),
            v_delta: corr0(&cat(|g| &g.v_delta), &d),
            progress_u: corr0(&cat(|g| &g.u_progress), &p),
            progress_v: corr0(&cat(|g| &g.v_progress), &p),
            line_u: frac(groups.iter().flat_map(|g| g.u_line_ok.iter().copied())),
            line_v: frac(groups.iter().flat_map(|g| g.v_line_ok.iter().copied())),
        }
    }

    fn cursor_u(&self) -> f64 {
        (self.progress_u + self.line_u) / 2.0
    }

    fn cursor_v(&self) -> f64 {
        (self.progress_v + self.line_v) / 2.0
    }

    fn commitment_gap(&self) -> f64 {
        self.u_delta - self.v_delta
    }

    fn cursor_gap(&self) -> f64 {
        self.cursor_v() - self.cursor_u()
    }
}

fn refs(v: &[Vec<f64>]) -> Vec<&[f64]> {
    v.iter().map(Vec::as_slice).collect()
}

/// Fitted δ, progress and line-class probes of one factor.
struct FactorProbes {
    delta: ReadoutModel,
    progress: ReadoutModel,
    lines: Vec<ReadoutModel>,
    classes: Vec<usize>,
}

impl FactorProbes {
    fn fit(z: &[Vec<f64>], ds: &ProbeDataset, lambda: f64) -> Result<Self, FactorError> {
        let r = refs(z);
        let classes: Vec<usize> = ds
            .rows
            .iter()
            .map(|row| row.line_index)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect();
        let onehot: Vec<Vec<f64>> = classes
            .iter()
            .map(|&c| ds.rows.iter().map(|row| (row.line_index == c) as u8 as f64).collect())
            .collect();
        Ok(Self {
            delta: ridge_fit(&r, &ds.deltas(), lambda)?,
            progress: ridge_fit(&r, &ds.progress(), lambda)?,
            lines: ridge_fit_many(&r, &onehot, lambda)?,
            classes,
        })
    }

    fn line_of(&self, z: &[f64]) -> usize {
        let scores: Vec<f64> = self.lines.iter().map(|m| m.predict_one(z)).collect();
        let best = scores
            .iter()
            .enumerate()
            .fold(0, |b, (i, s)| if *s > scores[b] { i } else { b });
        self.classes[best]
    }
}

fn seed_roles(
    enc: &FactorEncoder,
    test: &ProbeDataset,
    probe_seed: u64,
    settings: &RoleSettings,
) -> Result<SeedRoles, FactorError> {
    let (fit_part, eval_part) = grouped_split(test, settings.probe_fraction, probe_seed)?;
    let (fu, fv) = enc.encode(&fit_part.features())?;
    let pu = FactorProbes::fit(&fu, &fit_part, settings.lambda)?;
    let pv = FactorProbes::fit(&fv, &fit_part, settings.lambda)?;
    let (eu, ev) = enc.encode(&eval_part.features())?;

    let mut groups: BTreeMap<usize, GroupEval> = BTreeMap::new();
    for (i, row) in eval_part.rows.iter().enumerate() {
        let g = groups.entry(row.group).or_default();
        g.delta.push(row.delta);
        g.progress.push(row.progress);
        g.u_delta.push(pu.delta.predict_one(&eu[i]));
        g.v_delta.push(pv.delta.predict_one(&ev[i]));
        g.u_progress.push(pu.progress.predict_one(&eu[i]));
        g.v_progress.push(pv.progress.predict_one(&ev[i]));
        g.u_line_ok.push(pu.line_of(&eu[i]) == row.line_index);
        g.v_line_ok.push(pv.line_of(&ev[i]) == row.line_index);
    }
    let groups: Vec<GroupEval> = groups.into_values().collect();
    let all: Vec<&GroupEval> = groups.iter().collect();
    let perf = Perf::of(&all);

    let b = &settings.boot;
    let boot_seed = b.seed ^ probe_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    let commitment_gap_ci = grouped_bootstrap(&groups, b.replicates, b.alpha, boot_seed, |s| {
        Some(Perf::of(s).commitment_gap())
    })?;
    let cursor_gap_ci = grouped_bootstrap(&groups, b.replicates, b.alpha, boot_seed, |s| Some(Perf::of(s).cursor_gap()))?;

    let cat = |f: fn(&GroupEval) -> &Vec<f64>| groups.iter().flat_map(|g| f(g).iter().copied()).collect::<Vec<f64>>();
    Ok(SeedRoles {
        probe_seed,
        perf_u_delta: perf.u_delta,
        perf_v_delta: perf.v_delta,
        progress_u: perf.progress_u,
        progress_v: perf.progress_v,
        line_acc_u: perf.line_u,
        line_acc_v: perf.line_v,
        perf_u_cursor: perf.cursor_u(),
        perf_v_cursor: perf.cursor_v(),
        commitment_gap: perf.commitment_gap(),
        cursor_gap: perf.cursor_gap(),
        leak_delta_from_v: oos_r2(&cat(|g| &g.v_delta), &cat(|g| &g.delta)),
        leak_cursor_from_u: oos_r2(&cat(|g| &g.u_progress), &cat(|g| &g.progress)),
        commitment_gap_ci,
        cursor_gap_ci,
    })
}

/// Post-hoc role probes on held-out groups: for each probe seed, fresh ridge
/// probes are fit on part of the test groups and scored on the rest.
pub fn factor_role_report(
    enc: &FactorEncoder,
    test: &ProbeDataset,
    settings: &RoleSettings,
) -> Result<RoleReport, FactorError> {
    if test.n_groups() < 4 {
        return Err(FactorError::TooFewGroups {
            needed: 4,
            have: test.n_groups(),
        });
    }
    if settings.probe_seeds.is_empty() {
        return Err(FactorError::Config("no probe seeds".into()));
    }
    let per_seed: Vec<SeedRoles> = settings
        .probe_seeds
        .iter()
        .map(|&s| seed_roles(enc, test, s, settings))
        .collect::<Result<_, _>>()?;
    let avg = |f: fn(&SeedRoles) -> f64| mean(&per_seed.iter().map(f).collect::<Vec<_>>()).unwrap_or(f64::NAN);
    Ok(RoleReport {
        encoder_seed: enc.seed,
        control: enc.control,
        probe_seeds: settings.probe_seeds.clone(),
        perf_u_delta: avg(|s| s.perf_u_delta),
        perf_v_delta: avg(|s| s.perf_v_delta),
        perf_u_cursor: avg(|s| s.perf_u_cursor),
        perf_v_cursor: avg(|s| s.perf_v_cursor),
        commitment_gap: avg(|s| s.commitment_gap),
        cursor_gap: avg(|s| s.cursor_gap),
        leak_delta_from_v: avg(|s| s.leak_delta_from_v),
        leak_cursor_from_u: avg(|s| s.leak_cursor_from_u),
        per_seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedRoles {
    pub control: Control,
    pub seeds: Vec<u64>,
    pub reports: Vec<RoleReport>,
    /// Bootstrap over encoder seeds of the per-seed mean gaps.
    pub commitment_gap: BootstrapCi,
    pub cursor_gap: BootstrapCi,
}

/// Trains one encoder per seed on `train` and reports roles on `test`.
pub fn multi_seed_roles(
    train: &ProbeDataset,
    test: &ProbeDataset,
    cfg: &FactorConfig,
    seeds: &[u64],
    control: Control,
    settings: &RoleSettings,
) -> Result<MultiSeedRoles, FactorError> {
    if seeds.is_empty() {
        return Err(FactorError::Config("no encoder seeds".into()));
    }
    if !train.group_ids().is_disjoint(&test.group_ids()) {
        return Err(FactorError::Config("test groups overlap training groups".into()));
    }
    let reports: Vec<RoleReport> = seeds
        .par_iter()
        .map(|&s| {
            let enc = fit_factorizer(train, cfg, s, control)?;
            factor_role_report(&enc, test, settings)
        })
        .collect::<Result<_, _>>()?;
    let cg: Vec<f64> = reports.iter().map(|r| r.commitment_gap).collect();
    let kg: Vec<f64> = reports.iter().map(|r| r.cursor_gap).collect();
    let b = &settings.boot;
    Ok(MultiSeedRoles {
        control,
        seeds: seeds.to_vec(),
        commitment_gap: crate::bootstrap::grouped_bootstrap_ci(&cg, b.replicates, b.alpha, b.seed)?,
        cursor_gap: crate::bootstrap::grouped_bootstrap_ci(&kg, b.replicates, b.alpha, b.seed)?,
        reports,
    })
}
