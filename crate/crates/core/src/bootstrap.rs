//! Percentile bootstrap that resamples whole trajectories.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::{mean, quantile_sorted};

pub const DEFAULT_REPLICATES: usize = 2000;
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Error, PartialEq)]
pub enum BootstrapError {
    #[error("no groups to resample")]
    Empty,
    #[error("replicate count must be at least 1")]
    NoReplicates,
    #[error("alpha must lie in (0, 1), got {0}")]
    BadAlpha(f64),
    #[error("statistic undefined on the full sample")]
    Undefined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapCi {
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub replicates: usize,
    /// Replicates on which the statistic was defined.
    pub used: usize,
    pub alpha: f64,
    pub seed: u64,
}

/// Resampling RNG for replicate `b`: one independent stream per replicate.
fn replicate_rng(seed: u64, b: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(b as u64);
    rng
}

/// Bootstrap of an arbitrary statistic over groups. Replicates on which the
/// statistic is undefined are dropped and counted in `used`.
pub fn grouped_bootstrap<G, F>(
    groups: &[G],
    replicates: usize,
    alpha: f64,
    seed: u64,
    stat: F,
) -> Result<BootstrapCi, BootstrapError>
where
    G: Sync,
    F: Fn(&[&G]) -> Option<f64> + Sync,
{
    if groups.is_empty() {
        return Err(BootstrapError::Empty);
    }
    if replicates == 0 {
        return Err(BootstrapError::NoReplicates);
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(BootstrapError::BadAlpha(alpha));
    }
    let all: Vec<&G> = groups.iter().collect();
    let estimate = stat(&all).filter(|v| v.is_finite()).ok_or(BootstrapError::Undefined)?;
    let n = groups.len();
    let mut reps: Vec<f64> = (0..replicates)
        .into_par_iter()
        .filter_map(|b| {
            let mut rng = replicate_rng(seed, b);
            let sample: Vec<&G> = (0..n).map(|_| &groups[rng.random_range(0..n)]).collect();
            stat(&sample).filter(|v| v.is_finite())
        })
        .collect();
    if reps.is_empty() {
        return Err(BootstrapError::Undefined);
    }
    reps.sort_by(f64::total_cmp);
    Ok(BootstrapCi {
        estimate,
        lower: quantile_sorted(&reps, alpha / 2.0).expect("nonempty"),
        upper: quantile_sorted(&reps, 1.0 - alpha / 2.0).expect("nonempty"),
        replicates,
        used: reps.len(),
        alpha,
        seed,
    })
}

/// Mean of one value per trajectory with a percentile interval.
pub fn grouped_bootstrap_ci(
    values: &[f64],
    replicates: usize,
    alpha: f64,
    seed: u64,
) -> Result<BootstrapCi, BootstrapError> {
    grouped_bootstrap(values, replicates, alpha, seed, |s| {
        let v: Vec<f64> = s.iter().map(|&&x| x).collect();
        mean(&v)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_values_give_degenerate_interval() {
        let ci = grouped_bootstrap_ci(&[1.5; 7], 500, 0.05, 1).unwrap();
        assert_eq!((ci.estimate, ci.lower, ci.upper), (1.5, 1.5, 1.5));
    }

    #[test]
    fn single_group_interval_is_the_point() {
        let ci = grouped_bootstrap_ci(&[4.25], 100, 0.05, 1).unwrap();
        assert_eq!((ci.lower, ci.upper), (4.25, 4.25));
    }

    #[test]
    fn two_groups_span_the_extremes() {
        let ci = grouped_bootstrap_ci(&[0.0, 10.0], 10_000, 0.05, 20240601).unwrap();
        assert_eq!(ci.estimate, 5.0);
        assert!(ci.lower.abs() < 0.5 && (ci.upper - 10.0).abs() < 0.5);
    }

    #[test]
    fn seeded_and_thread_count_independent() {
        let v: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let a = grouped_bootstrap_ci(&v, 300, 0.1, 9).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| grouped_bootstrap_ci(&v, 300, 0.1, 9).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, grouped_bootstrap_ci(&v, 300, 0.1, 10).unwrap());
    }

    #[test]
    fn input_errors() {
        assert_eq!(grouped_bootstrap_ci(&[], 10, 0.05, 0), Err(BootstrapError::Empty));
        assert_eq!(grouped_bootstrap_ci(&[1.0], 0, 0.05, 0), Err(BootstrapError::NoReplicates));
        assert_eq!(grouped_bootstrap_ci(&[1.0], 10, 1.0, 0), Err(BootstrapError::BadAlpha(1.0)));
    }
}
