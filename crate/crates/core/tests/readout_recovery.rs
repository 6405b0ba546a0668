use std::time::Instant;

use commitlens::readout::{
    affine_align, grouped_split, readout_metrics, ridge_fit, sample_size_scaling, transfer_eval, ProbeDataset,
    TransferMode, TransferSettings,
};
use commitlens::stats::pearson;
use commitlens::synthetic::{synthesize_batch, MixingKind, SyntheticWorld};
use proptest::prelude::*;

fn dataset(conditions: &[&str], kind: MixingKind, noise: f64, per_condition: usize, seed: u64) -> ProbeDataset {
    let world = SyntheticWorld::new(conditions, kind, seed).with_feature_noise(noise);
    let traces = synthesize_batch(&world, per_condition, seed + 1).unwrap();
    ProbeDataset::from_traces(&traces, &world.feature_name).unwrap()
}

fn settings(seeds: std::ops::Range<u64>) -> TransferSettings {
    TransferSettings {
        seeds: seeds.collect(),
        ..TransferSettings::default()
    }
}

fn mean_corr(ds: &ProbeDataset, mode: TransferMode, s: &TransferSettings) -> f64 {
    let rows = transfer_eval(ds, mode, s).unwrap();
    rows.iter().map(|r| r.corr_mean.unwrap()).sum::<f64>() / rows.len() as f64
}

#[test]
fn within_condition_readout_recovers_delta() {
    let start = Instant::now();
    let noiseless = dataset(&["canonical"], MixingKind::Shared, 0.0, 40, 3);
    let rows = transfer_eval(&noiseless, TransferMode::Within, &settings(0..1)).unwrap();
    assert!(rows[0].corr_mean.unwrap() >= 0.999, "{rows:?}");

    let noisy = dataset(&["canonical"], MixingKind::Shared, 0.1, 40, 3);
    let rows = transfer_eval(&noisy, TransferMode::Within, &settings(0..10)).unwrap();
    assert_eq!(rows[0].n_splits, 10);
    assert!(rows[0].corr_mean.unwrap() >= 0.95, "{rows:?}");
    assert!(start.elapsed().as_secs_f64() < 60.0);
}

#[test]
fn shared_mixing_transfers_and_rotated_mixing_does_not() {
    let s = settings(0..5);
    let shared = dataset(&["canonical", "prompt_shift", "verbalizer_shift"], MixingKind::Shared, 0.1, 30, 5);
    let within = mean_corr(&shared, TransferMode::Within, &s);
    let loco = mean_corr(&shared, TransferMode::Loco, &s);
    assert!((within - loco).abs() < 0.02, "within {within}, loco {loco}");

    let rotated = dataset(&["canonical", "prompt_shift", "verbalizer_shift"], MixingKind::Rotated, 0.1, 30, 5);
    let pooled = mean_corr(&rotated, TransferMode::Pooled, &s);
    let loco = mean_corr(&rotated, TransferMode::Loco, &s);
    assert!(pooled - loco >= 0.3, "pooled {pooled}, loco {loco}");
}

#[test]
fn canonical_affine_rows_keep_raw_correlations() {
    let ds = dataset(&["canonical", "prompt_shift"], MixingKind::Rotated, 0.1, 20, 8);
    let s = settings(0..3);
    let raw = transfer_eval(&ds, TransferMode::CanonicalRaw, &s).unwrap();
    let aff = transfer_eval(&ds, TransferMode::CanonicalAffine, &s).unwrap();
    for (r, a) in raw.iter().zip(&aff) {
        assert_eq!(r.test, a.test);
        assert!((r.corr_mean.unwrap() - a.corr_mean.unwrap()).abs() < 1e-9);
    }
}

#[test]
fn grouped_splits_never_share_trajectories() {
    let ds = dataset(&["canonical", "prompt_shift"], MixingKind::Shared, 0.1, 15, 2);
    for seed in 0..20 {
        let (train, test) = grouped_split(&ds, 0.7, seed).unwrap();
        assert!(train.group_ids().is_disjoint(&test.group_ids()));
        assert_eq!(train.n_groups() + test.n_groups(), ds.n_groups());
        assert_eq!(train.len() + test.len(), ds.len());
    }
}

#[test]
fn more_training_groups_do_not_hurt_on_average() {
    let ds = dataset(&["canonical"], MixingKind::Shared, 0.3, 40, 4);
    let sizes = [2, 4, 8, 16, 24];
    let seeds: Vec<u64> = (0..10).collect();
    let rows = sample_size_scaling(&ds, &sizes, 0.25, &seeds, 1.0).unwrap();
    assert_eq!(rows.len(), sizes.len());
    for w in rows.windows(2) {
        let (a, b) = (w[0].corr_mean.unwrap(), w[1].corr_mean.unwrap());
        assert!(b >= a - 0.02, "{} groups {a} > {} groups {b}", w[0].train_groups, w[1].train_groups);
    }
}

fn rows_strategy() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>, f64)> {
    (2usize..6).prop_flat_map(|d| {
        (
            prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), d + 4..40),
            prop::collection::vec(-2.0f64..2.0, d),
            -5.0f64..5.0,
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn unpenalized_ridge_reproduces_linear_targets((xs, w, b) in rows_strategy()) {
        let y: Vec<f64> = xs.iter().map(|x| b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>()).collect();
        let rows: Vec<&[f64]> = xs.iter().map(Vec::as_slice).collect();
        let model = ridge_fit(&rows, &y, 0.0).unwrap();
        let err = model.predict(&rows).iter().zip(&y).map(|(p, t)| (p - t).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-8, "max error {err}");
    }

    #[test]
    fn affine_alignment_keeps_correlation(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..50),
        target in prop::collection::vec(-8.0f64..8.0, 3..20),
    ) {
        let (pred, truth): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        prop_assume!(pearson(&pred, &truth).is_some());
        prop_assume!(target.iter().any(|&t| (t - target[0]).abs() > 1e-6));
        let aligned = affine_align(&pred, &target).unwrap();
        let (r0, r1) = (pearson(&pred, &truth).unwrap(), pearson(&aligned, &truth).unwrap());
        prop_assert!((r0 - r1).abs() <= 1e-12, "{r0} vs {r1}");
    }
}

#[test]
fn high_margin_accuracy_ignores_sign_preserving_monotone_maps() {
    let ds = dataset(&["canonical"], MixingKind::Shared, 0.5, 20, 9);
    let (train, test) = grouped_split(&ds, 0.5, 1).unwrap();
    let model = ridge_fit(&train.features(), &train.deltas(), 1.0).unwrap();
    let pred = model.predict(&test.features());
    let base = readout_metrics(&test, &pred).unwrap();
    for f in [|x: f64| 3.0 * x, |x: f64| x * x * x, |x: f64| x.signum() * x.abs().ln_1p()] {
        let mapped: Vec<f64> = pred.iter().map(|&p| f(p)).collect();
        assert_eq!(readout_metrics(&test, &mapped).unwrap().high_margin_acc, base.high_margin_acc);
    }
}
