use commitlens::backend::{ModelBackend, TokenId};
use commitlens::projection::{log_sum_exp, project, score_continuation, sigmoid};
use commitlens::scheme::{AnswerScheme, Variant};
use commitlens::toy::HashedBackend;
use proptest::prelude::*;

const VOCAB: usize = 24;

fn scheme(yes: Vec<Vec<TokenId>>, no: Vec<Vec<TokenId>>) -> AnswerScheme {
    AnswerScheme::new(vec!["yes".into(), "no".into()], vec![yes, no], Variant::Contextual).unwrap()
}

fn tokens(max_len: usize) -> impl Strategy<Value = Vec<TokenId>> {
    prop::collection::vec(0..VOCAB as TokenId, 1..=max_len)
}

// Yes-like verbalizers start with token 1, no-like with token 2, so the sets
// never overlap.
fn verbalizer_set(lead: TokenId) -> impl Strategy<Value = Vec<Vec<TokenId>>> {
    prop::collection::vec(prop::collection::vec(0..VOCAB as TokenId, 0..3), 1..4)
        .prop_map(move |tails| tails.into_iter().map(|t| [vec![lead], t].concat()).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn yes_mass_is_sigmoid_of_delta(
        seed in any::<u64>(),
        scale in 0.5f64..6.0,
        prompt in tokens(6),
        yes in verbalizer_set(1),
        no in verbalizer_set(2),
    ) {
        let b = HashedBackend::new(VOCAB, seed, scale);
        let state = b.initial_state(&prompt).unwrap();
        let p = project(&b, &state, &scheme(yes.clone(), no.clone())).unwrap();

        // Independent renormalization over raw per-verbalizer probabilities.
        let mass = |set: &[Vec<TokenId>]| -> f64 {
            set.iter().map(|v| score_continuation(&b, &state, v).unwrap().exp()).sum()
        };
        let (my, mn) = (mass(&yes), mass(&no));
        prop_assert!((p.distribution[0] - my / (my + mn)).abs() <= 1e-12);
        prop_assert!((p.distribution[0] - sigmoid(p.delta)).abs() <= 1e-12);
        prop_assert!((p.distribution[0] + p.distribution[1] - 1.0).abs() <= 1e-12);
        prop_assert!((p.delta - (my.ln() - mn.ln())).abs() <= 1e-10);
    }

    #[test]
    fn log_sum_exp_is_shift_invariant(
        xs in prop::collection::vec(-50.0f64..50.0, 1..12),
        c in -1e3f64..1e3,
    ) {
        let shifted: Vec<f64> = xs.iter().map(|x| x + c).collect();
        prop_assert!((log_sum_exp(&shifted) - (log_sum_exp(&xs) + c)).abs() <= 1e-10);
    }

    #[test]
    fn log_sum_exp_is_monotone_and_bounded(
        xs in prop::collection::vec(-50.0f64..50.0, 1..12),
        extra in -80.0f64..80.0,
        i in any::<prop::sample::Index>(),
        bump in 0.0f64..5.0,
    ) {
        let base = log_sum_exp(&xs);
        let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(base >= max && base <= max + (xs.len() as f64).ln() + 1e-12);
        // Adding a verbalizer or raising one score never lowers the answer
        // score, up to one rounding of the shifted sum.
        prop_assert!(log_sum_exp(&[xs.clone(), vec![extra]].concat()) >= base - 1e-12);
        let mut up = xs.clone();
        up[i.index(xs.len())] += bump;
        prop_assert!(log_sum_exp(&up) >= base - 1e-12);
    }

    #[test]
    fn continuation_scores_follow_the_chain_rule(
        seed in any::<u64>(),
        prompt in tokens(5),
        a in tokens(5),
        c in tokens(5),
    ) {
        let b = HashedBackend::new(VOCAB, seed, 4.0);
        let s0 = b.initial_state(&prompt).unwrap();
        let whole = score_continuation(&b, &s0, &[a.clone(), c.clone()].concat()).unwrap();
        let mut mid = s0.clone();
        for &t in &a {
            mid = b.advance(&mid, t).unwrap();
        }
        let parts = score_continuation(&b, &s0, &a).unwrap() + score_continuation(&b, &mid, &c).unwrap();
        prop_assert!((whole - parts).abs() <= 1e-10);
        prop_assert!(whole <= 0.0);
    }
}

#[test]
fn thousand_states_run_quickly() {
    let start = std::time::Instant::now();
    let b = HashedBackend::new(VOCAB, 9, 3.0);
    let s = scheme(vec![vec![1, 3], vec![1]], vec![vec![2, 5, 7]]);
    for i in 0..1000u32 {
        let state = b.initial_state(&[i % 24, (i / 24) % 24, 4]).unwrap();
        let p = project(&b, &state, &s).unwrap();
        assert!((p.distribution[0] - sigmoid(p.delta)).abs() <= 1e-12);
    }
    assert!(start.elapsed().as_secs_f64() < 10.0);
}
