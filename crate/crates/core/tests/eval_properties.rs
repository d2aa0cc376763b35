use proptest::prelude::*;
use tsxplain_core::eval::consensus::{
    calibrate_concat, consensus_experiment, default_arms, disjoint_noise_instance, instance_family,
    shared_noise_instance,
};
use tsxplain_core::eval::text::{bleu4, clipped_precision_counts, rouge_l};

#[test]
fn multiplicative_beats_linear_arms_on_disjoint_noise() {
    let calib = instance_family(50, 60, 4, 1, disjoint_noise_instance);
    let proj = calibrate_concat(&calib).unwrap();
    let family = instance_family(200, 60, 4, 2, disjoint_noise_instance);
    let r = consensus_experiment(&family, &default_arms(proj), 1000, 3).unwrap();
    assert_eq!(r.ordering[0], "multiplicative");
    assert!(r.paired[0].baseline_wins >= 0.95, "{:?}", r.paired[0]);
    assert!(r.paired[1].baseline_wins >= 0.90, "{:?}", r.paired[1]);
    assert!(r.paired.iter().all(|p| p.difference.low > 0.0));
}

#[test]
fn shared_noise_family_is_recorded_without_ordering_claim() {
    let family = instance_family(50, 60, 4, 4, shared_noise_instance);
    let proj = calibrate_concat(&instance_family(20, 60, 4, 5, shared_noise_instance)).unwrap();
    let r = consensus_experiment(&family, &default_arms(proj), 200, 6).unwrap();
    assert_eq!(r.arms.len(), 3);
    assert!(r.arms.iter().all(|a| a.mean.is_finite()));
}

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e", "f", "g"]), 4..14)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn bleu_of_self_is_one(c in words()) {
        prop_assert!((bleu4(&c, std::slice::from_ref(&c)).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bleu_sees_token_swaps(c in words(), r in words(), i in 0usize..14, j in 0usize..14) {
        let (i, j) = (i % c.len(), j % c.len());
        prop_assume!(c[i] != c[j]);
        let mut s = c.clone();
        s.swap(i, j);
        let changed = (1..=4).any(|n| clipped_precision_counts(&c, std::slice::from_ref(&c), n) != clipped_precision_counts(&s, std::slice::from_ref(&c), n));
        prop_assert!(changed);
        let b = bleu4(&c, &[r]).unwrap();
        prop_assert!((0.0..=1.0).contains(&b));
    }

    #[test]
    fn rouge_symmetry_tracks_lengths(c in words(), r in words()) {
        let a = rouge_l(&c, &r);
        let b = rouge_l(&r, &c);
        if c.len() == r.len() {
            prop_assert!((a.f1 - b.f1).abs() < 1e-12);
        }
        prop_assert!((a.precision - b.recall).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a.f1));
    }
}
