mod support;

use comet_core::kl::{kl_bernoulli, kl_lcb, kl_ucb};
use proptest::prelude::*;

#[test]
fn grid_oracle_agrees() {
    let (cases, bad) = support::kl_grid_check();
    assert_eq!(cases, 200);
    assert!(bad.is_empty(), "{}", bad.join("\n"));
}

#[test]
fn divergence_matches_reference() {
    for p in [0.0, 0.1, 0.5, 0.9, 1.0] {
        for q in [0.05, 0.3, 0.5, 0.95] {
            approx::assert_abs_diff_eq!(kl_bernoulli(p, q).unwrap(), support::kl_ref(p, q), epsilon = 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn bounds_bracket_estimate(trials in 1u64..5000, frac in 0.0f64..=1.0, level in 0.0f64..20.0) {
        let s = (frac * trials as f64).floor() as u64;
        let p = s as f64 / trials as f64;
        let (lo, hi) = (kl_lcb(s, trials, level), kl_ucb(s, trials, level));
        prop_assert!(0.0 <= lo && lo <= p + 1e-12);
        prop_assert!(p <= hi + 1e-12 && hi <= 1.0);
    }

    #[test]
    fn bounds_widen_with_level(trials in 1u64..5000, frac in 0.0f64..=1.0, a in 0.0f64..10.0, b in 0.0f64..10.0) {
        let s = (frac * trials as f64).floor() as u64;
        let (small, large) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(kl_ucb(s, trials, small) <= kl_ucb(s, trials, large) + 1e-6);
        prop_assert!(kl_lcb(s, trials, small) + 1e-6 >= kl_lcb(s, trials, large));
    }
}
