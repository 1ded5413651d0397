//! Iterated back-merging against its closed form, per-coordinate flip steps
//! against brute force, and the finite recovery guarantee.

use orbit_core::distance::{l2_distance, sign_dissimilarity_stores};
use orbit_core::merge::{
    back_merge, flip_step, interpolate, iterated_merge_closed_form, recovery_bound,
};
use orbit_core::params::{GroupSpec, ParamStore};
use proptest::prelude::*;

fn store(included: Vec<f32>, excluded: Vec<f32>) -> ParamStore {
    ParamStore::zeros(&[
        GroupSpec::included("w", included.len()),
        GroupSpec::excluded("sid", excluded.len()),
    ])
    .unwrap()
    .with_values(included.into_iter().chain(excluded).collect())
}

/// Non-zero origin coordinates.
fn nonzero() -> impl Strategy<Value = f32> {
    (0.01f32..2.0, any::<bool>()).prop_map(|(m, neg)| if neg { -m } else { m })
}

fn pair(n: usize) -> impl Strategy<Value = (ParamStore, ParamStore)> {
    (
        prop::collection::vec(-50.0f32..50.0, n),
        prop::collection::vec(nonzero(), n),
        prop::collection::vec(-5.0f32..5.0, 3),
        prop::collection::vec(-5.0f32..5.0, 3),
    )
        .prop_map(|(t, i, te, ie)| (store(t, te), store(i, ie)))
}

/// Flipped-sign coordinate set of `a` against `b`, over the included group.
fn flipped(a: &ParamStore, b: &ParamStore) -> Vec<usize> {
    let (a, b) = (a.group_values("w").unwrap(), b.group_values("w").unwrap());
    (0..a.len())
        .filter(|&i| a[i].is_sign_negative() != b[i].is_sign_negative())
        .collect()
}

/// Smallest k with the sign of init, iterating the recurrence in f64.
fn brute_flip(theta0: f64, init: f64) -> u32 {
    let mut t = theta0;
    let mut k = 0;
    while t.is_sign_negative() != init.is_sign_negative() {
        t = 0.5 * t + 0.5 * init;
        k += 1;
    }
    k
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn iterated_merge_matches_closed_form((theta0, init) in pair(40), k in 0u32..30) {
        let mut it = theta0.clone();
        for _ in 0..k {
            it = back_merge(&it, &init).unwrap();
        }
        let closed = iterated_merge_closed_form(&theta0, &init, k).unwrap();
        for i in 0..it.len() {
            let scale = (theta0.values()[i].abs() + init.values()[i].abs()) as f64;
            let diff = (it.values()[i] as f64 - closed.values()[i] as f64).abs();
            prop_assert!(diff <= 1e-6 * scale, "k={k} i={i} {} vs {}", it.values()[i], closed.values()[i]);
        }
        // Excluded scalars keep the starting values exactly.
        prop_assert_eq!(it.group_values("sid").unwrap(), theta0.group_values("sid").unwrap());
        prop_assert_eq!(closed.group_values("sid").unwrap(), theta0.group_values("sid").unwrap());
    }

    #[test]
    fn flip_step_matches_brute_force(t in -1e4f64..1e4, i in prop_oneof![1e-3f64..10.0, -10.0f64..-1e-3]) {
        prop_assert_eq!(flip_step(t, i).unwrap(), Some(brute_flip(t, i)));
    }

    #[test]
    fn recovery_bound_is_tight_and_flips_are_nested((theta0, init) in pair(60)) {
        let bound = recovery_bound(&theta0, &init).unwrap();
        let mut prev = flipped(&theta0, &init);
        let mut cur = theta0.clone();
        for k in 1..=bound {
            cur = back_merge(&cur, &init).unwrap();
            let now = flipped(&cur, &init);
            prop_assert!(now.iter().all(|i| prev.contains(i)), "k={k}: flipped set grew");
            if k == bound - 1 {
                prop_assert!(sign_dissimilarity_stores(&cur, &init).unwrap() > 0.0);
            }
            prev = now;
        }
        prop_assert_eq!(sign_dissimilarity_stores(&cur, &init).unwrap(), 0.0);
    }

    #[test]
    fn back_merge_halves_l2((theta, init) in pair(50)) {
        let before = l2_distance(&theta, &init).unwrap();
        let after = l2_distance(&back_merge(&theta, &init).unwrap(), &init).unwrap();
        prop_assert!((after - 0.5 * before).abs() <= 1e-6 * before.max(f64::MIN_POSITIVE));
    }

    #[test]
    fn interpolation_keeps_fine_tuned_sid_values((init, ft) in pair(10), lambda in 0.0f64..=1.0) {
        let out = interpolate(&init, &ft, lambda).unwrap();
        prop_assert_eq!(out.group_values("sid").unwrap(), ft.group_values("sid").unwrap());
    }
}

#[test]
fn closed_form_limit_is_the_origin() {
    let theta0 = store(vec![1e30, -3.0], vec![7.0]);
    let init = store(vec![0.5, 0.25], vec![1.0]);
    let far = iterated_merge_closed_form(&theta0, &init, 5000).unwrap();
    assert_eq!(far.values(), &[0.5, 0.25, 7.0]);
}

#[test]
fn recovery_bound_zero_when_nothing_flipped() {
    let init = store(vec![1.0, -1.0], vec![]);
    assert_eq!(
        recovery_bound(&store(vec![9.0, -0.1], vec![]), &init).unwrap(),
        0
    );
}
