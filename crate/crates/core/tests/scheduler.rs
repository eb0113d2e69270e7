mod common;

use std::collections::HashSet;

use common::{brute_depths, random_mask_frame, rng};
use percdf::scheduler::{assign_depths, build_permutation, PermutationMode, WindowPolicy};
use proptest::prelude::*;

fn mode_strategy() -> impl Strategy<Value = PermutationMode> {
    prop_oneof![
        Just(PermutationMode::Midpoint),
        Just(PermutationMode::Random),
        (1usize..5).prop_map(PermutationMode::MidpointMaxInterval),
    ]
}

fn policy_strategy() -> impl Strategy<Value = WindowPolicy> {
    prop_oneof![Just(WindowPolicy::Global), (1usize..5).prop_map(WindowPolicy::Local)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn depths_match_binary_search_oracle(seed in 0u64..u64::MAX, n in 1usize..4, t in 1usize..40, p in 0.0f64..1.0) {
        let f = random_mask_frame(&mut rng(seed), n, t, p);
        prop_assert_eq!(assign_depths(&f), brute_depths(&f));
    }

    #[test]
    fn plans_are_valid(
        seed in 0u64..u64::MAX,
        n in 1usize..4,
        t in 1usize..25,
        p in 0.0f64..1.0,
        mode in mode_strategy(),
        policy in policy_strategy(),
    ) {
        let f = random_mask_frame(&mut rng(seed), n, t, p);
        let plan = build_permutation(&f, mode, policy, seed).unwrap();
        let n_obs = f.observed_count();
        prop_assert_eq!(plan.order.iter().collect::<HashSet<_>>().len(), f.points.len());
        prop_assert!(plan.order[..n_obs].iter().all(|&i| f.points[i].mask));
        for &i in plan.missing_order() {
            prop_assert!(plan.windows[i].iter().all(|&j| plan.position[j] < plan.position[i]));
            if let WindowPolicy::Local(k) = policy {
                prop_assert!(plan.windows[i].len() <= 2 * k * n);
            }
        }
        // depth never decreases along the midpoint order
        if mode == PermutationMode::Midpoint {
            let d: Vec<i64> = plan.missing_order().iter().map(|&i| plan.depth[i]).collect();
            prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
        }
        // same seed, same plan
        prop_assert_eq!(&plan, &build_permutation(&f, mode, policy, seed).unwrap());
    }

    #[test]
    fn global_window_is_every_predecessor(seed in 0u64..u64::MAX, t in 1usize..15, p in 0.0f64..1.0) {
        let f = random_mask_frame(&mut rng(seed), 2, t, p);
        let plan = build_permutation(&f, PermutationMode::Random, WindowPolicy::Global, seed).unwrap();
        for &i in plan.missing_order() {
            let mut w = plan.windows[i].clone();
            w.sort();
            let mut want: Vec<usize> = plan.order[..plan.position[i]].to_vec();
            want.sort();
            prop_assert_eq!(w, want);
        }
    }
}

#[test]
fn zero_local_window_is_rejected() {
    let f = random_mask_frame(&mut rng(1), 1, 5, 0.5);
    assert!(build_permutation(&f, PermutationMode::Midpoint, WindowPolicy::Local(0), 0).is_err());
}
