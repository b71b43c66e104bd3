use std::sync::Arc;

use narrowkit::instances::{
    build_conditional_expectation, build_l1_example, random_finite_rank, random_narrow_operator,
};
use narrowkit::narrowness::{find_sign_within, Strategy};
use narrowkit::theorems::{
    coarsen, pairing_construction, revalidate, sum_compact_via_truncation_with, sum_finite_rank, PipelineParams,
};
use narrowkit::{MeasureSpace, TargetNorm};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn finite_rank_reports_revalidate(seed in 0u64..10_000, rank in 1usize..=4, log_atoms in 4u32..=8) {
        let space = Arc::new(MeasureSpace::uniform(1 << log_atoms).unwrap());
        let t1 = random_narrow_operator(seed, space.clone(), 3, 0.8, TargetNorm::lp(2.0)).unwrap();
        let t2 = random_finite_rank(seed ^ 0xABCD, rank, space, 4, TargetNorm::l1()).unwrap();
        let r = sum_finite_rank(&t1, &t2, &PipelineParams::new(0.2, 0.1)).unwrap();
        let v = revalidate(&r, &t1, &t2).unwrap();
        prop_assert!(v.mean_zero);
        prop_assert!(v.t1_norm <= 0.2 + 1e-12 && v.t2_norm <= 0.1 + 1e-12);
        let step = coarsen(&r.sign, &r.space, t1.space(), &r.refinement().unwrap()).unwrap();
        prop_assert!(step.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn library_runs_are_deterministic(seed in 0u64..1000) {
        let ex = build_l1_example(5, 2).unwrap();
        let t1 = random_narrow_operator(seed, ex.operator.space().clone(), 2, 0.6, TargetNorm::sup()).unwrap();
        let params = PipelineParams::new(0.1, 0.1).with_gamma_delta(0.05, 1.0 / 64.0);
        let a = pairing_construction(&t1, &ex.operator, &params).unwrap();
        let b = pairing_construction(&t1, &ex.operator, &params).unwrap();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }
}

#[test]
fn conditional_expectation_is_strictly_narrow_on_fibers() {
    let op = build_conditional_expectation(8).unwrap();
    for t in 0..8 {
        let set: narrowkit::AtomSet = (t * 8..(t + 1) * 8).collect();
        let found = find_sign_within(&op, &set, 0.0, Strategy::KernelPairing).unwrap();
        assert_eq!(found.norm, 0.0);
        assert_eq!(found.sign.support(), set);
    }
}

#[test]
fn truncation_tail_closure_is_consulted_in_order() {
    let ex = build_l1_example(8, 2).unwrap();
    let t1 = random_narrow_operator(4, ex.operator.space().clone(), 2, 0.6, TargetNorm::sup()).unwrap();
    let mut asked = Vec::new();
    let r = sum_compact_via_truncation_with(&t1, &ex.operator, &PipelineParams::new(0.25, 0.25), |n| {
        asked.push(n);
        (-(n as f64)).exp2()
    })
    .unwrap();
    assert_eq!(asked, vec![0, 1, 2, 3]);
    assert_eq!(r.truncation.unwrap().level, 3);
}
