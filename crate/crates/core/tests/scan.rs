mod common;

use common::{normwise_rel, phi_series, random_tensor, rng, scan_oracle};
use lcmf::scan::{
    discretize, flops_scan, scan_blocked, scan_sequential, zoh, DiscretizedSsm, ScanBlockPlan, SsmParams,
    TransitionMode, LIMIT_THRESHOLD,
};
use lcmf::Tensor;
use proptest::prelude::*;
use rand::Rng;

struct Instance {
    x: Tensor,
    params: SsmParams,
}

fn instance(seed: u64, t: usize, d: usize, n: usize) -> Instance {
    let mut r = rng(seed);
    Instance {
        x: random_tensor(&mut r, &[t, d], -1.0, 1.0),
        params: SsmParams::new(
            random_tensor(&mut r, &[t, d], 0.0, 1.0),
            random_tensor(&mut r, &[t, n], -1.0, 1.0),
            random_tensor(&mut r, &[t, n], -1.0, 1.0),
            random_tensor(&mut r, &[t, d], 0.001, 2.0),
            random_tensor(&mut r, &[d], -1.0, 1.0),
        )
        .unwrap(),
    }
}

fn run_sequential(inst: &Instance, disc: &DiscretizedSsm) -> Tensor {
    scan_sequential(&inst.x, disc, &inst.params.c, &inst.params.d_skip).unwrap()
}

fn run_blocked(inst: &Instance, disc: &DiscretizedSsm, block: usize) -> Tensor {
    scan_blocked(
        &inst.x,
        disc,
        &inst.params.c,
        &inst.params.d_skip,
        ScanBlockPlan::new(block).unwrap(),
    )
    .unwrap()
}

#[test]
fn coefficient_matches_series_expansion() {
    let mut r = rng(11);
    for _ in 0..10_000 {
        let a: f64 = r.gen_range(-3.0..3.0);
        let dt: f64 = r.gen_range(0.01..2.0);
        if (a * dt).abs() < LIMIT_THRESHOLD {
            continue;
        }
        let (a_bar, coef) = zoh(a, dt);
        let expected = dt * phi_series(a * dt);
        assert!((coef - expected).abs() / expected.abs() < 1e-10, "a={a} dt={dt}");
        assert!((a_bar - (a * dt).exp()).abs() <= 1e-15 * a_bar);
    }
}

#[test]
fn coefficient_is_continuous_across_the_threshold() {
    for dt in [1e-3, 0.5, 1.0, 3.0] {
        for side in [-1.0, 1.0] {
            let below = side * LIMIT_THRESHOLD * 0.999_999 / dt;
            let above = side * LIMIT_THRESHOLD * 1.000_001 / dt;
            let (_, limit) = zoh(below, dt);
            let (_, direct) = zoh(above, dt);
            assert_eq!(limit, dt);
            assert!((limit - direct).abs() / dt < 1e-6, "dt={dt} side={side}");
        }
    }
}

#[test]
fn discretize_stable_mode_keeps_transitions_in_unit_interval() {
    let inst = instance(3, 50, 6, 4);
    let disc = discretize(&inst.params, TransitionMode::Stable).unwrap();
    assert!(disc.a_bar.data().iter().all(|&a| a > 0.0 && a <= 1.0));
    let literal = discretize(&inst.params, TransitionMode::Literal).unwrap();
    assert!(literal.a_bar.data().iter().all(|&a| a >= 1.0));
}

#[test]
fn zero_transition_is_memoryless() {
    let inst = instance(4, 9, 3, 2);
    let mut disc = discretize(&inst.params, TransitionMode::Stable).unwrap();
    disc.a_bar.data_mut().fill(0.0);
    let y = run_sequential(&inst, &disc);
    let (d, n) = (3, 2);
    for t in 0..9 {
        for ch in 0..d {
            let proj: f64 = (0..n)
                .map(|k| inst.params.c.at(t, k) * disc.b_bar.data()[(t * d + ch) * n + k])
                .sum();
            let x = inst.x.at(t, ch);
            let expected = proj * x + inst.params.d_skip.data()[ch] * x;
            assert!((y.at(t, ch) - expected).abs() < 1e-15);
        }
    }
}

#[test]
fn unit_transition_counts_positions() {
    let t = 12;
    let disc = DiscretizedSsm {
        a_bar: Tensor::full(vec![t, 1], 1.0),
        b_bar: Tensor::full(vec![t, 1, 1], 1.0),
    };
    let y = scan_sequential(
        &Tensor::full(vec![t, 1], 1.0),
        &disc,
        &Tensor::full(vec![t, 1], 1.0),
        &Tensor::vector(vec![0.0]),
    )
    .unwrap();
    let expected: Vec<f64> = (1..=t).map(|i| i as f64).collect();
    assert_eq!(y.data(), expected.as_slice());
}

#[test]
fn sequential_matches_unrolled_oracle() {
    let inst = instance(5, 64, 4, 3);
    let disc = discretize(&inst.params, TransitionMode::Stable).unwrap();
    let oracle = scan_oracle(&inst.x, &disc.a_bar, &disc.b_bar, &inst.params.c, &inst.params.d_skip);
    assert!(normwise_rel(&run_sequential(&inst, &disc), &oracle) < 1e-10);
}

#[test]
fn single_block_plan_is_the_sequential_path() {
    let inst = instance(6, 33, 5, 4);
    let disc = discretize(&inst.params, TransitionMode::Stable).unwrap();
    assert_eq!(run_blocked(&inst, &disc, 33), run_sequential(&inst, &disc));
    let plan = ScanBlockPlan::single(33);
    assert_eq!(plan.block_count(33), 1);
}

#[test]
fn short_final_block() {
    let inst = instance(7, 7, 3, 2);
    let disc = discretize(&inst.params, TransitionMode::Stable).unwrap();
    assert_eq!(ScanBlockPlan::new(3).unwrap().block_count(7), 3);
    let diff = run_blocked(&inst, &disc, 3).max_abs_diff(&run_sequential(&inst, &disc));
    assert!(diff < 1e-12, "max abs diff {diff:e}");
}

#[test]
fn mismatched_shapes_are_rejected() {
    let inst = instance(8, 5, 3, 2);
    let disc = discretize(&inst.params, TransitionMode::Stable).unwrap();
    let bad_c = Tensor::zeros(vec![4, 2]);
    assert!(scan_sequential(&inst.x, &disc, &bad_c, &inst.params.d_skip).is_err());
}

#[test]
fn scan_flops() {
    assert_eq!(flops_scan(1024, 64, 16), 2 * flops_scan(512, 64, 16));
    let r = flops_scan(512, 128, 16) as f64 / flops_scan(512, 64, 16) as f64;
    assert!((1.9..=2.1).contains(&r));
    // One step of one channel with N = 1: A·Δ, exp, expm1, divide; B̄ = coef·B;
    // Ā·h + B̄·x (multiply, multiply, add); C·h into y (multiply, add);
    // D·x and its addition.
    assert_eq!(flops_scan(1, 1, 1), 4 + 1 + 3 + 2 + 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn blocked_and_sequential_agree_with_the_oracle(
        seed in any::<u64>(),
        t in 1usize..=1024,
        d in 1usize..=64,
        n in 1usize..=16,
        block_frac in 0.0f64..1.0,
    ) {
        let inst = instance(seed, t, d, n);
        let disc = discretize(&inst.params, TransitionMode::Stable).unwrap();
        let seq = run_sequential(&inst, &disc);
        let block = 1 + (block_frac * t as f64) as usize;
        let blocked = run_blocked(&inst, &disc, block.min(t));
        prop_assert!(normwise_rel(&blocked, &seq) < 1e-10);
        let oracle = scan_oracle(&inst.x, &disc.a_bar, &disc.b_bar, &inst.params.c, &inst.params.d_skip);
        prop_assert!(normwise_rel(&seq, &oracle) < 1e-10);
    }
}
