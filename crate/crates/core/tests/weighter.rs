mod common;

use common::rng;
use lcmf::weighter::{ema_update, total_loss, LossWeights};
use rand::Rng;
use rand_distr::{Distribution, Normal};

#[test]
fn ema_examples() {
    assert_eq!(ema_update(1.0, 1.0, 0.95), 1.0);
    assert!((ema_update(1.0, 0.0, 0.95) - 0.95).abs() < 1e-15);
}

#[test]
fn ema_converges_geometrically() {
    let mut e = 10.0;
    for k in 1..=200 {
        e = ema_update(e, 2.0, 0.95);
        let want = 2.0 + 8.0 * 0.95f64.powi(k);
        assert!((e - want).abs() < 1e-12);
    }
}

#[test]
fn first_update_seeds_the_ema() {
    let mut w = LossWeights::new(3).unwrap();
    w.update(&[3.0, 1.0, 2.0]).unwrap();
    assert_eq!(w.weights(), &[1.0, 1.0, 1.0]);
    assert_eq!(w.ema(), vec![3.0, 1.0, 2.0]);
    w.update(&[1.0, 1.0, 1.0]).unwrap();
    assert!((w.ema()[0] - (0.95 * 3.0 + 0.05)).abs() < 1e-15);
}

#[test]
fn equal_ratios_keep_unit_weights() {
    let mut w = LossWeights::new(2).unwrap();
    w.update(&[2.0, 4.0]).unwrap();
    w.update(&[1.0, 2.0]).unwrap();
    assert_eq!(w.weights(), &[1.0, 1.0]);
}

#[test]
fn doubled_ratio_rises_by_the_cap() {
    let mut w = LossWeights::new(2).unwrap();
    w.update(&[1.0, 1.0]).unwrap();
    // r = (2, 1): targets (4/3, 2/3), the cap binds at 0.05.
    w.update(&[2.0, 1.0]).unwrap();
    assert!((w.weights()[0] - 1.05).abs() < 1e-15);
    assert!((w.weights()[1] - 0.95).abs() < 1e-15);
}

#[test]
fn random_streams_keep_the_invariants() {
    let mut r = rng(1);
    for tasks in [2, 3, 5] {
        let mut w = LossWeights::new(tasks).unwrap();
        let mut prev = w.weights().to_vec();
        for _ in 0..10_000 {
            let losses: Vec<f64> = (0..tasks).map(|_| r.gen_range(0.0..5.0f64).powi(3)).collect();
            w.update(&losses).unwrap();
            let now = w.weights().to_vec();
            assert!(now.iter().all(|&x| x > 0.0 && x >= w.floor - 1e-12), "{now:?}");
            assert!((now.iter().sum::<f64>() - tasks as f64).abs() < 1e-9);
            for (a, b) in now.iter().zip(&prev) {
                assert!((a - b).abs() <= w.step_cap + 1e-12);
            }
            prev = now;
        }
    }
}

#[test]
fn constant_equal_losses_return_to_ones() {
    let mut w = LossWeights::new(2).unwrap();
    w.set_weights(vec![1.6, 0.4]).unwrap();
    for _ in 0..100 {
        w.update(&[0.7, 0.7]).unwrap();
    }
    for &x in w.weights() {
        assert!((x - 1.0).abs() < 1e-12);
    }
}

#[test]
fn non_finite_losses_are_skipped() {
    let mut w = LossWeights::new(2).unwrap();
    w.update(&[1.0, 1.0]).unwrap();
    let out = w.update(&[f64::NAN, 3.0]).unwrap();
    assert_eq!(out.skipped, 1);
    assert_eq!(w.skipped(), 1);
    assert_eq!(w.weights(), &[1.0, 1.0]);
    assert_eq!(w.ema()[0], 1.0);
    assert!(w.update(&[1.0]).is_err());
    assert!(LossWeights::new(1).is_err());
}

fn trajectory_variance(decay: f64, seed: u64) -> f64 {
    let mut w = LossWeights::with_settings(2, decay, 0.05, 0.05).unwrap();
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut r = rng(seed);
    let mut path = Vec::new();
    for step in 0..3000 {
        let losses = [1.5 + noise.sample(&mut r), 1.0 + noise.sample(&mut r)];
        w.update(&losses).unwrap();
        if step >= 500 {
            path.push(w.weights()[0]);
        }
    }
    let mean = path.iter().sum::<f64>() / path.len() as f64;
    path.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / path.len() as f64
}

#[test]
fn smoothing_lowers_weight_variance() {
    for seed in [3, 4, 5] {
        // Decay 0 tracks the raw previous loss.
        let (smooth, raw) = (trajectory_variance(0.95, seed), trajectory_variance(0.0, seed));
        assert!(smooth < raw, "seed {seed}: {smooth:e} vs {raw:e}");
    }
}

#[test]
fn total_loss_examples() {
    assert_eq!(total_loss(&[1.5, 2.5], &[1.0, 1.0]).unwrap(), 4.0);
    assert_eq!(total_loss(&[1.5, 2.5], &[0.0, 2.0]).unwrap(), 5.0);
    // 1.2·0.5 + 0.8·3
    assert!((total_loss(&[0.5, 3.0], &[1.2, 0.8]).unwrap() - 3.0).abs() < 1e-15);
    assert!(total_loss(&[1.0], &[1.0, 1.0]).is_err());

    let mut w = LossWeights::with_settings(2, 0.95, 0.0, 0.05).unwrap();
    w.set_weights(vec![0.0, 2.0]).unwrap();
    assert_eq!(w.total(&[100.0, 1.0]).unwrap(), 2.0);
}
