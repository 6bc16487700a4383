#![allow(dead_code)]

use lcmf::scan::ScanBlockPlan;
use lcmf::{ParamId, ParamStore, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Registers each tensor as a parameter named `input.{i}`.
pub fn input_store(inputs: Vec<Tensor>) -> (ParamStore, Vec<ParamId>) {
    let mut store = ParamStore::new();
    let mut r = rng(0);
    let ids = inputs
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let id = store
                .add(format!("input.{i}"), t.shape().to_vec(), lcmf::param::Init::Constant(0.0), &mut r)
                .unwrap();
            *store.value_mut(id) = t;
            id
        })
        .collect();
    (store, ids)
}

fn weighted_loss(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Largest relative error between the tape's gradient and central finite
/// differences of `sum(r * f(store))` over every parameter in `store`.
pub fn max_rel_error<F>(store: &mut ParamStore, seed: u64, f: F) -> f64
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    max_rel_error_with_plan(store, seed, ScanBlockPlan::default(), f)
}

pub fn max_rel_error_with_plan<F>(store: &mut ParamStore, seed: u64, plan: ScanBlockPlan, f: F) -> f64
where
    F: Fn(&mut Tape) -> Result<Var>,
{
    let out_shape = {
        let mut tape = Tape::inference(store).with_scan_plan(plan);
        let out = f(&mut tape).unwrap();
        tape.value(out).shape().to_vec()
    };
    let weights = random_tensor(&mut rng(seed), &out_shape, -1.0, 1.0);

    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::new(store).with_scan_plan(plan);
        let out = f(&mut tape).unwrap();
        let loss = weighted_loss(&mut tape, out, &weights).unwrap();
        let grads = tape.backward(loss).unwrap();
        store
            .ids()
            .map(|id| {
                grads
                    .param(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; store.value(id).len()])
            })
            .collect()
    };

    let eval = |store: &ParamStore| -> f64 {
        let mut tape = Tape::inference(store).with_scan_plan(plan);
        let out = f(&mut tape).unwrap();
        let loss = weighted_loss(&mut tape, out, &weights).unwrap();
        tape.value(loss).item()
    };

    let ids: Vec<ParamId> = store.ids().collect();
    let mut worst: f64 = 0.0;
    for (pi, id) in ids.into_iter().enumerate() {
        for j in 0..store.value(id).len() {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + FD_STEP;
            let plus = eval(store);
            store.value_mut(id).data_mut()[j] = orig - FD_STEP;
            let minus = eval(store);
            store.value_mut(id).data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let a = analytic[pi][j];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-5);
            worst = worst.max(err);
        }
    }
    worst
}

/// `(e^x - 1)/x` by its Taylor series `sum x^k/(k+1)!`.
pub fn phi_series(x: f64) -> f64 {
    let (mut term, mut sum) = (1.0, 0.0);
    for k in 1..200 {
        sum += term;
        term *= x / (k as f64 + 1.0);
        if term.abs() < 1e-18 * sum.abs() {
            break;
        }
    }
    sum
}

/// Unrolled convolution form of the recurrence:
/// `y[t] = sum_{s<=t} C_t (prod_{r=s+1..t} Ā_r) B̄_s x_s + D x_t`.
/// `a_bar` is `[T x D]`, `b_bar` `[T x D x N]`, `c` `[T x N]`.
pub fn scan_oracle(x: &Tensor, a_bar: &Tensor, b_bar: &Tensor, c: &Tensor, d_skip: &Tensor) -> Tensor {
    let (t_len, d) = (x.rows(), x.cols());
    let n = c.cols();
    let mut y = vec![0.0; t_len * d];
    for t in 0..t_len {
        for ch in 0..d {
            let mut acc = d_skip.data()[ch] * x.at(t, ch);
            let mut decay = 1.0;
            for s in (0..=t).rev() {
                let base = (s * d + ch) * n;
                let proj: f64 = (0..n).map(|k| c.at(t, k) * b_bar.data()[base + k]).sum();
                acc += decay * proj * x.at(s, ch);
                decay *= a_bar.at(s, ch);
            }
            y[t * d + ch] = acc;
        }
    }
    Tensor::new(vec![t_len, d], y).unwrap()
}

/// `max|a - b| / max|b|`
pub fn normwise_rel(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.max_abs_diff(b) / b.max_abs().max(f64::MIN_POSITIVE)
}

/// Adds `t` to an existing store as a parameter called `name`.
pub fn add_input(store: &mut ParamStore, name: &str, t: Tensor) -> ParamId {
    let id = store
        .add(name, t.shape().to_vec(), lcmf::param::Init::Constant(0.0), &mut rng(0))
        .unwrap();
    *store.value_mut(id) = t;
    id
}

/// Fills every parameter whose name starts with `prefix` with `value`.
pub fn fill_params(store: &mut ParamStore, prefix: &str, value: f64) {
    let ids: Vec<ParamId> = store
        .iter()
        .filter(|(_, p)| p.name().starts_with(prefix))
        .map(|(id, _)| id)
        .collect();
    assert!(!ids.is_empty(), "no parameter under `{prefix}`");
    for id in ids {
        store.value_mut(id).data_mut().fill(value);
    }
}

/// Copies every parameter under `from` onto the same-named one under `to`.
pub fn copy_params(store: &mut ParamStore, from: &str, to: &str) {
    let pairs: Vec<(ParamId, String)> = store
        .iter()
        .filter_map(|(id, p)| p.name().strip_prefix(from).map(|rest| (id, format!("{to}{rest}"))))
        .collect();
    assert!(!pairs.is_empty(), "no parameter under `{from}`");
    for (src, dst) in pairs {
        let dst = store.find(&dst).unwrap_or_else(|| panic!("missing {dst}"));
        let v = store.value(src).clone();
        *store.value_mut(dst) = v;
    }
}

/// Tiny mixer dimensions for gradient checks.
pub fn tiny_mamba(d_model: usize, state_dim: usize) -> lcmf::mamba::MambaConfig {
    lcmf::mamba::MambaConfig {
        d_model,
        d_inner: 2 * d_model,
        state_dim,
        conv_width: 3,
        mode: lcmf::scan::TransitionMode::Stable,
    }
}

/// Parameters of `store` randomised uniformly in `[-s, s]`, so zero
/// initialisations do not hide gradient paths.
pub fn randomize(store: &mut ParamStore, seed: u64, s: f64) {
    let mut r = rng(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        for v in store.value_mut(id).data_mut() {
            *v = r.gen_range(-s..s);
        }
    }
}
