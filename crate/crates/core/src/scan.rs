//! Selective state-space kernel: zero-order-hold discretization, the
//! sequential recurrence, and a blocked carry-then-fill execution plan.
//!
//! Shapes follow the per-channel convention used throughout the crate:
//!
//! * `A`, `Δ`: `[T x D]`, one transition scalar and one time step per position
//!   and channel,
//! * `B`, `C`: `[T x N]`, per-position state projections shared by all
//!   channels,
//! * hidden state `h`: `[D x N]` per position, with `Ā` broadcast over `N`.
//!
//! ```text
//! h[t,d,n] = Ā[t,d] * h[t-1,d,n] + B̄[t,d,n] * x[t,d]
//! y[t,d]   = sum_n C[t,n] * h[t,d,n] + D_skip[d] * x[t,d]
//! ```

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Below this `|A·Δ|` the `(e^x - 1)/x` factor is replaced by its limit.
pub const LIMIT_THRESHOLD: f64 = 1e-8;

pub const DEFAULT_BLOCK_LENGTH: usize = 64;

/// Sign convention applied to the generated transition values before
/// exponentiation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum TransitionMode {
    /// `A_eff = -A`, so `Ā = exp(-A·Δ) <= 1` for the sigmoid-generated `A`.
    #[default]
    Stable,
    /// `A_eff = A` exactly as generated (`Ā > 1` for positive `A`).
    Literal,
}

impl TransitionMode {
    pub fn from_stable_flag(stable: bool) -> Self {
        if stable {
            TransitionMode::Stable
        } else {
            TransitionMode::Literal
        }
    }

    #[inline]
    pub fn sign(self) -> f64 {
        match self {
            TransitionMode::Stable => -1.0,
            TransitionMode::Literal => 1.0,
        }
    }
}

/// Continuous-time parameters for one sequence.
#[derive(Clone, Debug)]
pub struct SsmParams {
    pub a: Tensor,
    pub b: Tensor,
    pub c: Tensor,
    pub delta: Tensor,
    pub d_skip: Tensor,
}

impl SsmParams {
    pub fn new(a: Tensor, b: Tensor, c: Tensor, delta: Tensor, d_skip: Tensor) -> Result<Self> {
        let p = SsmParams {
            a,
            b,
            c,
            delta,
            d_skip,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let (t, d, n) = (self.seq_len(), self.channels(), self.state_dim());
        if self.a.shape() != [t, d] {
            return Err(Error::dim("ssm params (A)", self.a.shape(), &[t, d]));
        }
        if self.delta.shape() != self.a.shape() {
            return Err(Error::dim("ssm params (delta)", self.delta.shape(), self.a.shape()));
        }
        if self.b.shape() != [t, n] {
            return Err(Error::dim("ssm params (B)", self.b.shape(), &[t, n]));
        }
        if self.c.shape() != self.b.shape() {
            return Err(Error::dim("ssm params (C)", self.c.shape(), self.b.shape()));
        }
        if self.d_skip.shape() != [d] {
            return Err(Error::dim("ssm params (D_skip)", self.d_skip.shape(), &[d]));
        }
        Ok(())
    }

    pub fn seq_len(&self) -> usize {
        self.a.shape().first().copied().unwrap_or(0)
    }

    pub fn channels(&self) -> usize {
        self.a.cols()
    }

    pub fn state_dim(&self) -> usize {
        self.b.cols()
    }
}

#[derive(Clone, Debug)]
pub struct DiscretizedSsm {
    /// `[T x D]`
    pub a_bar: Tensor,
    /// `[T x D x N]`
    pub b_bar: Tensor,
}

impl DiscretizedSsm {
    pub fn seq_len(&self) -> usize {
        self.a_bar.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.a_bar.shape()[1]
    }

    pub fn state_dim(&self) -> usize {
        self.b_bar.shape()[2]
    }
}

/// `(Ā, (e^{A·Δ} - 1)/A)` for one effective transition value and time step.
#[inline]
pub fn zoh(a_eff: f64, dt: f64) -> (f64, f64) {
    let z = a_eff * dt;
    let a_bar = z.exp();
    let coef = if z.abs() < LIMIT_THRESHOLD {
        dt
    } else {
        z.exp_m1() / a_eff
    };
    (a_bar, coef)
}

/// Derivative of `(e^z - 1)/z`.
#[inline]
pub(crate) fn phi_prime(z: f64) -> f64 {
    if z.abs() < 1e-3 {
        0.5 + z / 3.0 + z * z / 8.0 + z * z * z / 30.0
    } else {
        (z * z.exp() - z.exp_m1()) / (z * z)
    }
}

pub fn discretize(p: &SsmParams, mode: TransitionMode) -> Result<DiscretizedSsm> {
    p.validate()?;
    if let Some(bad) = p.delta.data().iter().find(|&&dt| !(dt > 0.0)) {
        return Err(Error::contract(format!("time step must be positive, got {bad}")));
    }
    let (t_len, d, n) = (p.seq_len(), p.channels(), p.state_dim());
    let sign = mode.sign();
    let mut a_bar = vec![0.0; t_len * d];
    let mut b_bar = vec![0.0; t_len * d * n];
    for t in 0..t_len {
        let b_row = p.b.row(t);
        for ch in 0..d {
            let i = t * d + ch;
            let (ab, coef) = zoh(sign * p.a.data()[i], p.delta.data()[i]);
            a_bar[i] = ab;
            for (out, &bv) in b_bar[i * n..(i + 1) * n].iter_mut().zip(b_row) {
                *out = coef * bv;
            }
        }
    }
    Ok(DiscretizedSsm {
        a_bar: Tensor::new(vec![t_len, d], a_bar)?,
        b_bar: Tensor::new(vec![t_len, d, n], b_bar)?,
    })
}

fn check_scan_shapes(x: &Tensor, disc: &DiscretizedSsm, c: &Tensor, d_skip: &Tensor) -> Result<()> {
    if disc.a_bar.rank() != 2 || disc.b_bar.rank() != 3 {
        return Err(Error::dim("scan (discretized)", disc.a_bar.shape(), disc.b_bar.shape()));
    }
    let (t, d, n) = (disc.seq_len(), disc.channels(), disc.state_dim());
    if x.shape() != [t, d] {
        return Err(Error::dim("scan (x)", x.shape(), &[t, d]));
    }
    if disc.b_bar.shape() != [t, d, n] {
        return Err(Error::dim("scan (B̄)", disc.b_bar.shape(), &[t, d, n]));
    }
    if c.shape() != [t, n] {
        return Err(Error::dim("scan (C)", c.shape(), &[t, n]));
    }
    if d_skip.shape() != [d] {
        return Err(Error::dim("scan (D_skip)", d_skip.shape(), &[d]));
    }
    Ok(())
}

/// Borrowed inputs of one scan.
#[derive(Clone, Copy)]
struct ScanInputs<'a> {
    x: &'a [f64],
    a_bar: &'a [f64],
    b_bar: &'a [f64],
    c: &'a [f64],
    d_skip: &'a [f64],
    d: usize,
    n: usize,
}

impl ScanInputs<'_> {
    /// Runs positions `t0..t1` from state `h` (`[D x N]`), writing `y` rows
    /// (and optionally the post-step states) for those positions.
    fn fill(&self, t0: usize, t1: usize, h: &mut [f64], y: &mut [f64], mut states: Option<&mut [f64]>) {
        let (d, n) = (self.d, self.n);
        for t in t0..t1 {
            let c_row = &self.c[t * n..(t + 1) * n];
            let local = t - t0;
            for ch in 0..d {
                let i = t * d + ch;
                let a = self.a_bar[i];
                let xv = self.x[i];
                let b = &self.b_bar[i * n..(i + 1) * n];
                let hs = &mut h[ch * n..(ch + 1) * n];
                let mut acc = 0.0;
                for k in 0..n {
                    hs[k] = a * hs[k] + b[k] * xv;
                    acc += c_row[k] * hs[k];
                }
                y[local * d + ch] = acc + self.d_skip[ch] * xv;
            }
            if let Some(st) = states.as_deref_mut() {
                st[local * d * n..(local + 1) * d * n].copy_from_slice(h);
            }
        }
    }

    /// State after `t0..t1` starting from zero, plus the per-channel product
    /// of `Ā` over the same span.
    fn summarize(&self, t0: usize, t1: usize) -> (Vec<f64>, Vec<f64>) {
        let (d, n) = (self.d, self.n);
        let mut h = vec![0.0; d * n];
        let mut decay = vec![1.0; d];
        for t in t0..t1 {
            for ch in 0..d {
                let i = t * d + ch;
                let a = self.a_bar[i];
                let xv = self.x[i];
                let b = &self.b_bar[i * n..(i + 1) * n];
                for (hk, &bk) in h[ch * n..(ch + 1) * n].iter_mut().zip(b) {
                    *hk = a * *hk + bk * xv;
                }
                decay[ch] *= a;
            }
        }
        (h, decay)
    }
}

/// Reference recurrence with `h_0 = 0`.
pub fn scan_sequential(x: &Tensor, disc: &DiscretizedSsm, c: &Tensor, d_skip: &Tensor) -> Result<Tensor> {
    check_scan_shapes(x, disc, c, d_skip)?;
    let inputs = inputs(x, disc, c, d_skip);
    let (t, d, n) = (disc.seq_len(), disc.channels(), disc.state_dim());
    let mut h = vec![0.0; d * n];
    let mut y = vec![0.0; t * d];
    inputs.fill(0, t, &mut h, &mut y, None);
    Tensor::new(vec![t, d], y)
}

fn inputs<'a>(x: &'a Tensor, disc: &'a DiscretizedSsm, c: &'a Tensor, d_skip: &'a Tensor) -> ScanInputs<'a> {
    ScanInputs {
        x: x.data(),
        a_bar: disc.a_bar.data(),
        b_bar: disc.b_bar.data(),
        c: c.data(),
        d_skip: d_skip.data(),
        d: disc.channels(),
        n: disc.state_dim(),
    }
}

/// Fixed-length blocking of a sequence; the last block may be short.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanBlockPlan {
    block_length: usize,
}

impl Default for ScanBlockPlan {
    fn default() -> Self {
        ScanBlockPlan {
            block_length: DEFAULT_BLOCK_LENGTH,
        }
    }
}

impl ScanBlockPlan {
    pub fn new(block_length: usize) -> Result<Self> {
        if block_length == 0 {
            return Err(Error::config("scan block length must be at least 1"));
        }
        Ok(ScanBlockPlan { block_length })
    }

    /// A single block spanning the whole sequence.
    pub fn single(seq_len: usize) -> Self {
        ScanBlockPlan {
            block_length: seq_len.max(1),
        }
    }

    pub fn block_length(&self) -> usize {
        self.block_length
    }

    pub fn block_count(&self, seq_len: usize) -> usize {
        seq_len.div_ceil(self.block_length)
    }

    fn spans(&self, seq_len: usize) -> Vec<(usize, usize)> {
        (0..self.block_count(seq_len))
            .map(|b| {
                let t0 = b * self.block_length;
                (t0, (t0 + self.block_length).min(seq_len))
            })
            .collect()
    }
}

/// Blocked scan: every block's local summary is computed independently, the
/// carries are chained sequentially, then every block is filled from its
/// carry-in. Equal to [`scan_sequential`] up to rounding for any plan; a
/// single-block plan takes exactly the sequential path.
pub fn scan_blocked(
    x: &Tensor,
    disc: &DiscretizedSsm,
    c: &Tensor,
    d_skip: &Tensor,
    plan: ScanBlockPlan,
) -> Result<Tensor> {
    check_scan_shapes(x, disc, c, d_skip)?;
    let (y, _) = scan_blocked_raw(inputs(x, disc, c, d_skip), disc.seq_len(), plan, false);
    Tensor::new(vec![disc.seq_len(), disc.channels()], y)
}

/// Like [`scan_blocked`], additionally returning every post-step state
/// (`[T x D x N]`), which the backward pass needs.
pub(crate) fn scan_blocked_with_states(
    x: &Tensor,
    disc: &DiscretizedSsm,
    c: &Tensor,
    d_skip: &Tensor,
    plan: ScanBlockPlan,
    keep_states: bool,
) -> Result<(Tensor, Option<Vec<f64>>)> {
    check_scan_shapes(x, disc, c, d_skip)?;
    let (y, states) = scan_blocked_raw(inputs(x, disc, c, d_skip), disc.seq_len(), plan, keep_states);
    Ok((Tensor::new(vec![disc.seq_len(), disc.channels()], y)?, states))
}

fn scan_blocked_raw(
    inp: ScanInputs<'_>,
    t_len: usize,
    plan: ScanBlockPlan,
    keep_states: bool,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let (d, n) = (inp.d, inp.n);
    let spans = plan.spans(t_len);
    let mut y = vec![0.0; t_len * d];
    let mut states = keep_states.then(|| vec![0.0; t_len * d * n]);

    if spans.len() <= 1 {
        let mut h = vec![0.0; d * n];
        inp.fill(0, t_len, &mut h, &mut y, states.as_deref_mut());
        return (y, states);
    }

    // Phase 1: per-block summaries from a zero state.
    let summaries: Vec<(Vec<f64>, Vec<f64>)> = spans
        .par_iter()
        .map(|&(t0, t1)| inp.summarize(t0, t1))
        .collect();

    // Phase 2: chain the carries.
    let mut carries = Vec::with_capacity(spans.len());
    let mut carry = vec![0.0; d * n];
    for (local, decay) in &summaries {
        carries.push(carry.clone());
        for ch in 0..d {
            for k in 0..n {
                let i = ch * n + k;
                carry[i] = decay[ch] * carry[i] + local[i];
            }
        }
    }

    // Phase 3: fill every block from its carry-in.
    let block = plan.block_length;
    let y_chunks = y.par_chunks_mut(block * d);
    match states.as_deref_mut() {
        Some(st) => {
            y_chunks
                .zip(st.par_chunks_mut(block * d * n))
                .zip(spans.par_iter().zip(carries.into_par_iter()))
                .for_each(|((yc, sc), (&(t0, t1), mut h))| inp.fill(t0, t1, &mut h, yc, Some(sc)));
        }
        None => {
            y_chunks
                .zip(spans.par_iter().zip(carries.into_par_iter()))
                .for_each(|(yc, (&(t0, t1), mut h))| inp.fill(t0, t1, &mut h, yc, None));
        }
    }
    (y, states)
}

/// Floating-point operations of one discretize-and-scan pass.
///
/// Per position and channel: `A·Δ`, `exp`, `expm1` and the division by `A`
/// (4), plus the skip term `D·x` and its addition (2). Per position, channel
/// and state element: `B̄ = coef·B` (1), `Ā·h + B̄·x` (3) and `C·h` accumulated
/// into `y` (2).
pub fn flops_scan(seq_len: u64, channels: u64, state_dim: u64) -> u64 {
    seq_len * channels * (6 * state_dim + 6)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params_1x1(a: f64, dt: f64, b: f64) -> SsmParams {
        SsmParams::new(
            Tensor::new(vec![1, 1], vec![a]).unwrap(),
            Tensor::new(vec![1, 1], vec![b]).unwrap(),
            Tensor::new(vec![1, 1], vec![1.0]).unwrap(),
            Tensor::new(vec![1, 1], vec![dt]).unwrap(),
            Tensor::vector(vec![0.0]),
        )
        .unwrap()
    }

    #[test]
    fn closed_form_half_decay() {
        // Literal mode keeps A_eff = -1 as given.
        let d = discretize(&params_1x1(-1.0, std::f64::consts::LN_2, 1.0), TransitionMode::Literal).unwrap();
        assert!((d.a_bar.item() - 0.5).abs() < 1e-15);
        assert!((d.b_bar.item() - 0.5).abs() < 1e-15);
        // Stable mode negates A = 1 to the same exponent.
        let s = discretize(&params_1x1(1.0, std::f64::consts::LN_2, 1.0), TransitionMode::Stable).unwrap();
        assert_eq!(s.a_bar.item(), d.a_bar.item());
        assert_eq!(s.b_bar.item(), d.b_bar.item());
    }

    #[test]
    fn limit_branch_uses_delta_times_b() {
        let d = discretize(&params_1x1(1e-9, 0.5, 3.0), TransitionMode::Literal).unwrap();
        assert_eq!(d.b_bar.item(), 0.5 * 3.0);
        let near = discretize(&params_1x1(4e-8, 0.5, 3.0), TransitionMode::Literal).unwrap();
        assert!(((near.b_bar.item() - 1.5) / 1.5).abs() < 1e-6);
    }

    #[test]
    fn non_positive_delta_is_rejected() {
        let err = discretize(&params_1x1(1.0, 0.0, 1.0), TransitionMode::Stable).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn zero_transition_is_memoryless() {
        let (t, d, n) = (4, 2, 3);
        let disc = DiscretizedSsm {
            a_bar: Tensor::zeros(vec![t, d]),
            b_bar: Tensor::new(vec![t, d, n], (0..t * d * n).map(|i| 0.1 * i as f64).collect()).unwrap(),
        };
        let x = Tensor::new(vec![t, d], (0..t * d).map(|i| 1.0 + i as f64).collect()).unwrap();
        let c = Tensor::new(vec![t, n], (0..t * n).map(|i| (i as f64).cos()).collect()).unwrap();
        let skip = Tensor::vector(vec![0.5, -0.25]);
        let y = scan_sequential(&x, &disc, &c, &skip).unwrap();
        for ti in 0..t {
            for ch in 0..d {
                let mut coef = 0.0;
                for k in 0..n {
                    coef += c.at(ti, k) * disc.b_bar.data()[(ti * d + ch) * n + k];
                }
                let xv = x.at(ti, ch);
                let expect = coef * xv + skip.data()[ch] * xv;
                assert!((y.at(ti, ch) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_transition_accumulates() {
        let t = 10;
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
        for (i, v) in y.data().iter().enumerate() {
            assert_eq!(*v, (i + 1) as f64);
        }
    }

    #[test]
    fn zero_block_length_is_a_config_error() {
        assert!(matches!(ScanBlockPlan::new(0), Err(Error::Config(_))));
        assert_eq!(ScanBlockPlan::new(3).unwrap().block_count(7), 3);
    }

    #[test]
    fn flops_are_linear_in_length() {
        assert_eq!(flops_scan(1024, 64, 16), 2 * flops_scan(512, 64, 16));
        assert_eq!(flops_scan(1, 1, 1), 12);
    }
}
