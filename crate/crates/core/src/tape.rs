//! Per-forward-pass reverse-mode tape.
//!
//! A [`Tape`] borrows the parameter store immutably, records every operation
//! as a node, and replays the nodes in reverse creation order during
//! [`Tape::backward`]. Nodes are only ever appended, so creation order is a
//! topological order and every node is visited exactly once.
//!
//! Tapes are cheap to create and are meant to be dropped after one
//! forward/backward pass. Several tapes can borrow the same store from
//! different workers; the resulting [`Gradients`] are summed afterwards.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::scan::{self, DiscretizedSsm, ScanBlockPlan, TransitionMode};
use crate::tensor::{dot, matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Silu,
    Sigmoid,
    Softplus,
    Exp,
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "silu" => Ok(Activation::Silu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "softplus" => Ok(Activation::Softplus),
            "exp" => Ok(Activation::Exp),
            other => Err(Error::config(format!("unknown activation `{other}`"))),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Activation::Silu => "silu",
            Activation::Sigmoid => "sigmoid",
            Activation::Softplus => "softplus",
            Activation::Exp => "exp",
        };
        f.write_str(s)
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Silu => silu(x),
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
            Activation::Exp => x.exp(),
        }
    }

    /// Derivative given the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Softplus => sigmoid(x),
            Activation::Exp => y,
        }
    }
}

enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Act(Var, Activation),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: Var,
        kernel: Var,
        offset: isize,
    },
    MeanRows(Var),
    BroadcastRows(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    Scan(Box<ScanSaved>),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct ScanSaved {
    x: Var,
    a: Var,
    delta: Var,
    b: Var,
    c: Var,
    d_skip: Var,
    mode: TransitionMode,
    disc: DiscretizedSsm,
    states: Vec<f64>,
}

struct Node {
    /// `None` for parameter leaves, whose value lives in the store.
    value: Option<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Inputs of the fused selective-scan operation.
#[derive(Clone, Copy, Debug)]
pub struct ScanArgs {
    /// `[T x D]`
    pub x: Var,
    /// `[T x D]`, transition values before the mode's sign is applied.
    pub a: Var,
    /// `[T x D]`, strictly positive.
    pub delta: Var,
    /// `[T x N]`
    pub b: Var,
    /// `[T x N]`
    pub c: Var,
    /// `[D]`
    pub d_skip: Var,
}

pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grad_enabled: bool,
    scan_plan: ScanBlockPlan,
}

impl<'p> Tape<'p> {
    /// A recording tape.
    pub fn new(params: &'p ParamStore) -> Self {
        Tape {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            grad_enabled: true,
            scan_plan: ScanBlockPlan::default(),
        }
    }

    /// A tape that keeps only forward values; [`Tape::backward`] fails on it.
    pub fn inference(params: &'p ParamStore) -> Self {
        Tape {
            grad_enabled: false,
            ..Tape::new(params)
        }
    }

    pub fn with_scan_plan(mut self, plan: ScanBlockPlan) -> Self {
        self.scan_plan = plan;
        self
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            (None, _) => unreachable!("only parameter nodes borrow their value"),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = self.grad_enabled && inputs.iter().any(|&i| self.requires_grad(i));
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Input,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is reported by [`Tape::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Input,
            requires_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// The node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: self.grad_enabled,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.index()] = Some(v);
        v
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(Error::dim(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::new(vec![n, m], out)?, Op::Transpose(a), &[a]))
    }

    fn zip_same(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_same(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    fn row_broadcast(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rank() != 1 || tb.len() != ta.cols() {
            return Err(Error::dim(op, ta.shape(), tb.shape()));
        }
        let c = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(c.max(1)) {
            for (x, &y) in row.iter_mut().zip(tb.data()) {
                *x = f(*x, y);
            }
        }
        Tensor::new(ta.shape().to_vec(), data)
    }

    /// `a[.., c] + b[c]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.row_broadcast(a, b, "add_row", |x, y| x + y)?;
        Ok(self.push(t, Op::AddRow(a, b), &[a, b]))
    }

    /// `a[.., c] * g[c]` broadcast over rows.
    pub fn mul_row(&mut self, a: Var, g: Var) -> Result<Var> {
        let t = self.row_broadcast(a, g, "mul_row", |x, y| x * y)?;
        Ok(self.push(t, Op::MulRow(a, g), &[a, g]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x * s);
        self.push(t, Op::Scale(a, s), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|x| x + s);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Var {
        let t = self.value(a).map(|x| kind.apply(x));
        self.push(t, Op::Act(a, kind), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Silu)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Softplus)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.activation(a, Activation::Exp)
    }

    /// Softmax over the last dimension, with max subtraction.
    pub fn softmax_last(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.cols();
        if n == 0 {
            return Err(Error::dim("softmax_last", ta.shape(), &[1]));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, Op::Softmax(a), &[a]))
    }

    /// Normalises each row of `x` to zero mean and unit (biased) variance,
    /// then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        if d == 0 || self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::dim("layer_norm", tx.shape(), self.value(gain).shape()));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::new(tx.shape().to_vec(), out)?;
        let (xhat, rstd) = if self.grad_enabled {
            (xhat, rstd)
        } else {
            (Vec::new(), Vec::new())
        };
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        ))
    }

    /// Depthwise 1-D convolution over rows: `y[t,c] = sum_k K[k,c] x[t-k,c]`
    /// when causal, with zero padding; non-causal mode centres the kernel.
    pub fn conv1d(&mut self, x: Var, kernel: Var, causal: bool) -> Result<Var> {
        let (t_len, d) = self.matrix_dims(x, "conv1d")?;
        let (w, kd) = self.matrix_dims(kernel, "conv1d")?;
        if kd != d || w == 0 {
            return Err(Error::dim("conv1d", &[t_len, d], &[w, kd]));
        }
        let offset = if causal { 0 } else { ((w - 1) / 2) as isize };
        let (xs, ks) = (self.value(x).data(), self.value(kernel).data());
        let mut out = vec![0.0; t_len * d];
        for t in 0..t_len {
            for k in 0..w {
                let src = t as isize + offset - k as isize;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let src = src as usize;
                let (o, xr, kr) = (
                    &mut out[t * d..(t + 1) * d],
                    &xs[src * d..(src + 1) * d],
                    &ks[k * d..(k + 1) * d],
                );
                for c in 0..d {
                    o[c] += kr[c] * xr[c];
                }
            }
        }
        let t = Tensor::new(vec![t_len, d], out)?;
        Ok(self.push(t, Op::Conv1d { x, kernel, offset }, &[x, kernel]))
    }

    /// `[T x d] -> [1 x d]`
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (t_len, d) = self.matrix_dims(x, "mean_rows")?;
        if t_len == 0 {
            return Err(Error::contract("mean over an empty sequence"));
        }
        let mut out = vec![0.0; d];
        for row in self.value(x).data().chunks(d) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= t_len as f64;
        }
        Ok(self.push(Tensor::new(vec![1, d], out)?, Op::MeanRows(x), &[x]))
    }

    /// `[1 x d] -> [rows x d]`
    pub fn broadcast_rows(&mut self, x: Var, rows: usize) -> Result<Var> {
        let (r, d) = self.matrix_dims(x, "broadcast_rows")?;
        if r != 1 {
            return Err(Error::dim("broadcast_rows", &[r, d], &[1, d]));
        }
        let src = self.value(x).data();
        let data = src.iter().copied().cycle().take(rows * d).collect();
        Ok(self.push(Tensor::new(vec![rows, d], data)?, Op::BroadcastRows(x), &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_cols")?;
        if start + len > c {
            return Err(Error::dim("slice_cols", &[r, c], &[start, len]));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.push(Tensor::new(vec![r, len], data)?, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let (r, _) = self.matrix_dims(first, "concat_cols")?;
        let mut total = 0;
        for &p in parts {
            let (pr, pc) = self.matrix_dims(p, "concat_cols")?;
            if pr != r {
                return Err(Error::dim("concat_cols", &[r], &[pr, pc]));
            }
            total += pc;
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(Tensor::new(vec![r, total], data)?, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_rows")?;
        if start + len > r {
            return Err(Error::dim("slice_rows", &[r, c], &[start, len]));
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        Ok(self.push(Tensor::new(vec![len, c], data)?, Op::SliceRows { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::contract("concat of nothing"))?;
        let (_, c) = self.matrix_dims(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pr, pc) = self.matrix_dims(p, "concat_rows")?;
            if pc != c {
                return Err(Error::dim("concat_rows", &[c], &[pr, pc]));
            }
            rows += pr;
            data.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(Tensor::new(vec![rows, c], data)?, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// `out[i] = x[index[i]]`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "gather_rows")?;
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(Error::dim("gather_rows", &[r, c], &[bad]));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(index.len() * c);
        for &i in index {
            data.extend_from_slice(src.row(i));
        }
        let t = Tensor::new(vec![index.len(), c], data)?;
        Ok(self.push(
            t,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.is_empty() {
            return Err(Error::contract("mean of an empty tensor"));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), &[x]))
    }

    /// Multi-head scaled dot-product attention without masking:
    /// `softmax(Q_h K_hᵀ / sqrt(d_h)) V_h` per head, heads concatenated.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, dm) = self.matrix_dims(q, "attention")?;
        let (tk, dk) = self.matrix_dims(k, "attention")?;
        if dk != dm || self.shape(v) != [tk, dm] {
            return Err(Error::dim("attention", &[tq, dm], self.shape(v)));
        }
        if tk == 0 {
            return Err(Error::contract("attention over an empty key set"));
        }
        if heads == 0 || dm % heads != 0 {
            return Err(Error::config(format!("{heads} heads do not divide width {dm}")));
        }
        let mut probs = if self.grad_enabled {
            Some(vec![0.0; heads * tq * tk])
        } else {
            None
        };
        let out = attention_forward(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            (tq, tk, dm, heads),
            probs.as_deref_mut(),
        );
        let t = Tensor::new(vec![tq, dm], out)?;
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs: probs.unwrap_or_default(),
            },
            &[q, k, v],
        ))
    }

    /// Fused zero-order-hold discretization plus selective scan, executed
    /// with the tape's block plan.
    pub fn selective_scan(&mut self, args: ScanArgs, mode: TransitionMode) -> Result<Var> {
        let params = scan::SsmParams::new(
            self.value(args.a).clone(),
            self.value(args.b).clone(),
            self.value(args.c).clone(),
            self.value(args.delta).clone(),
            self.value(args.d_skip).clone(),
        )?;
        let disc = scan::discretize(&params, mode)?;
        let (y, states) = scan::scan_blocked_with_states(
            self.value(args.x),
            &disc,
            &params.c,
            &params.d_skip,
            self.scan_plan,
            self.grad_enabled,
        )?;
        let inputs = [args.x, args.a, args.delta, args.b, args.c, args.d_skip];
        let saved = match states {
            Some(states) => ScanSaved {
                x: args.x,
                a: args.a,
                delta: args.delta,
                b: args.b,
                c: args.c,
                d_skip: args.d_skip,
                mode,
                disc,
                states,
            },
            None => ScanSaved {
                x: args.x,
                a: args.a,
                delta: args.delta,
                b: args.b,
                c: args.c,
                d_skip: args.d_skip,
                mode,
                disc: DiscretizedSsm {
                    a_bar: Tensor::zeros(vec![0, 0]),
                    b_bar: Tensor::zeros(vec![0, 0, 0]),
                },
                states: Vec::new(),
            },
        };
        Ok(self.push(y, Op::Scan(Box::new(saved)), &inputs))
    }

    /// Mean cross-entropy of `logits[n x K]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::dim("cross_entropy", &[n, k], &[targets.len()]));
        }
        if n == 0 {
            return Err(Error::contract("cross entropy over zero rows"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::contract(format!("target {bad} outside {k} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &target) in probs.chunks_mut(k).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[target];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let t = Tensor::scalar(loss / n as f64);
        let probs = if self.grad_enabled { probs } else { Vec::new() };
        Ok(self.push(
            t,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Reverse pass from a scalar.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::contract("backward on an inference tape"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.requires_grad(loss) {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if matches!(node.op, Op::Input | Op::Param(_)) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(Var(i), &g, &mut grads);
        }
        let params = self
            .param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (ParamId(i), v)))
            .collect();
        Ok(Gradients { grads, params })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.requires_grad(v) {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, out: Var, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[out.0];
        let y = node.value.as_ref().expect("op nodes own their value");
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if let Some(ga) = self.slot(grads, *a) {
                    matmul_bt_acc(g, self.value(*b).data(), m, n, k, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    matmul_at_acc(self.value(*a).data(), g, m, k, n, gb);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..m {
                        for j in 0..n {
                            ga[i * n + j] += g[j * m + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        axpy(gv, 1.0, g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, 1.0, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    axpy(gb, -1.0, g);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((o, gi), bi) in ga.iter_mut().zip(g).zip(vb) {
                        *o += gi * bi;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((o, gi), ai) in gb.iter_mut().zip(g).zip(va) {
                        *o += gi * ai;
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, 1.0, g);
                }
                let c = self.value(*b).len();
                if let Some(gb) = self.slot(grads, *b) {
                    for row in g.chunks(c.max(1)) {
                        axpy(gb, 1.0, row);
                    }
                }
            }
            Op::MulRow(a, s) => {
                let (va, vs) = (self.value(*a).data(), self.value(*s).data());
                let c = vs.len().max(1);
                if let Some(ga) = self.slot(grads, *a) {
                    for (grow, orow) in g.chunks(c).zip(ga.chunks_mut(c)) {
                        for ((o, gi), si) in orow.iter_mut().zip(grow).zip(vs) {
                            *o += gi * si;
                        }
                    }
                }
                if let Some(gs) = self.slot(grads, *s) {
                    for (grow, arow) in g.chunks(c).zip(va.chunks(c)) {
                        for ((o, gi), ai) in gs.iter_mut().zip(grow).zip(arow) {
                            *o += gi * ai;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, *s, g);
                }
            }
            Op::AddScalar(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    axpy(ga, 1.0, g);
                }
            }
            Op::Act(a, kind) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.slot(grads, *a) {
                    for i in 0..g.len() {
                        ga[i] += g[i] * kind.derivative(x[i], y.data()[i]);
                    }
                }
            }
            Op::Softmax(a) => {
                let n = y.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((yr, gr), or) in y.data().chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                        let s = dot(yr, gr);
                        for j in 0..n {
                            or[j] += yr[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = y.cols();
                let gv = self.value(*gain).data();
                if let Some(gb) = self.slot(grads, *bias) {
                    for row in g.chunks(d) {
                        axpy(gb, 1.0, row);
                    }
                }
                if let Some(gg) = self.slot(grads, *gain) {
                    for (grow, xrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += grow[j] * xrow[j];
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let mut gxhat = vec![0.0; d];
                    for (r, (grow, xrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for j in 0..d {
                            gxhat[j] = grow[j] * gv[j];
                        }
                        let mean_g = gxhat.iter().sum::<f64>() / d as f64;
                        let mean_gx = dot(&gxhat, xrow) / d as f64;
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            out[j] += rstd[r] * (gxhat[j] - mean_g - xrow[j] * mean_gx);
                        }
                    }
                }
            }
            Op::Conv1d { x, kernel, offset } => {
                let (t_len, d) = (y.shape()[0], y.shape()[1]);
                let w = self.shape(*kernel)[0];
                let (xs, ks) = (self.value(*x).data(), self.value(*kernel).data());
                let mut taps = Vec::new();
                for t in 0..t_len {
                    for k in 0..w {
                        let src = t as isize + offset - k as isize;
                        if src >= 0 && src < t_len as isize {
                            taps.push((t, k, src as usize));
                        }
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    for &(t, k, src) in &taps {
                        for c in 0..d {
                            gx[src * d + c] += g[t * d + c] * ks[k * d + c];
                        }
                    }
                }
                if let Some(gk) = self.slot(grads, *kernel) {
                    for &(t, k, src) in &taps {
                        for c in 0..d {
                            gk[k * d + c] += g[t * d + c] * xs[src * d + c];
                        }
                    }
                }
            }
            Op::MeanRows(x) => {
                let (t_len, d) = (self.shape(*x)[0], self.shape(*x)[1]);
                if let Some(gx) = self.slot(grads, *x) {
                    let inv = 1.0 / t_len as f64;
                    for row in gx.chunks_mut(d) {
                        axpy(row, inv, g);
                    }
                }
            }
            Op::BroadcastRows(x) => {
                let d = y.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for row in g.chunks(d.max(1)) {
                        axpy(gx, 1.0, row);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let c = self.shape(*x)[1];
                let len = y.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, grow) in g.chunks(len.max(1)).enumerate() {
                        axpy(&mut gx[i * c + start..i * c + start + len], 1.0, grow);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let rows = y.rows();
                let mut off = 0;
                for &p in parts {
                    let pc = self.shape(p)[1];
                    if let Some(gp) = self.slot(grads, p) {
                        for i in 0..rows {
                            axpy(&mut gp[i * pc..(i + 1) * pc], 1.0, &g[i * total + off..i * total + off + pc]);
                        }
                    }
                    off += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let c = y.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    axpy(&mut gx[start * c..start * c + g.len()], 1.0, g);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.slot(grads, p) {
                        axpy(gp, 1.0, &g[off..off + len]);
                    }
                    off += len;
                }
            }
            Op::GatherRows { x, index } => {
                let c = y.cols();
                if let Some(gx) = self.slot(grads, *x) {
                    for (i, &src) in index.iter().enumerate() {
                        axpy(&mut gx[src * c..(src + 1) * c], 1.0, &g[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                if let Some(gx) = self.slot(grads, *x) {
                    for o in gx.iter_mut() {
                        *o += g[0] / n;
                    }
                }
            }
            Op::Attention { q, k, v, heads, probs } => {
                self.attention_backward(g, (*q, *k, *v, *heads), probs, grads);
            }
            Op::Scan(saved) => self.scan_backward(g, saved, grads),
            Op::CrossEntropy { logits, targets, probs } => {
                let k = self.shape(*logits)[1];
                let n = targets.len() as f64;
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut gl[r * k..(r + 1) * k];
                        for j in 0..k {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            row[j] += g[0] * (probs[r * k + j] - onehot) / n;
                        }
                    }
                }
            }
        }
    }

    fn attention_backward(
        &self,
        g: &[f64],
        (q, k, v, heads): (Var, Var, Var, usize),
        probs: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (tq, dm) = (self.shape(q)[0], self.shape(q)[1]);
        let tk = self.shape(k)[0];
        let dh = dm / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qs, ks, vs) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![0.0; tq * dm];
        let mut gk = vec![0.0; tk * dm];
        let mut gv = vec![0.0; tk * dm];
        let mut gp = vec![0.0; tk];
        for h in 0..heads {
            let kh = pack_head(ks, tk, dm, h, dh);
            let vh = pack_head(vs, tk, dm, h, dh);
            let mut gkh = vec![0.0; tk * dh];
            let mut gvh = vec![0.0; tk * dh];
            for i in 0..tq {
                let p = &probs[(h * tq + i) * tk..(h * tq + i + 1) * tk];
                let go = &g[i * dm + h * dh..i * dm + (h + 1) * dh];
                let qi = &qs[i * dm + h * dh..i * dm + (h + 1) * dh];
                for j in 0..tk {
                    gp[j] = dot(go, &vh[j * dh..(j + 1) * dh]);
                    axpy(&mut gvh[j * dh..(j + 1) * dh], p[j], go);
                }
                let s = dot(p, &gp);
                let gqi = &mut gq[i * dm + h * dh..i * dm + (h + 1) * dh];
                for j in 0..tk {
                    let gs = p[j] * (gp[j] - s) * scale;
                    if gs == 0.0 {
                        continue;
                    }
                    axpy(gqi, gs, &kh[j * dh..(j + 1) * dh]);
                    axpy(&mut gkh[j * dh..(j + 1) * dh], gs, qi);
                }
            }
            for j in 0..tk {
                gk[j * dm + h * dh..j * dm + (h + 1) * dh].copy_from_slice(&gkh[j * dh..(j + 1) * dh]);
                gv[j * dm + h * dh..j * dm + (h + 1) * dh].copy_from_slice(&gvh[j * dh..(j + 1) * dh]);
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(slot) = self.slot(grads, var) {
                axpy(slot, 1.0, &local);
            }
        }
    }

    fn scan_backward(&self, gy: &[f64], s: &ScanSaved, grads: &mut [Option<Vec<f64>>]) {
        let (t_len, d, n) = (s.disc.seq_len(), s.disc.channels(), s.disc.state_dim());
        let x = self.value(s.x).data();
        let a = self.value(s.a).data();
        let dt = self.value(s.delta).data();
        let b = self.value(s.b).data();
        let c = self.value(s.c).data();
        let skip = self.value(s.d_skip).data();
        let a_bar = s.disc.a_bar.data();
        let b_bar = s.disc.b_bar.data();
        let h = &s.states;
        let sign = s.mode.sign();

        let mut gx = vec![0.0; t_len * d];
        let mut ga = vec![0.0; t_len * d];
        let mut gdt = vec![0.0; t_len * d];
        let mut gb = vec![0.0; t_len * n];
        let mut gc = vec![0.0; t_len * n];
        let mut gskip = vec![0.0; d];
        // Gradient reaching h[t] from step t+1, already multiplied by Ā[t+1].
        let mut carry = vec![0.0; d * n];
        let mut gh = vec![0.0; n];

        for t in (0..t_len).rev() {
            let c_row = &c[t * n..(t + 1) * n];
            let b_row = &b[t * n..(t + 1) * n];
            for ch in 0..d {
                let i = t * d + ch;
                let g_out = gy[i];
                let xv = x[i];
                gskip[ch] += g_out * xv;
                gx[i] += g_out * skip[ch];
                let h_now = &h[i * n..(i + 1) * n];
                let bb = &b_bar[i * n..(i + 1) * n];
                let cr = &mut carry[ch * n..(ch + 1) * n];
                for k in 0..n {
                    gh[k] = g_out * c_row[k] + cr[k];
                    gc[t * n + k] += g_out * h_now[k];
                }
                let mut g_abar = 0.0;
                if t > 0 {
                    g_abar = dot(&gh, &h[(i - d) * n..(i - d + 1) * n]);
                }
                gx[i] += dot(&gh, bb);
                // B̄ = coef * B
                let g_coef = xv * dot(&gh, b_row);
                let a_eff = sign * a[i];
                let z = a_eff * dt[i];
                let (abar, coef) = scan::zoh(a_eff, dt[i]);
                let gb_row = &mut gb[t * n..(t + 1) * n];
                for k in 0..n {
                    gb_row[k] += gh[k] * xv * coef;
                    cr[k] = gh[k] * a_bar[i];
                }
                let limit = z.abs() < scan::LIMIT_THRESHOLD;
                let dphi = if limit { 0.5 } else { scan::phi_prime(z) };
                let g_a_eff = g_abar * abar * dt[i] + g_coef * dt[i] * dt[i] * dphi;
                ga[i] += sign * g_a_eff;
                gdt[i] += g_abar * abar * a_eff + g_coef * abar;
            }
        }

        for (var, local) in [
            (s.x, gx),
            (s.a, ga),
            (s.delta, gdt),
            (s.b, gb),
            (s.c, gc),
            (s.d_skip, gskip),
        ] {
            if let Some(slot) = self.slot(grads, var) {
                axpy(slot, 1.0, &local);
            }
        }
    }
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of a leaf (`leaf` or `param` node).
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, v)| self.get(*v))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.get(*v).map(|g| (*id, g)))
    }

    /// Adds these gradients into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        self.accumulate_scaled_into(store, 1.0);
    }

    pub fn accumulate_scaled_into(&self, store: &mut ParamStore, scale: f64) {
        for (id, g) in self.params() {
            axpy(store.grad_mut(id).data_mut(), scale, g);
        }
    }
}

#[inline]
fn axpy(out: &mut [f64], alpha: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

fn pack_head(src: &[f64], rows: usize, dm: usize, h: usize, dh: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * dh);
    for j in 0..rows {
        out.extend_from_slice(&src[j * dm + h * dh..j * dm + (h + 1) * dh]);
    }
    out
}

/// Row-streamed attention forward; when `probs` is given the weights of every
/// head and query row are written to it (`[heads x tq x tk]`).
pub(crate) fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    (tq, tk, dm, heads): (usize, usize, usize, usize),
    mut probs: Option<&mut [f64]>,
) -> Vec<f64> {
    let dh = dm / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; tq * dm];
    let mut scores = vec![0.0; tk];
    for h in 0..heads {
        let kh = pack_head(k, tk, dm, h, dh);
        let vh = pack_head(v, tk, dm, h, dh);
        for i in 0..tq {
            let qi = &q[i * dm + h * dh..i * dm + (h + 1) * dh];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = dot(qi, &kh[j * dh..(j + 1) * dh]) * scale;
            }
            softmax_in_place(&mut scores);
            if let Some(p) = probs.as_deref_mut() {
                p[(h * tq + i) * tk..(h * tq + i + 1) * tk].copy_from_slice(&scores);
            }
            let o = &mut out[i * dm + h * dh..i * dm + (h + 1) * dh];
            for (j, &pj) in scores.iter().enumerate() {
                axpy(o, pj, &vh[j * dh..(j + 1) * dh]);
            }
        }
    }
    out
}

/// Attention weights `[heads x tq x tk]` for already-projected queries/keys.
pub fn attention_weights(q: &Tensor, k: &Tensor, heads: usize) -> Result<Tensor> {
    let (tq, dm) = (q.rows(), q.cols());
    let tk = k.rows();
    if k.cols() != dm || heads == 0 || dm % heads != 0 {
        return Err(Error::dim("attention_weights", q.shape(), k.shape()));
    }
    let mut probs = vec![0.0; heads * tq * tk];
    let zeros = vec![0.0; tk * dm];
    attention_forward(q.data(), k.data(), &zeros, (tq, tk, dm, heads), Some(&mut probs));
    Tensor::new(vec![heads, tq, tk], probs)
}
