//! Analytic floating-point operation counts.
//!
//! Conventions: an add, multiply, divide, compare or `exp` is one operation;
//! a sigmoid, SiLU or softplus is [`ACT`] operations per element. Everything
//! is exact integer arithmetic so ratios can be compared exactly.

use crate::cmm::CmmLayerConfig;
use crate::mamba::MambaConfig;
use crate::scan::flops_scan;

/// Cost of one sigmoid-family activation.
pub const ACT: u64 = 4;

/// `x W + b` over `rows` rows.
pub fn linear(rows: u64, inp: u64, out: u64) -> u64 {
    2 * rows * inp * out + rows * out
}

/// Mean, variance, normalisation and affine.
pub fn layer_norm(rows: u64, dim: u64) -> u64 {
    8 * rows * dim
}

/// Depthwise causal conv plus bias.
pub fn conv(rows: u64, channels: u64, width: u64) -> u64 {
    2 * rows * channels * width + rows * channels
}

/// Multi-head attention with Q, K, V projections (and `O` when
/// `with_output`), `rows_q` queries over `rows_kv` keys.
///
/// Scores cost `2·Tq·Tk·D` summed over heads, scaling one operation per
/// score, softmax five (max, subtract, exp, sum, divide), and the weighted
/// sum of values another `2·Tq·Tk·D`.
pub fn attention_general(rows_q: u64, rows_kv: u64, dim: u64, heads: u64, with_output: bool) -> u64 {
    let proj = linear(rows_q, dim, dim) + 2 * linear(rows_kv, dim, dim);
    let out = if with_output { linear(rows_q, dim, dim) } else { 0 };
    let core = 4 * rows_q * rows_kv * dim + 6 * heads * rows_q * rows_kv;
    proj + out + core
}

/// Self-attention block over `T` tokens: projections, scores, softmax,
/// weighted values and the output projection.
pub fn flops_attention(seq_len: u64, d_model: u64, heads: u64) -> u64 {
    attention_general(seq_len, seq_len, d_model, heads, true)
}

/// One unimodal mixer pass (no residual).
pub fn mixer(rows: u64, cfg: &MambaConfig) -> u64 {
    if rows == 0 {
        return 0;
    }
    let (d, di, n, w) = (
        cfg.d_model as u64,
        cfg.d_inner as u64,
        cfg.state_dim as u64,
        cfg.conv_width as u64,
    );
    layer_norm(rows, d)
        + linear(rows, d, 2 * di)
        + 2 * (linear(rows, di, di) + ACT * rows * di)
        + 2 * (linear(rows, di, n) + conv(rows, n, w) + ACT * rows * n)
        + flops_scan(rows, di, n)
        + conv(rows, di, w)
        + ACT * rows * di
        + rows * di
        + linear(rows, di, d)
}

/// One CMM stream. `other_rows` is the other stream's length (0 when empty).
///
/// The shared `B`/`C` maps are counted in their concatenated form: the
/// `[2·D_inner x N]` product per host row, plus the `α/T` weighted sum that
/// builds the summary (two operations per element of the other stream).
pub fn cmm_stream(rows: u64, other_rows: u64, cfg: &MambaConfig) -> u64 {
    if rows == 0 {
        return 0;
    }
    let (d, di, n, w) = (
        cfg.d_model as u64,
        cfg.d_inner as u64,
        cfg.state_dim as u64,
        cfg.conv_width as u64,
    );
    let bc_in = if other_rows > 0 { 2 * di } else { di };
    let pool = if other_rows > 0 { 2 * other_rows * di } else { 0 };
    (mixer(rows, cfg) + rows * d)
        + layer_norm(rows, d)
        + linear(rows, d, 2 * di)
        + 2 * (linear(rows, di, di) + ACT * rows * di)
        + pool
        + 2 * (linear(rows, bc_in, n) + conv(rows, n, w) + ACT * rows * n)
        + flops_scan(rows, di, n)
        + conv(rows, di, w)
        + ACT * rows * di
        + rows * di
        + linear(rows, di, d)
        + rows * d
        + layer_norm(rows, d)
}

/// Both streams of one CMM block.
pub fn flops_cmm(t_v: u64, t_l: u64, cfg: &CmmLayerConfig) -> u64 {
    let (ov, ol) = if cfg.alpha() == 0.0 { (0, 0) } else { (t_l, t_v) };
    cmm_stream(t_v, ov, &cfg.mamba) + cmm_stream(t_l, ol, &cfg.mamba)
}

/// `LN(x + attn(x))` then `LN(h + mlp(h))` with MLP ratio 2.
pub fn transformer_block(rows: u64, d: u64, heads: u64) -> u64 {
    let hidden = 2 * d;
    flops_attention(rows, d, heads)
        + rows * d
        + layer_norm(rows, d)
        + linear(rows, d, hidden)
        + ACT * rows * hidden
        + linear(rows, hidden, d)
        + rows * d
        + layer_norm(rows, d)
}

/// Optional self-attention sublayer, then `LN(h + mix(h))`.
pub fn sam_block(rows: u64, cfg: &MambaConfig, heads: u64, with_attention: bool) -> u64 {
    let d = cfg.d_model as u64;
    let attn = if with_attention {
        flops_attention(rows, d, heads) + rows * d + layer_norm(rows, d)
    } else {
        0
    };
    attn + mixer(rows, cfg) + rows * d + layer_norm(rows, d)
}

/// Per-module counts that add up to a total.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopsTable {
    pub rows: Vec<(String, u64)>,
}

impl FlopsTable {
    pub fn push(&mut self, name: impl Into<String>, count: u64) {
        self.rows.push((name.into(), count));
    }

    pub fn total(&self) -> u64 {
        self.rows.iter().map(|r| r.1).sum()
    }

    pub fn get(&self, name: &str) -> Option<u64> {
        self.rows.iter().find(|r| r.0 == name).map(|r| r.1)
    }
}
