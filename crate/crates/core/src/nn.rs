//! Parameterised layers shared by every block.

use crate::error::Result;
use crate::param::{Builder, ParamId};
use crate::tape::{Tape, Var};

pub const LN_EPS: f64 = 1e-5;

/// `y = x W + b` with `W` stored `[in x out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut Builder<'_>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(Linear {
            weight: s.fan_in("weight", vec![in_dim, out_dim], in_dim)?,
            bias: Some(s.zeros("bias", vec![out_dim])?),
            in_dim,
            out_dim,
        })
    }

    pub fn no_bias(b: &mut Builder<'_>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(Linear {
            weight: s.fan_in("weight", vec![in_dim, out_dim], in_dim)?,
            bias: None,
            in_dim,
            out_dim,
        })
    }

    /// Weight and bias both start at zero.
    pub fn zeroed(b: &mut Builder<'_>, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(Linear {
            weight: s.zeros("weight", vec![in_dim, out_dim])?,
            bias: Some(s.zeros("bias", vec![out_dim])?),
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = t.param(self.weight);
        let y = t.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = t.param(b);
                t.add_row(y, b)
            }
            None => Ok(y),
        }
    }

    pub fn num_params(&self) -> usize {
        self.in_dim * self.out_dim + if self.bias.is_some() { self.out_dim } else { 0 }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub dim: usize,
}

impl LayerNorm {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(LayerNorm {
            gain: s.ones("gain", vec![dim])?,
            bias: s.zeros("bias", vec![dim])?,
            dim,
        })
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (g, b) = (t.param(self.gain), t.param(self.bias));
        t.layer_norm(x, g, b, LN_EPS)
    }
}

/// Causal depthwise convolution with a per-channel bias.
#[derive(Clone, Debug)]
pub struct DepthwiseConv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub width: usize,
    pub channels: usize,
}

impl DepthwiseConv {
    pub fn new(b: &mut Builder<'_>, name: &str, width: usize, channels: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(DepthwiseConv {
            kernel: s.fan_in("kernel", vec![width, channels], width)?,
            bias: s.zeros("bias", vec![channels])?,
            width,
            channels,
        })
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let k = t.param(self.kernel);
        let y = t.conv1d(x, k, true)?;
        let b = t.param(self.bias);
        t.add_row(y, b)
    }
}

/// `Linear -> SiLU -> Linear`
#[derive(Clone, Debug)]
pub struct Mlp {
    pub up: Linear,
    pub down: Linear,
}

impl Mlp {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, hidden: usize, out: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(Mlp {
            up: Linear::new(&mut s, "up", dim, hidden)?,
            down: Linear::new(&mut s, "down", hidden, out)?,
        })
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.up.forward(t, x)?;
        let h = t.silu(h);
        self.down.forward(t, h)
    }
}

/// Multi-head scaled dot-product attention with query, key and value
/// projections and an optional output projection.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Option<Linear>,
    pub heads: usize,
}

impl Attention {
    /// Self-attention layout: Q, K, V and an output projection.
    pub fn with_output(b: &mut Builder<'_>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(Attention {
            q: Linear::new(&mut s, "q", dim, dim)?,
            k: Linear::new(&mut s, "k", dim, dim)?,
            v: Linear::new(&mut s, "v", dim, dim)?,
            out: Some(Linear::new(&mut s, "out", dim, dim)?),
            heads,
        })
    }

    /// Cross-attention layout: Q, K and V only.
    pub fn cross(b: &mut Builder<'_>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(Attention {
            q: Linear::new(&mut s, "q", dim, dim)?,
            k: Linear::new(&mut s, "k", dim, dim)?,
            v: Linear::new(&mut s, "v", dim, dim)?,
            out: None,
            heads,
        })
    }

    /// Queries from `xq`, keys and values from `xkv`.
    pub fn forward(&self, t: &mut Tape<'_>, xq: Var, xkv: Var) -> Result<Var> {
        let q = self.q.forward(t, xq)?;
        let k = self.k.forward(t, xkv)?;
        let v = self.v.forward(t, xkv)?;
        let o = t.attention(q, k, v, self.heads)?;
        match &self.out {
            Some(out) => out.forward(t, o),
            None => Ok(o),
        }
    }

    pub fn num_params(&self) -> usize {
        self.q.num_params()
            + self.k.num_params()
            + self.v.num_params()
            + self.out.as_ref().map_or(0, Linear::num_params)
    }
}

/// `LN(x + attn(x))` followed by `LN(h + mlp(h))`.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub attn: Attention,
    pub norm1: LayerNorm,
    pub mlp: Mlp,
    pub norm2: LayerNorm,
}

pub const MLP_RATIO: usize = 2;

impl TransformerBlock {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(TransformerBlock {
            attn: Attention::with_output(&mut s, "attn", dim, heads)?,
            norm1: LayerNorm::new(&mut s, "norm1", dim)?,
            mlp: Mlp::new(&mut s, "mlp", dim, MLP_RATIO * dim, dim)?,
            norm2: LayerNorm::new(&mut s, "norm2", dim)?,
        })
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let a = self.attn.forward(t, x, x)?;
        let h = t.add(x, a)?;
        let h = self.norm1.forward(t, h)?;
        let m = self.mlp.forward(t, h)?;
        let o = t.add(h, m)?;
        self.norm2.forward(t, o)
    }
}

/// `LN(x + f(x))`
pub fn residual_norm(t: &mut Tape<'_>, norm: &LayerNorm, x: Var, fx: Var) -> Result<Var> {
    let s = t.add(x, fx)?;
    norm.forward(t, s)
}
