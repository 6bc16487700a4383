//! Self-attention Mamba block: a self-attention sublayer followed by a
//! unimodal selective-SSM sublayer, each wrapped as `LN(x + f(x))`.

use crate::error::{Error, Result};
use crate::mamba::{MambaConfig, MambaMixer};
use crate::nn::{residual_norm, Attention, LayerNorm};
use crate::param::Builder;
use crate::tape::{Tape, Var};

pub const DEFAULT_HEADS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SamBlockConfig {
    pub heads: usize,
    pub mamba: MambaConfig,
    /// `false` drops the attention sublayer (and its norm) entirely.
    pub with_attention: bool,
}

impl SamBlockConfig {
    pub fn new(mamba: MambaConfig) -> Self {
        SamBlockConfig {
            heads: DEFAULT_HEADS,
            mamba,
            with_attention: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.mamba.d_model / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.mamba.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "{} heads do not divide width {}",
                self.heads, self.mamba.d_model
            )));
        }
        self.mamba.validate()
    }
}

#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub attn: Attention,
    pub norm: LayerNorm,
}

impl SelfAttention {
    pub fn new(b: &mut Builder<'_>, name: &str, dim: usize, heads: usize) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(SelfAttention {
            attn: Attention::with_output(&mut s, "attn", dim, heads)?,
            norm: LayerNorm::new(&mut s, "norm", dim)?,
        })
    }

    /// `LN(x + out(MHA(x)))`
    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let a = self.attn.forward(t, x, x)?;
        residual_norm(t, &self.norm, x, a)
    }

    pub fn num_params(&self) -> usize {
        self.attn.num_params() + 2 * self.norm.dim
    }
}

#[derive(Clone, Debug)]
pub struct SamBlock {
    pub attention: Option<SelfAttention>,
    pub mixer: MambaMixer,
    pub norm: LayerNorm,
}

impl SamBlock {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: SamBlockConfig) -> Result<Self> {
        cfg.validate()?;
        let mut s = b.sub(name);
        let d = cfg.mamba.d_model;
        Ok(SamBlock {
            attention: if cfg.with_attention {
                Some(SelfAttention::new(&mut s, "self_attn", d, cfg.heads)?)
            } else {
                None
            },
            mixer: MambaMixer::new(&mut s, "mamba", cfg.mamba)?,
            norm: LayerNorm::new(&mut s, "mamba_norm", d)?,
        })
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = match &self.attention {
            Some(sa) => sa.forward(t, x)?,
            None => x,
        };
        let m = self.mixer.forward(t, h)?;
        residual_norm(t, &self.norm, h, m)
    }
}
