//! Cross-modality block: two mirrored selective-SSM streams whose `B`/`C`
//! generators are shared and see a pooled, layer-scaled summary of the other
//! stream, while `A`/`Δ`, the gate and the projections stay per modality.

use std::fmt;

use crate::error::{Error, Result};
use crate::mamba::{mamba_preproc, BcProjection, MambaConfig, MambaMixer, SsmBranch};
use crate::nn::LayerNorm;
use crate::param::Builder;
use crate::tape::{Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Modality {
    Visual,
    Linguistic,
}

impl Modality {
    pub fn other(self) -> Modality {
        match self {
            Modality::Visual => Modality::Linguistic,
            Modality::Linguistic => Modality::Visual,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::Visual => "visual",
            Modality::Linguistic => "linguistic",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CmmLayerConfig {
    layer_index: usize,
    total_layers: usize,
    pub mamba: MambaConfig,
}

impl CmmLayerConfig {
    /// Layer `l` of `L`, `1 <= l <= L`.
    pub fn new(layer_index: usize, total_layers: usize, mamba: MambaConfig) -> Result<Self> {
        if layer_index == 0 {
            return Err(Error::config("cmm layer index is 1-based"));
        }
        Self::with_extended_index(layer_index, total_layers, mamba)
    }

    /// Like [`CmmLayerConfig::new`] but also accepts `l = 0` (no interaction),
    /// which isolation tests rely on.
    pub fn with_extended_index(layer_index: usize, total_layers: usize, mamba: MambaConfig) -> Result<Self> {
        if total_layers == 0 || layer_index > total_layers {
            return Err(Error::config(format!(
                "cmm layer {layer_index} outside 1..={total_layers}"
            )));
        }
        mamba.validate()?;
        Ok(CmmLayerConfig {
            layer_index,
            total_layers,
            mamba,
        })
    }

    pub fn layer_index(&self) -> usize {
        self.layer_index
    }

    pub fn total_layers(&self) -> usize {
        self.total_layers
    }

    /// `l / L`
    pub fn alpha(&self) -> f64 {
        self.layer_index as f64 / self.total_layers as f64
    }
}

/// Per-modality parameters of one CMM stream.
#[derive(Clone, Debug)]
pub struct CmmStream {
    pub preproc: MambaMixer,
    pub branch: SsmBranch,
    pub out_norm: LayerNorm,
}

impl CmmStream {
    fn new(b: &mut Builder<'_>, name: &str, cfg: MambaConfig) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(CmmStream {
            preproc: MambaMixer::new(&mut s, "preproc", cfg)?,
            branch: SsmBranch::new(&mut s, cfg)?,
            out_norm: LayerNorm::new(&mut s, "out_norm", cfg.d_model)?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct CmmOutputs {
    pub z_v: Var,
    pub z_l: Var,
}

impl CmmOutputs {
    pub fn get(&self, side: Modality) -> Var {
        match side {
            Modality::Visual => self.z_v,
            Modality::Linguistic => self.z_l,
        }
    }
}

/// Intermediate state of one stream after the projection split.
struct Prepared {
    xn: Var,
    u_ssm: Var,
    u_conv: Var,
    rows: usize,
}

#[derive(Clone, Debug)]
pub struct CmmBlock {
    pub visual: CmmStream,
    pub linguistic: CmmStream,
    pub shared: BcProjection,
    pub cfg: CmmLayerConfig,
}

impl CmmBlock {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: CmmLayerConfig) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(CmmBlock {
            visual: CmmStream::new(&mut s, "visual", cfg.mamba)?,
            linguistic: CmmStream::new(&mut s, "linguistic", cfg.mamba)?,
            shared: {
                let mut sh = s.sub("shared");
                BcProjection::new(&mut sh, cfg.mamba, true)?
            },
            cfg,
        })
    }

    pub fn stream(&self, side: Modality) -> &CmmStream {
        match side {
            Modality::Visual => &self.visual,
            Modality::Linguistic => &self.linguistic,
        }
    }

    fn check_width(&self, t: &Tape<'_>, x: Var) -> Result<usize> {
        let s = t.shape(x);
        if s.len() != 2 || s[1] != self.cfg.mamba.d_model {
            return Err(Error::config(format!(
                "stream width {:?} does not match model width {}",
                s, self.cfg.mamba.d_model
            )));
        }
        Ok(s[0])
    }

    fn prepare(&self, t: &mut Tape<'_>, side: Modality, x: Var) -> Result<Prepared> {
        let rows = self.check_width(t, x)?;
        let stream = self.stream(side);
        let xp = mamba_preproc(t, &stream.preproc, x)?;
        let (xn, u_ssm, u_conv) = stream.branch.project_split(t, xp)?;
        Ok(Prepared {
            xn,
            u_ssm,
            u_conv,
            rows,
        })
    }

    /// `α · mean(U_ssm)`, or `None` when the term vanishes.
    fn summary(&self, t: &mut Tape<'_>, p: &Prepared) -> Result<Option<Var>> {
        let alpha = self.cfg.alpha();
        if alpha == 0.0 || p.rows == 0 {
            return Ok(None);
        }
        let pooled = t.mean_rows(p.u_ssm)?;
        Ok(Some(t.scale(pooled, alpha)))
    }

    fn finish(&self, t: &mut Tape<'_>, side: Modality, host: &Prepared, other: Option<Var>) -> Result<Var> {
        let stream = self.stream(side);
        let bc = self.shared.forward(t, host.u_ssm, other)?;
        let v = stream.branch.finish(t, host.u_ssm, host.u_conv, bc)?;
        let x2 = t.add(host.xn, v)?;
        stream.out_norm.forward(t, x2)
    }

    /// Both enhanced streams, computed from the same pre-interaction
    /// snapshots. An empty stream passes through unchanged and leaves the
    /// other stream unimodal.
    pub fn forward(&self, t: &mut Tape<'_>, x_v: Var, x_l: Var) -> Result<CmmOutputs> {
        let (rv, rl) = (self.check_width(t, x_v)?, self.check_width(t, x_l)?);
        let pv = (rv > 0).then(|| self.prepare(t, Modality::Visual, x_v)).transpose()?;
        let pl = (rl > 0).then(|| self.prepare(t, Modality::Linguistic, x_l)).transpose()?;
        let sv = match &pv {
            Some(p) => self.summary(t, p)?,
            None => None,
        };
        let sl = match &pl {
            Some(p) => self.summary(t, p)?,
            None => None,
        };
        let z_v = match &pv {
            Some(p) => self.finish(t, Modality::Visual, p, sl)?,
            None => x_v,
        };
        let z_l = match &pl {
            Some(p) => self.finish(t, Modality::Linguistic, p, sv)?,
            None => x_l,
        };
        Ok(CmmOutputs { z_v, z_l })
    }

    /// Only the `side` stream's output; the other stream contributes its
    /// pooled summary.
    pub fn forward_host(&self, t: &mut Tape<'_>, side: Modality, host: Var, other: Var) -> Result<Var> {
        let (rh, ro) = (self.check_width(t, host)?, self.check_width(t, other)?);
        if rh == 0 {
            return Ok(host);
        }
        let ph = self.prepare(t, side, host)?;
        let so = if ro > 0 && self.cfg.alpha() != 0.0 {
            let po = self.prepare(t, side.other(), other)?;
            self.summary(t, &po)?
        } else {
            None
        };
        self.finish(t, side, &ph, so)
    }
}

/// A CMM block, or the per-stream `LayerNorm` that replaces it when the
/// block is ablated.
#[derive(Clone, Debug)]
pub enum CrossBlock {
    Cmm(Box<CmmBlock>),
    Identity { norm_v: LayerNorm, norm_l: LayerNorm },
}

impl CrossBlock {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: CmmLayerConfig, ablate: bool) -> Result<Self> {
        if ablate {
            let mut s = b.sub(name);
            Ok(CrossBlock::Identity {
                norm_v: LayerNorm::new(&mut s, "visual_norm", cfg.mamba.d_model)?,
                norm_l: LayerNorm::new(&mut s, "linguistic_norm", cfg.mamba.d_model)?,
            })
        } else {
            Ok(CrossBlock::Cmm(Box::new(CmmBlock::new(b, name, cfg)?)))
        }
    }

    pub fn forward(&self, t: &mut Tape<'_>, x_v: Var, x_l: Var) -> Result<CmmOutputs> {
        match self {
            CrossBlock::Cmm(block) => block.forward(t, x_v, x_l),
            CrossBlock::Identity { norm_v, norm_l } => Ok(CmmOutputs {
                z_v: norm_v.forward(t, x_v)?,
                z_l: norm_l.forward(t, x_l)?,
            }),
        }
    }

    pub fn forward_host(&self, t: &mut Tape<'_>, side: Modality, host: Var, other: Var) -> Result<Var> {
        match self {
            CrossBlock::Cmm(block) => block.forward_host(t, side, host, other),
            CrossBlock::Identity { norm_v, norm_l } => match side {
                Modality::Visual => norm_v.forward(t, host),
                Modality::Linguistic => norm_l.forward(t, host),
            },
        }
    }
}
