//! Conv-gated selective-SSM mixer.
//!
//! ```text
//! [U_ssm | U_conv] = in_proj(LN(x))
//! A  = sigmoid(U_ssm W_A + b_A)           Δ = softplus(U_ssm W_Δ + b_Δ)
//! B  = SiLU(conv(U_ssm W_B + b_B))        C = SiLU(conv(U_ssm W_C + b_C))
//! V  = scan(U_ssm; A, Δ, B, C, D) ⊙ sigmoid(conv(U_conv))
//! mix(x) = out_proj(V)
//! ```
//!
//! The cross-modal block reuses every piece here except `B`/`C`, whose input
//! is widened with a pooled summary of the other stream.

use crate::error::{Error, Result};
use crate::nn::{DepthwiseConv, LayerNorm, Linear};
use crate::param::{Builder, ParamId};
use crate::scan::TransitionMode;
use crate::tape::{ScanArgs, Tape, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MambaConfig {
    pub d_model: usize,
    pub d_inner: usize,
    pub state_dim: usize,
    pub conv_width: usize,
    pub mode: TransitionMode,
}

impl MambaConfig {
    /// Expansion 2, `N = 16`, conv width 4, stable transitions.
    pub fn new(d_model: usize) -> Self {
        MambaConfig {
            d_model,
            d_inner: 2 * d_model,
            state_dim: 16,
            conv_width: 4,
            mode: TransitionMode::Stable,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_inner == 0 || self.state_dim == 0 || self.conv_width == 0 {
            return Err(Error::config(format!("degenerate mamba dimensions {self:?}")));
        }
        Ok(())
    }
}

/// Input projection, per-modality `A`/`Δ`, gate, skip and output projection.
#[derive(Clone, Debug)]
pub struct SsmBranch {
    pub norm: LayerNorm,
    pub in_proj: Linear,
    pub a_proj: Linear,
    pub dt_proj: Linear,
    pub gate_conv: DepthwiseConv,
    pub d_skip: ParamId,
    pub out_proj: Linear,
    pub cfg: MambaConfig,
}

impl SsmBranch {
    pub fn new(b: &mut Builder<'_>, cfg: MambaConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, di) = (cfg.d_model, cfg.d_inner);
        Ok(SsmBranch {
            norm: LayerNorm::new(b, "norm", d)?,
            in_proj: Linear::new(b, "in_proj", d, 2 * di)?,
            a_proj: Linear::new(b, "a_proj", di, di)?,
            dt_proj: Linear::new(b, "dt_proj", di, di)?,
            gate_conv: DepthwiseConv::new(b, "gate_conv", cfg.conv_width, di)?,
            d_skip: b.ones("d_skip", vec![di])?,
            out_proj: Linear::new(b, "out_proj", di, d)?,
            cfg,
        })
    }

    /// `LN(x)` and its projection split into `(U_ssm, U_conv)`.
    pub fn project_split(&self, t: &mut Tape<'_>, x: Var) -> Result<(Var, Var, Var)> {
        let xn = self.norm.forward(t, x)?;
        let u = self.in_proj.forward(t, xn)?;
        let di = self.cfg.d_inner;
        let u_ssm = t.slice_cols(u, 0, di)?;
        let u_conv = t.slice_cols(u, di, di)?;
        Ok((xn, u_ssm, u_conv))
    }

    /// `A = sigmoid(..)`, `Δ = softplus(..)`; depends on the host stream only.
    pub fn a_delta(&self, t: &mut Tape<'_>, u_ssm: Var) -> Result<(Var, Var)> {
        let a = self.a_proj.forward(t, u_ssm)?;
        let a = t.sigmoid(a);
        let dt = self.dt_proj.forward(t, u_ssm)?;
        let dt = t.softplus(dt);
        Ok((a, dt))
    }

    /// Scan, gate and output projection.
    pub fn finish(&self, t: &mut Tape<'_>, u_ssm: Var, u_conv: Var, bc: (Var, Var)) -> Result<Var> {
        let (a, dt) = self.a_delta(t, u_ssm)?;
        let d_skip = t.param(self.d_skip);
        let y = t.selective_scan(
            ScanArgs {
                x: u_ssm,
                a,
                delta: dt,
                b: bc.0,
                c: bc.1,
                d_skip,
            },
            self.cfg.mode,
        )?;
        let g = self.gate_conv.forward(t, u_conv)?;
        let g = t.sigmoid(g);
        let v = t.mul(y, g)?;
        self.out_proj.forward(t, v)
    }
}

/// `B` and `C` generators. With `cross = true` the weights are `[2·D_inner x N]`
/// and the lower half multiplies the other stream's pooled summary.
#[derive(Clone, Debug)]
pub struct BcProjection {
    pub w_b: ParamId,
    pub b_b: ParamId,
    pub conv_b: DepthwiseConv,
    pub w_c: ParamId,
    pub b_c: ParamId,
    pub conv_c: DepthwiseConv,
    pub cross: bool,
    pub d_inner: usize,
}

impl BcProjection {
    pub fn new(b: &mut Builder<'_>, cfg: MambaConfig, cross: bool) -> Result<Self> {
        let rows = if cross { 2 * cfg.d_inner } else { cfg.d_inner };
        let n = cfg.state_dim;
        Ok(BcProjection {
            w_b: b.fan_in("w_b", vec![rows, n], rows)?,
            b_b: b.zeros("b_b", vec![n])?,
            conv_b: DepthwiseConv::new(b, "conv_b", cfg.conv_width, n)?,
            w_c: b.fan_in("w_c", vec![rows, n], rows)?,
            b_c: b.zeros("b_c", vec![n])?,
            conv_c: DepthwiseConv::new(b, "conv_c", cfg.conv_width, n)?,
            cross,
            d_inner: cfg.d_inner,
        })
    }

    /// `other` is the already scaled summary `α · mean(U_other)` (`[1 x D_inner]`);
    /// `None` drops the cross term entirely.
    pub fn forward(&self, t: &mut Tape<'_>, u_host: Var, other: Option<Var>) -> Result<(Var, Var)> {
        let b = self.one(t, u_host, other, self.w_b, self.b_b, &self.conv_b)?;
        let c = self.one(t, u_host, other, self.w_c, self.b_c, &self.conv_c)?;
        Ok((b, c))
    }

    fn one(
        &self,
        t: &mut Tape<'_>,
        u_host: Var,
        other: Option<Var>,
        w: ParamId,
        bias: ParamId,
        conv: &DepthwiseConv,
    ) -> Result<Var> {
        let w = t.param(w);
        let di = self.d_inner;
        let host_w = if self.cross { t.slice_rows(w, 0, di)? } else { w };
        let mut z = t.matmul(u_host, host_w)?;
        if let (true, Some(o)) = (self.cross, other) {
            let other_w = t.slice_rows(w, di, di)?;
            let s = t.matmul(o, other_w)?;
            let rows = t.shape(u_host)[0];
            let s = t.broadcast_rows(s, rows)?;
            z = t.add(z, s)?;
        }
        let bias = t.param(bias);
        let z = t.add_row(z, bias)?;
        let z = conv.forward(t, z)?;
        Ok(t.silu(z))
    }
}

/// Unimodal mixer `mix(x)` (no residual).
#[derive(Clone, Debug)]
pub struct MambaMixer {
    pub branch: SsmBranch,
    pub bc: BcProjection,
}

impl MambaMixer {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: MambaConfig) -> Result<Self> {
        let mut s = b.sub(name);
        Ok(MambaMixer {
            branch: SsmBranch::new(&mut s, cfg)?,
            bc: BcProjection::new(&mut s, cfg, false)?,
        })
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let (_, u_ssm, u_conv) = self.branch.project_split(t, x)?;
        let bc = self.bc.forward(t, u_ssm, None)?;
        self.branch.finish(t, u_ssm, u_conv, bc)
    }

    pub fn cfg(&self) -> MambaConfig {
        self.branch.cfg
    }
}

/// `x + mix(x)`
pub fn mamba_preproc(t: &mut Tape<'_>, mixer: &MambaMixer, x: Var) -> Result<Var> {
    let m = mixer.forward(t, x)?;
    t.add(x, m)
}
