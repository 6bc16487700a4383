//! Semantics-diffusion masked autoencoder.
//!
//! Patches are embedded with a learned positional table and encoded twice by
//! one shared stack: once as the full set (`F_e`) and once as the visible
//! subset (`F_v`). Two diffusion stages then enrich the visible features
//! against the full set and the mask tokens against the enriched visible
//! features. Both results are restored to patch order and decoded to pixels.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cmm::{CmmLayerConfig, CrossBlock, Modality};
use crate::error::{Error, Result};
use crate::mamba::MambaConfig;
use crate::nn::{Attention, Linear, TransformerBlock};
use crate::param::{Builder, ParamId};
use crate::sam::{SamBlock, SamBlockConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Split an `H x W x C` image into row-major `patch x patch` tiles, each
/// flattened as `(dy, dx, c)`.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let s = image.shape();
    if s.len() != 3 || s[0] != s[1] {
        return Err(Error::config(format!("expected a square H x W x C image, got {s:?}")));
    }
    let (side, c) = (s[0], s[2]);
    if patch == 0 || side % patch != 0 {
        return Err(Error::config(format!("image side {side} not divisible by patch {patch}")));
    }
    let g = side / patch;
    let pd = patch * patch * c;
    let src = image.data();
    let mut out = vec![0.0; g * g * pd];
    for py in 0..g {
        for px in 0..g {
            let row = &mut out[(py * g + px) * pd..(py * g + px + 1) * pd];
            for dy in 0..patch {
                let y = py * patch + dy;
                let start = (y * side + px * patch) * c;
                row[dy * patch * c..(dy + 1) * patch * c].copy_from_slice(&src[start..start + patch * c]);
            }
        }
    }
    Tensor::new(vec![g * g, pd], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, patch: usize, channels: usize) -> Result<Tensor> {
    let (p, pd) = (patches.rows(), patches.cols());
    let g = (p as f64).sqrt().round() as usize;
    if g * g != p || pd != patch * patch * channels {
        return Err(Error::dim("unpatchify", patches.shape(), &[patch, channels]));
    }
    let side = g * patch;
    let mut out = vec![0.0; side * side * channels];
    for py in 0..g {
        for px in 0..g {
            let row = patches.row(py * g + px);
            for dy in 0..patch {
                let y = py * patch + dy;
                let start = (y * side + px * patch) * channels;
                out[start..start + patch * channels]
                    .copy_from_slice(&row[dy * patch * channels..(dy + 1) * patch * channels]);
            }
        }
    }
    Tensor::new(vec![side, side, channels], out)
}

/// Visible/masked partition of `0..total`, both sorted ascending.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskPlan {
    pub visible: Vec<usize>,
    pub masked: Vec<usize>,
    pub ratio: f64,
}

impl MaskPlan {
    pub fn all_visible(total: usize) -> Self {
        MaskPlan {
            visible: (0..total).collect(),
            masked: Vec::new(),
            ratio: 0.0,
        }
    }

    pub fn total(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    /// For each original index, its row in `visible ++ masked`.
    pub fn restore_order(&self) -> Vec<usize> {
        let mut inv = vec![0; self.total()];
        for (row, &i) in self.visible.iter().chain(&self.masked).enumerate() {
            inv[i] = row;
        }
        inv
    }
}

/// Uniform sample of `round(ratio · total)` masked indices.
pub fn sample_mask(total: usize, ratio: f64, seed: u64) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::config(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let count = (ratio * total as f64).round() as usize;
    let mut idx: Vec<usize> = (0..total).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut masked = idx[..count].to_vec();
    let mut visible = idx[count..].to_vec();
    masked.sort_unstable();
    visible.sort_unstable();
    Ok(MaskPlan {
        visible,
        masked,
        ratio,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdmaeConfig {
    pub image_side: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub mask_ratio: f64,
    pub mamba: MambaConfig,
    pub no_sam: bool,
    pub no_cross_attention: bool,
    pub no_cmm: bool,
}

impl SdmaeConfig {
    pub fn new(mamba: MambaConfig) -> Self {
        SdmaeConfig {
            image_side: 32,
            channels: 3,
            patch_size: 4,
            heads: 4,
            encoder_depth: 4,
            decoder_depth: 2,
            mask_ratio: 0.75,
            mamba,
            no_sam: false,
            no_cross_attention: false,
            no_cmm: false,
        }
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_side / self.patch_size.max(1);
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_side % self.patch_size != 0 {
            return Err(Error::config(format!(
                "image side {} not divisible by patch {}",
                self.image_side, self.patch_size
            )));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config(format!("mask ratio {} outside [0, 1)", self.mask_ratio)));
        }
        self.sam().validate()
    }

    fn sam(&self) -> SamBlockConfig {
        SamBlockConfig {
            heads: self.heads,
            mamba: self.mamba,
            with_attention: !self.no_sam,
        }
    }
}

/// Transformer-style and SAM blocks alternating, transformer first.
#[derive(Clone, Debug)]
pub enum StackBlock {
    Transformer(TransformerBlock),
    Sam(SamBlock),
}

#[derive(Clone, Debug)]
pub struct BlockStack {
    pub blocks: Vec<StackBlock>,
}

impl BlockStack {
    pub fn new(b: &mut Builder<'_>, name: &str, depth: usize, sam: SamBlockConfig) -> Result<Self> {
        let mut s = b.sub(name);
        let mut blocks = Vec::with_capacity(depth);
        for i in 0..depth {
            let id = i.to_string();
            blocks.push(if i % 2 == 0 {
                StackBlock::Transformer(TransformerBlock::new(&mut s, &id, sam.mamba.d_model, sam.heads)?)
            } else {
                StackBlock::Sam(SamBlock::new(&mut s, &id, sam)?)
            });
        }
        Ok(BlockStack { blocks })
    }

    pub fn forward(&self, t: &mut Tape<'_>, mut x: Var) -> Result<Var> {
        for block in &self.blocks {
            x = match block {
                StackBlock::Transformer(b) => b.forward(t, x)?,
                StackBlock::Sam(b) => b.forward(t, x)?,
            };
        }
        Ok(x)
    }

    pub fn sam_blocks(&self) -> impl Iterator<Item = &SamBlock> {
        self.blocks.iter().filter_map(|b| match b {
            StackBlock::Sam(s) => Some(s),
            StackBlock::Transformer(_) => None,
        })
    }
}

/// Cross-attention from queries onto a key/value set, then a CMM pass whose
/// first stream slot is the query side.
#[derive(Clone, Debug)]
pub struct DiffusionStage {
    pub attn: Option<Attention>,
    pub cmm: CrossBlock,
}

impl DiffusionStage {
    pub fn forward(&self, t: &mut Tape<'_>, f_q: Var, f_kv_attn: Var, f_kv_cmm: Var) -> Result<Var> {
        if t.shape(f_kv_attn)[0] == 0 {
            return Err(Error::contract("diffusion stage with an empty key set"));
        }
        let attended = match &self.attn {
            // Residual on the queries: each row keeps its own position.
            Some(a) => {
                let att = a.forward(t, f_q, f_kv_attn)?;
                t.add(f_q, att)?
            }
            None => f_q,
        };
        self.cmm.forward_host(t, Modality::Visual, attended, f_kv_cmm)
    }
}

/// Encoder and decoder outputs of one pass.
#[derive(Clone, Copy, Debug)]
pub struct DiffusionFeatures {
    pub f_e: Var,
    pub f_v: Var,
    pub f_vp: Var,
    /// `None` when nothing is masked.
    pub f_mp: Option<Var>,
    /// `[P x D]`, in patch order.
    pub visual: Var,
}

#[derive(Clone, Debug)]
pub struct Sdmae {
    pub patch_embed: Linear,
    pub pos_embed: ParamId,
    pub mask_token: ParamId,
    pub encoder: BlockStack,
    pub stages: [DiffusionStage; 2],
    pub decoder: BlockStack,
    pub head: Linear,
    pub cfg: SdmaeConfig,
}

impl Sdmae {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: SdmaeConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.mamba.d_model;
        let mut s = b.sub(name);
        let stage = |s: &mut Builder<'_>, k: usize| -> Result<DiffusionStage> {
            let mut st = s.sub(format!("diffusion{k}"));
            Ok(DiffusionStage {
                attn: if cfg.no_cross_attention {
                    None
                } else {
                    Some(Attention::cross(&mut st, "cross_attn", d, cfg.heads)?)
                },
                cmm: CrossBlock::new(&mut st, "cmm", CmmLayerConfig::new(k, 2, cfg.mamba)?, cfg.no_cmm)?,
            })
        };
        Ok(Sdmae {
            patch_embed: Linear::new(&mut s, "patch_embed", cfg.patch_dim(), d)?,
            pos_embed: s.fan_in("pos_embed", vec![cfg.num_patches(), d], d)?,
            mask_token: s.fan_in("mask_token", vec![1, d], d)?,
            encoder: BlockStack::new(&mut s, "encoder", cfg.encoder_depth, cfg.sam())?,
            stages: [stage(&mut s, 1)?, stage(&mut s, 2)?],
            decoder: BlockStack::new(&mut s, "decoder", cfg.decoder_depth, cfg.sam())?,
            head: Linear::new(&mut s, "head", d, cfg.patch_dim())?,
            cfg,
        })
    }

    /// Embedded rows `index` of `patches` plus their positional embeddings.
    pub fn embed(&self, t: &mut Tape<'_>, patches: &Tensor, index: &[usize]) -> Result<Var> {
        let pd = patches.cols();
        let mut rows = Vec::with_capacity(index.len() * pd);
        for &i in index {
            rows.extend_from_slice(patches.row(i));
        }
        let x = t.constant(Tensor::new(vec![index.len(), pd], rows)?);
        let e = self.patch_embed.forward(t, x)?;
        let pos = t.param(self.pos_embed);
        let pos = t.gather_rows(pos, index)?;
        t.add(e, pos)
    }

    /// `(F_e, F_v)`
    pub fn encode(&self, t: &mut Tape<'_>, patches: &Tensor, plan: &MaskPlan) -> Result<(Var, Var)> {
        self.check_patches(patches, plan)?;
        let all: Vec<usize> = (0..plan.total()).collect();
        let e = self.embed(t, patches, &all)?;
        let f_e = self.encoder.forward(t, e)?;
        let f_v = if plan.masked.is_empty() {
            f_e
        } else {
            let v = self.embed(t, patches, &plan.visible)?;
            self.encoder.forward(t, v)?
        };
        Ok((f_e, f_v))
    }

    fn check_patches(&self, patches: &Tensor, plan: &MaskPlan) -> Result<()> {
        let want = [self.cfg.num_patches(), self.cfg.patch_dim()];
        if patches.shape() != want || plan.total() != want[0] {
            return Err(Error::dim("sdmae patches", patches.shape(), &want));
        }
        Ok(())
    }

    /// Shared mask token plus the masked positions' embeddings.
    pub fn mask_tokens(&self, t: &mut Tape<'_>, masked: &[usize]) -> Result<Var> {
        let tok = t.param(self.mask_token);
        let tok = t.broadcast_rows(tok, masked.len())?;
        let pos = t.param(self.pos_embed);
        let pos = t.gather_rows(pos, masked)?;
        t.add(tok, pos)
    }

    /// Encoder plus both diffusion stages, restored to patch order.
    pub fn features(&self, t: &mut Tape<'_>, patches: &Tensor, plan: &MaskPlan) -> Result<DiffusionFeatures> {
        let (f_e, f_v) = self.encode(t, patches, plan)?;
        let f_vp = self.stages[0].forward(t, f_v, f_e, f_e)?;
        let (f_mp, visual) = if plan.masked.is_empty() {
            (None, f_vp)
        } else {
            let f_m = self.mask_tokens(t, &plan.masked)?;
            let f_mp = self.stages[1].forward(t, f_m, f_vp, f_vp)?;
            let joined = t.concat_rows(&[f_vp, f_mp])?;
            (Some(f_mp), t.gather_rows(joined, &plan.restore_order())?)
        };
        Ok(DiffusionFeatures {
            f_e,
            f_v,
            f_vp,
            f_mp,
            visual,
        })
    }

    /// `[P x D] -> [P x patch_dim]`
    pub fn decode(&self, t: &mut Tape<'_>, visual: Var) -> Result<Var> {
        let h = self.decoder.forward(t, visual)?;
        self.head.forward(t, h)
    }

    /// Per-patch reconstruction and the visual features it was decoded from.
    pub fn forward(&self, t: &mut Tape<'_>, patches: &Tensor, plan: &MaskPlan) -> Result<(Var, Var)> {
        let f = self.features(t, patches, plan)?;
        Ok((self.decode(t, f.visual)?, f.visual))
    }

    /// Reconstruction as an `H x W x C` image.
    pub fn reconstruct(&self, t: &mut Tape<'_>, image: &Tensor, plan: &MaskPlan) -> Result<Tensor> {
        let patches = patchify(image, self.cfg.patch_size)?;
        let (pred, _) = self.forward(t, &patches, plan)?;
        unpatchify(t.value(pred), self.cfg.patch_size, self.cfg.channels)
    }
}

/// Subtract each row's mean and divide by `sqrt(var + 1e-6)`.
pub fn standardize_patches(patches: &Tensor) -> Tensor {
    let c = patches.cols();
    let mut out = patches.clone();
    for row in out.data_mut().chunks_mut(c.max(1)) {
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

/// Mean squared error over the masked patches (every patch when
/// `masked_only` is false). An empty support gives zero.
pub fn recon_loss(
    t: &mut Tape<'_>,
    pred: Var,
    target: &Tensor,
    plan: &MaskPlan,
    normalize: bool,
    masked_only: bool,
) -> Result<Var> {
    if t.shape(pred) != target.shape() {
        return Err(Error::dim("recon_loss", t.shape(pred), target.shape()));
    }
    let support: Vec<usize> = if masked_only {
        plan.masked.clone()
    } else {
        (0..target.rows()).collect()
    };
    if support.is_empty() {
        return Ok(t.constant(Tensor::scalar(0.0)));
    }
    let target = if normalize {
        standardize_patches(target)
    } else {
        target.clone()
    };
    let c = target.cols();
    let mut rows = Vec::with_capacity(support.len() * c);
    for &i in &support {
        rows.extend_from_slice(target.row(i));
    }
    let tgt = t.constant(Tensor::new(vec![support.len(), c], rows)?);
    let p = t.gather_rows(pred, &support)?;
    let diff = t.sub(p, tgt)?;
    let sq = t.mul(diff, diff)?;
    t.mean(sq)
}
