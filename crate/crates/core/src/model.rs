//! The assembled model: SDMAE visual branch, text encoder, CMM interaction
//! layers with a bidirectional cross-attention, MLM head and fusion head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cmm::{CmmLayerConfig, CrossBlock};
use crate::config::RunConfig;
use crate::emf::{EmfConfig, EmfHead, FusedState};
use crate::error::{Error, Result};
use crate::flops::{self, FlopsTable};
use crate::mamba::MambaConfig;
use crate::nn::{residual_norm, Attention, LayerNorm};
use crate::param::{Builder, ParamStore};
use crate::scan::{ScanBlockPlan, TransitionMode};
use crate::sdmae::{MaskPlan, Sdmae, SdmaeConfig};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::text::{mlm_loss, MlmHead, MlmPlan, TextConfig, TextEncoder};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub sdmae: SdmaeConfig,
    pub text: TextConfig,
    pub emf: EmfConfig,
    pub mamba: MambaConfig,
    pub interaction_layers: usize,
    pub heads: usize,
    pub scan_block_length: usize,
}

impl ModelConfig {
    pub fn from_run(cfg: &RunConfig, vocab_size: usize) -> Result<Self> {
        cfg.validate()?;
        let m = &cfg.model;
        let a = &cfg.ablation;
        let mamba = MambaConfig {
            d_model: m.d_model,
            d_inner: m.expansion * m.d_model,
            state_dim: m.state_dim,
            conv_width: m.conv_width,
            mode: TransitionMode::from_stable_flag(m.stable_mode),
        };
        let sdmae = SdmaeConfig {
            image_side: m.image_side,
            channels: m.channels,
            patch_size: m.patch_size,
            heads: m.heads,
            encoder_depth: m.encoder_depth,
            decoder_depth: m.decoder_depth,
            mask_ratio: cfg.pretrain.image_mask_ratio,
            mamba,
            no_sam: a.no_sam,
            no_cross_attention: a.no_cross_attention,
            no_cmm: a.no_cmm,
        };
        Ok(ModelConfig {
            sdmae,
            text: TextConfig {
                vocab_size,
                max_len: m.max_text_len,
                d_model: m.d_model,
                heads: m.heads,
                depth: m.text_depth,
            },
            emf: EmfConfig {
                d_model: m.d_model,
                heads: m.heads,
                depth: m.emf_depth,
                num_answers: m.num_answers,
                mamba,
                literal_cls_attention: m.literal_cls_attention,
                no_cross_attention: a.no_cross_attention,
            },
            mamba,
            interaction_layers: m.interaction_layers,
            heads: m.heads,
            scan_block_length: m.scan_block_length,
        })
    }

    pub fn d_model(&self) -> usize {
        self.mamba.d_model
    }
}

/// Inputs of one pretraining step.
#[derive(Clone, Debug)]
pub struct PretrainSample {
    /// Standardised patches `[P x patch_dim]`.
    pub patches: Tensor,
    pub plan: MaskPlan,
    /// Corrupted token ids.
    pub ids: Vec<usize>,
    pub mlm: MlmPlan,
}

#[derive(Clone, Copy, Debug)]
pub struct PretrainOutputs {
    pub recon: Var,
    pub loss_img: Var,
    pub loss_txt: Var,
}

#[derive(Clone, Debug)]
pub struct LcmfModel {
    pub sdmae: Sdmae,
    pub text: TextEncoder,
    pub interaction: Vec<CrossBlock>,
    pub inter_v_attn: Attention,
    pub inter_v_norm: LayerNorm,
    pub inter_l_attn: Attention,
    pub inter_l_norm: LayerNorm,
    pub mlm: MlmHead,
    pub emf: EmfHead,
    pub cfg: ModelConfig,
}

impl LcmfModel {
    /// Builds the model and its freshly initialised parameters.
    pub fn build(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = {
            let mut b = Builder::new(&mut store, &mut rng);
            Self::new(&mut b, cfg)?
        };
        Ok((model, store))
    }

    pub fn new(b: &mut Builder<'_>, cfg: ModelConfig) -> Result<Self> {
        let d = cfg.d_model();
        let layers = cfg.interaction_layers;
        let interaction = (1..=layers)
            .map(|l| {
                let lc = CmmLayerConfig::new(l, layers, cfg.mamba)?;
                CrossBlock::new(b, &format!("interaction.cmm{l}"), lc, cfg.sdmae.no_cmm)
            })
            .collect::<Result<_>>()?;
        let mut ib = b.sub("interaction");
        let inter_v_attn = Attention::cross(&mut ib, "v_attn", d, cfg.heads)?;
        let inter_v_norm = LayerNorm::new(&mut ib, "v_norm", d)?;
        let inter_l_attn = Attention::cross(&mut ib, "l_attn", d, cfg.heads)?;
        let inter_l_norm = LayerNorm::new(&mut ib, "l_norm", d)?;
        Ok(LcmfModel {
            sdmae: Sdmae::new(b, "sdmae", cfg.sdmae)?,
            text: TextEncoder::new(b, "text", cfg.text)?,
            interaction,
            inter_v_attn,
            inter_v_norm,
            inter_l_attn,
            inter_l_norm,
            mlm: MlmHead::new(b, "mlm_head", d, cfg.text.vocab_size)?,
            emf: EmfHead::new(b, "emf", cfg.emf)?,
            cfg,
        })
    }

    pub fn scan_plan(&self) -> ScanBlockPlan {
        ScanBlockPlan::new(self.cfg.scan_block_length).unwrap_or_default()
    }

    pub fn tape<'p>(&self, store: &'p ParamStore) -> Tape<'p> {
        Tape::new(store).with_scan_plan(self.scan_plan())
    }

    pub fn inference_tape<'p>(&self, store: &'p ParamStore) -> Tape<'p> {
        Tape::inference(store).with_scan_plan(self.scan_plan())
    }

    /// CMM layers, then `LN(v + XAttn(v, l))` and `LN(l + XAttn(l, v))`.
    pub fn interact(&self, t: &mut Tape<'_>, mut v: Var, mut l: Var) -> Result<(Var, Var)> {
        for block in &self.interaction {
            let out = block.forward(t, v, l)?;
            v = out.z_v;
            l = out.z_l;
        }
        let va = self.inter_v_attn.forward(t, v, l)?;
        let la = self.inter_l_attn.forward(t, l, v)?;
        let v2 = residual_norm(t, &self.inter_v_norm, v, va)?;
        let l2 = residual_norm(t, &self.inter_l_norm, l, la)?;
        Ok((v2, l2))
    }

    /// Masked-patch reconstruction and MLM losses.
    pub fn pretrain_forward(
        &self,
        t: &mut Tape<'_>,
        sample: &PretrainSample,
        normalize: bool,
        masked_only: bool,
    ) -> Result<PretrainOutputs> {
        let feats = self.sdmae.features(t, &sample.patches, &sample.plan)?;
        let text = self.text.forward(t, &sample.ids)?;
        let (v, l) = self.interact(t, feats.visual, text)?;
        let recon = self.sdmae.decode(t, v)?;
        let loss_img = crate::sdmae::recon_loss(t, recon, &sample.patches, &sample.plan, normalize, masked_only)?;
        let loss_txt = mlm_loss(t, l, &sample.mlm, &self.mlm)?;
        Ok(PretrainOutputs {
            recon,
            loss_img,
            loss_txt,
        })
    }

    /// Unmasked visual features; several frames are averaged.
    pub fn visual_features(&self, t: &mut Tape<'_>, frames: &[Tensor]) -> Result<Var> {
        if frames.is_empty() {
            return Err(Error::contract("no frames to encode"));
        }
        let plan = MaskPlan::all_visible(self.cfg.sdmae.num_patches());
        let mut acc: Option<Var> = None;
        for f in frames {
            let v = self.sdmae.features(t, f, &plan)?.visual;
            acc = Some(match acc {
                Some(a) => t.add(a, v)?,
                None => v,
            });
        }
        let sum = acc.expect("at least one frame");
        Ok(if frames.len() == 1 {
            sum
        } else {
            t.scale(sum, 1.0 / frames.len() as f64)
        })
    }

    /// Answer logits for a question about an image (one frame) or a video.
    pub fn answer_forward(&self, t: &mut Tape<'_>, frames: &[Tensor], ids: &[usize]) -> Result<FusedState> {
        let v = self.visual_features(t, frames)?;
        let l = self.text.forward(t, ids)?;
        let (v, l) = self.interact(t, v, l)?;
        self.emf.forward(t, v, l)
    }

    /// Per-module counts for one pretraining forward (`masked = true`) or
    /// one single-frame answering forward.
    pub fn flops_table(&self, text_len: usize, masked: bool) -> FlopsTable {
        let c = &self.cfg;
        let d = c.d_model() as u64;
        let h = c.heads as u64;
        let p = c.sdmae.num_patches() as u64;
        let n_mask = if masked {
            (c.sdmae.mask_ratio * p as f64).round() as u64
        } else {
            0
        };
        let n_vis = p - n_mask;
        let tl = text_len.min(c.text.max_len) as u64;
        let m = &c.mamba;
        let with_sam_attn = !c.sdmae.no_sam;
        let stack = |rows: u64, depth: usize| -> u64 {
            (0..depth)
                .map(|i| {
                    if i % 2 == 0 {
                        flops::transformer_block(rows, d, h)
                    } else {
                        flops::sam_block(rows, m, h, with_sam_attn)
                    }
                })
                .sum()
        };
        let cross = |rows_h: u64, rows_o: u64, l: usize, total: usize| -> u64 {
            if c.sdmae.no_cmm {
                flops::layer_norm(rows_h, d)
            } else {
                let lc = CmmLayerConfig::new(l, total, *m).expect("valid layer index");
                let other = if lc.alpha() == 0.0 { 0 } else { rows_o };
                let prep_other = if other > 0 {
                    flops::mixer(rows_o, m) + rows_o * d + flops::layer_norm(rows_o, d) + flops::linear(rows_o, d, 2 * m.d_inner as u64)
                } else {
                    0
                };
                flops::cmm_stream(rows_h, other, m) + prep_other
            }
        };
        let xattn = |rq: u64, rk: u64| -> u64 {
            if c.sdmae.no_cross_attention {
                0
            } else {
                flops::attention_general(rq, rk, d, h, false) + rq * d
            }
        };

        let mut tab = FlopsTable::default();
        let embed_rows = if n_mask > 0 { p + n_vis } else { p };
        tab.push(
            "patch_embed",
            flops::linear(embed_rows, c.sdmae.patch_dim() as u64, d) + embed_rows * d,
        );
        tab.push("encoder_full", stack(p, c.sdmae.encoder_depth));
        if n_mask > 0 {
            tab.push("encoder_visible", stack(n_vis, c.sdmae.encoder_depth));
        }
        tab.push("diffusion1_attention", xattn(n_vis, p));
        tab.push("diffusion1_cmm", cross(n_vis, p, 1, 2));
        if n_mask > 0 {
            tab.push("mask_tokens", 2 * n_mask * d);
            tab.push("diffusion2_attention", xattn(n_mask, n_vis));
            tab.push("diffusion2_cmm", cross(n_mask, n_vis, 2, 2));
        }
        tab.push("text_encoder", tl * d + (0..c.text.depth).map(|_| flops::transformer_block(tl, d, h)).sum::<u64>());
        let layers = c.interaction_layers;
        let inter_cmm: u64 = (1..=layers)
            .map(|l| {
                if c.sdmae.no_cmm {
                    flops::layer_norm(p, d) + flops::layer_norm(tl, d)
                } else {
                    let lc = CmmLayerConfig::new(l, layers, *m).expect("valid layer index");
                    flops::flops_cmm(p, tl, &lc)
                }
            })
            .sum();
        tab.push("interaction_cmm", inter_cmm);
        tab.push(
            "interaction_attention",
            flops::attention_general(p, tl, d, h, false)
                + flops::attention_general(tl, p, d, h, false)
                + 2 * (p + tl) * d
                + flops::layer_norm(p + tl, d),
        );
        if masked {
            tab.push(
                "decoder",
                stack(p, c.sdmae.decoder_depth) + flops::linear(p, d, c.sdmae.patch_dim() as u64),
            );
        } else {
            let e = &c.emf;
            let kv_v = if e.literal_cls_attention { 1 } else { tl };
            let kv_l = if e.literal_cls_attention { 1 } else { p };
            let att = if e.no_cross_attention {
                0
            } else {
                flops::attention_general(1, kv_v, d, h, false) + flops::attention_general(1, kv_l, d, h, false)
            };
            tab.push("fusion_attention", att);
            let film = 2 * (flops::linear(1, d, 2 * d) + 3 * d);
            let gate = 2 * d + flops::linear(1, d, d) + flops::ACT * d + d;
            let stack_f: u64 = (0..e.depth).map(|_| flops::mixer(1, m) + d + flops::layer_norm(1, d)).sum();
            let out = flops::linear(1, d, d) + flops::ACT * d + d + flops::layer_norm(1, d);
            tab.push(
                "fusion_head",
                p * d + d + film + gate + stack_f + out + flops::linear(1, d, e.num_answers as u64),
            );
        }
        tab
    }
}
