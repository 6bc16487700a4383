//! Fusion head: CLS cross-attention, crosswise FiLM, averaging, gating, a
//! residual Mamba stack over the single fused token, and answer logits.
//!
//! ```text
//! V_att = XAttn(V_cls, L)               L_att = XAttn(L_cls, V)
//! [γ_v, β_v] = W_film_v V_att           [γ_l, β_l] = W_film_l L_att
//! V_mod = (1 + γ_v) ⊙ L_att + β_v       L_mod = (1 + γ_l) ⊙ V_att + β_l
//! F_joint = (V_mod + L_mod) / 2         F_gated = F_joint ⊙ σ(W_g F_joint)
//! X_i = LN(X_{i-1} + Mamba(X_{i-1}))    F_out = LN(X_N ⊙ σ(W_f X_N))
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::mamba::{MambaConfig, MambaMixer};
use crate::nn::{residual_norm, Attention, LayerNorm, Linear};
use crate::param::{Builder, ParamId};
use crate::tape::{Tape, Var};

/// Answers ordered by descending frequency, ties lexicographic.
#[derive(Clone, Debug, PartialEq)]
pub struct AnswerVocab {
    answers: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerVocab {
    pub fn from_ranked(answers: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, a) in answers.iter().enumerate() {
            if index.insert(a.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate answer `{a}`")));
            }
        }
        Ok(AnswerVocab { answers, index })
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    pub fn index(&self, answer: &str) -> Option<usize> {
        self.index.get(answer).copied()
    }

    pub fn answer(&self, i: usize) -> Option<&str> {
        self.answers.get(i).map(String::as_str)
    }

    /// Header `topk=<K>`, then one answer per line in rank order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = format!("topk={}\n", self.len());
        for a in &self.answers {
            s.push_str(a);
            s.push('\n');
        }
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path)?;
        let mut lines = s.lines();
        let k: usize = lines
            .next()
            .and_then(|h| h.strip_prefix("topk="))
            .and_then(|k| k.trim().parse().ok())
            .ok_or_else(|| Error::Data(format!("{}: missing `topk=` header", path.display())))?;
        let answers: Vec<String> = lines.map(str::to_string).collect();
        if answers.len() != k {
            return Err(Error::Data(format!(
                "{}: header says {k} answers, found {}",
                path.display(),
                answers.len()
            )));
        }
        Self::from_ranked(answers)
    }
}

/// The `k` most frequent answers and the fraction of `answers` they cover.
pub fn topk_vocab<'a>(answers: impl IntoIterator<Item = &'a str>, k: usize) -> Result<(AnswerVocab, f64)> {
    if k == 0 {
        return Err(Error::config("answer vocabulary size must be at least 1"));
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut total = 0usize;
    for a in answers {
        *counts.entry(a).or_default() += 1;
        total += 1;
    }
    if k > counts.len() {
        warn!("requested {k} answers but only {} are distinct", counts.len());
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(k);
    let covered: usize = ranked.iter().map(|r| r.1).sum();
    let coverage = if total == 0 { 0.0 } else { covered as f64 / total as f64 };
    let vocab = AnswerVocab::from_ranked(ranked.into_iter().map(|r| r.0.to_string()).collect())?;
    Ok((vocab, coverage))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EmfConfig {
    pub d_model: usize,
    pub heads: usize,
    pub depth: usize,
    pub num_answers: usize,
    pub mamba: MambaConfig,
    /// Keys and values are the other modality's CLS vector alone.
    pub literal_cls_attention: bool,
    /// CLS vectors pass through unattended.
    pub no_cross_attention: bool,
}

/// Every named intermediate of one head evaluation.
#[derive(Clone, Copy, Debug)]
pub struct FusedState {
    pub v_cls: Var,
    pub l_cls: Var,
    pub v_attends_l: Var,
    pub l_attends_v: Var,
    pub v_modulated: Var,
    pub l_modulated: Var,
    pub f_joint: Var,
    pub f_gated: Var,
    pub f_output: Var,
    pub logits: Var,
}

#[derive(Clone, Debug)]
pub struct EmfHead {
    pub v_cls_bias: ParamId,
    pub v_attn: Option<Attention>,
    pub l_attn: Option<Attention>,
    pub film_v: Linear,
    pub film_l: Linear,
    pub gate: Linear,
    pub stack: Vec<(MambaMixer, LayerNorm)>,
    pub out_gate: Linear,
    pub out_norm: LayerNorm,
    pub classifier: Linear,
    pub cfg: EmfConfig,
}

impl EmfHead {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: EmfConfig) -> Result<Self> {
        if cfg.depth == 0 || cfg.num_answers == 0 {
            return Err(Error::config(format!("degenerate fusion head {cfg:?}")));
        }
        let d = cfg.d_model;
        let mut s = b.sub(name);
        let attn = |s: &mut Builder<'_>, n: &str| -> Result<Option<Attention>> {
            if cfg.no_cross_attention {
                Ok(None)
            } else {
                Attention::cross(s, n, d, cfg.heads).map(Some)
            }
        };
        Ok(EmfHead {
            v_cls_bias: s.zeros("v_cls_bias", vec![d])?,
            v_attn: attn(&mut s, "v_attn")?,
            l_attn: attn(&mut s, "l_attn")?,
            film_v: Linear::zeroed(&mut s, "film_v", d, 2 * d)?,
            film_l: Linear::zeroed(&mut s, "film_l", d, 2 * d)?,
            gate: Linear::new(&mut s, "gate", d, d)?,
            stack: (0..cfg.depth)
                .map(|i| {
                    let mut l = s.sub(format!("stack{i}"));
                    Ok((MambaMixer::new(&mut l, "mamba", cfg.mamba)?, LayerNorm::new(&mut l, "norm", d)?))
                })
                .collect::<Result<_>>()?,
            out_gate: Linear::new(&mut s, "out_gate", d, d)?,
            out_norm: LayerNorm::new(&mut s, "out_norm", d)?,
            classifier: Linear::new(&mut s, "classifier", d, cfg.num_answers)?,
            cfg,
        })
    }

    /// `mean(V) + bias` and the text cls row, both `[1 x D]`.
    pub fn cls(&self, t: &mut Tape<'_>, visual: Var, text: Var) -> Result<(Var, Var)> {
        let pooled = t.mean_rows(visual)?;
        let bias = t.param(self.v_cls_bias);
        let v_cls = t.add_row(pooled, bias)?;
        let l_cls = t.slice_rows(text, 0, 1)?;
        Ok((v_cls, l_cls))
    }

    /// Single-query attention of `host_cls` over `other` (or over
    /// `other_cls` in literal mode).
    pub fn cls_cross_attend(
        &self,
        t: &mut Tape<'_>,
        attn: Option<&Attention>,
        host_cls: Var,
        other: Var,
        other_cls: Var,
    ) -> Result<Var> {
        let Some(attn) = attn else { return Ok(host_cls) };
        let kv = if self.cfg.literal_cls_attention { other_cls } else { other };
        if t.shape(kv)[0] == 0 {
            return Err(Error::contract("cross-attention over an empty sequence"));
        }
        attn.forward(t, host_cls, kv)
    }

    pub fn forward(&self, t: &mut Tape<'_>, visual: Var, text: Var) -> Result<FusedState> {
        let (v_cls, l_cls) = self.cls(t, visual, text)?;
        let v_attends_l = self.cls_cross_attend(t, self.v_attn.as_ref(), v_cls, text, l_cls)?;
        let l_attends_v = self.cls_cross_attend(t, self.l_attn.as_ref(), l_cls, visual, v_cls)?;
        let v_modulated = film_modulate(t, &self.film_v, v_attends_l, l_attends_v)?;
        let l_modulated = film_modulate(t, &self.film_l, l_attends_v, v_attends_l)?;
        let (f_joint, f_gated) = fuse_gate(t, v_modulated, l_modulated, &self.gate)?;
        let f_output = self.mamba_stack(t, f_gated)?;
        let logits = self.classifier.forward(t, f_output)?;
        Ok(FusedState {
            v_cls,
            l_cls,
            v_attends_l,
            l_attends_v,
            v_modulated,
            l_modulated,
            f_joint,
            f_gated,
            f_output,
            logits,
        })
    }

    pub fn mamba_stack(&self, t: &mut Tape<'_>, f_gated: Var) -> Result<Var> {
        let mut x = f_gated;
        for (mixer, norm) in &self.stack {
            let m = mixer.forward(t, x)?;
            x = residual_norm(t, norm, x, m)?;
        }
        let g = self.out_gate.forward(t, x)?;
        let g = t.sigmoid(g);
        let gated = t.mul(x, g)?;
        self.out_norm.forward(t, gated)
    }
}

/// `(1 + γ) ⊙ attends_other + β` with `[γ, β] = film(attends_host)`.
pub fn film_modulate(t: &mut Tape<'_>, film: &Linear, attends_host: Var, attends_other: Var) -> Result<Var> {
    let d = film.out_dim / 2;
    let gb = film.forward(t, attends_host)?;
    let gamma = t.slice_cols(gb, 0, d)?;
    let beta = t.slice_cols(gb, d, d)?;
    let scale = t.add_scalar(gamma, 1.0);
    let scaled = t.mul(scale, attends_other)?;
    t.add(scaled, beta)
}

/// `(F_joint, F_joint ⊙ σ(W_g F_joint))`
pub fn fuse_gate(t: &mut Tape<'_>, v_mod: Var, l_mod: Var, gate: &Linear) -> Result<(Var, Var)> {
    let sum = t.add(v_mod, l_mod)?;
    let joint = t.scale(sum, 0.5);
    let g = gate.forward(t, joint)?;
    let g = t.sigmoid(g);
    let gated = t.mul(joint, g)?;
    Ok((joint, gated))
}
