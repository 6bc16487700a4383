//! Toy masked-language-model text stack.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use log::warn;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Mlp, TransformerBlock};
use crate::param::{Builder, ParamId};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
pub const RESERVED: [&str; 5] = ["[pad]", "[cls]", "[sep]", "[mask]", "[unk]"];
pub const DEFAULT_MAX_LEN: usize = 32;

/// Lowercase words, split on whitespace and punctuation.
pub fn normalize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Every word of the corpus, sorted, after the reserved ids.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let words: BTreeSet<String> = texts.into_iter().flat_map(normalize).collect();
        Self::from_words(words)
    }

    fn from_words(words: impl IntoIterator<Item = String>) -> Self {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words);
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocab { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// `[cls] words.. [sep]`
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![CLS];
        ids.extend(normalize(text).iter().map(|w| self.id(w)));
        ids.push(SEP);
        ids
    }

    /// One non-reserved token per line.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for t in &self.tokens[RESERVED.len()..] {
            s.push_str(t);
            s.push('\n');
        }
        fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path)?;
        let words: Vec<String> = s.lines().filter(|l| !l.is_empty()).map(str::to_string).collect();
        let unique: BTreeSet<&String> = words.iter().collect();
        if unique.len() != words.len() {
            return Err(Error::Data(format!("duplicate token in {}", path.display())));
        }
        Ok(Self::from_words(words))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MlmAction {
    Mask,
    Random,
    Keep,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MlmPlan {
    pub positions: Vec<usize>,
    pub actions: Vec<MlmAction>,
    /// Original ids at `positions`.
    pub labels: Vec<usize>,
}

impl MlmPlan {
    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MlmSettings {
    pub prob: f64,
    /// `(mask, random, keep)`, summing to 1.
    pub split: (f64, f64, f64),
}

impl Default for MlmSettings {
    fn default() -> Self {
        MlmSettings {
            prob: 0.15,
            split: (0.8, 0.1, 0.1),
        }
    }
}

/// Selects each non-framing position with probability `prob` and corrupts
/// the selection by the mask/random/keep split.
pub fn mlm_corrupt(ids: &[usize], settings: &MlmSettings, vocab_size: usize, seed: u64) -> (Vec<usize>, MlmPlan) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ids.to_vec();
    let mut plan = MlmPlan::default();
    let real = RESERVED.len()..vocab_size.max(RESERVED.len());
    for (i, &id) in ids.iter().enumerate() {
        if matches!(id, PAD | CLS | SEP) || !rng.gen_bool(settings.prob.clamp(0.0, 1.0)) {
            continue;
        }
        let u: f64 = rng.gen();
        let action = if u < settings.split.0 {
            out[i] = MASK;
            MlmAction::Mask
        } else if u < settings.split.0 + settings.split.1 {
            if !real.is_empty() {
                out[i] = rng.gen_range(real.clone());
            }
            MlmAction::Random
        } else {
            MlmAction::Keep
        };
        plan.positions.push(i);
        plan.actions.push(action);
        plan.labels.push(id);
    }
    (out, plan)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub max_len: usize,
    pub d_model: usize,
    pub heads: usize,
    pub depth: usize,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub tok_embed: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<TransformerBlock>,
    pub cfg: TextConfig,
}

impl TextEncoder {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: TextConfig) -> Result<Self> {
        if cfg.vocab_size <= RESERVED.len() || cfg.max_len < 2 {
            return Err(Error::config(format!("degenerate text config {cfg:?}")));
        }
        let mut s = b.sub(name);
        let d = cfg.d_model;
        let tok_embed = s.fan_in("tok_embed", vec![cfg.vocab_size, d], d)?;
        let pos_embed = s.fan_in("pos_embed", vec![cfg.max_len, d], d)?;
        let blocks = (0..cfg.depth)
            .map(|i| TransformerBlock::new(&mut s, &format!("block{i}"), d, cfg.heads))
            .collect::<Result<_>>()?;
        Ok(TextEncoder {
            tok_embed,
            pos_embed,
            blocks,
            cfg,
        })
    }

    /// Features `[T x D]`; row 0 is the cls summary. Sequences past
    /// `max_len` are truncated.
    pub fn forward(&self, t: &mut Tape<'_>, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::contract("empty token sequence"));
        }
        let ids = if ids.len() > self.cfg.max_len {
            warn!("truncating {} tokens to {}", ids.len(), self.cfg.max_len);
            &ids[..self.cfg.max_len]
        } else {
            ids
        };
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(Error::contract(format!("token id {bad} outside vocab of {}", self.cfg.vocab_size)));
        }
        let emb = t.param(self.tok_embed);
        let x = t.gather_rows(emb, ids)?;
        let pos = t.param(self.pos_embed);
        let pos = t.slice_rows(pos, 0, ids.len())?;
        let mut h = t.add(x, pos)?;
        for block in &self.blocks {
            h = block.forward(t, h)?;
        }
        Ok(h)
    }
}

/// `Linear -> SiLU -> Linear` onto the vocabulary.
#[derive(Clone, Debug)]
pub struct MlmHead {
    pub mlp: Mlp,
}

impl MlmHead {
    pub fn new(b: &mut Builder<'_>, name: &str, d_model: usize, vocab_size: usize) -> Result<Self> {
        Ok(MlmHead {
            mlp: Mlp::new(b, name, d_model, d_model, vocab_size)?,
        })
    }

    pub fn logits(&self, t: &mut Tape<'_>, features: Var) -> Result<Var> {
        self.mlp.forward(t, features)
    }
}

/// Mean cross-entropy over the selected positions; zero for an empty plan.
pub fn mlm_loss(t: &mut Tape<'_>, features: Var, plan: &MlmPlan, head: &MlmHead) -> Result<Var> {
    if plan.is_empty() {
        return Ok(t.constant(Tensor::scalar(0.0)));
    }
    let rows = t.shape(features)[0];
    let keep: Vec<usize> = (0..plan.len()).filter(|&i| plan.positions[i] < rows).collect();
    if keep.is_empty() {
        return Ok(t.constant(Tensor::scalar(0.0)));
    }
    let pos: Vec<usize> = keep.iter().map(|&i| plan.positions[i]).collect();
    let labels: Vec<usize> = keep.iter().map(|&i| plan.labels[i]).collect();
    let sel = t.gather_rows(features, &pos)?;
    let logits = head.logits(t, sel)?;
    t.cross_entropy(logits, &labels)
}
