//! Run configuration: `key = value` lines under `[section]` headers.
//! Every key has a default; unknown keys and sections are rejected.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub ablation: AblationSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub data: DataSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelSection::default(),
            ablation: AblationSection::default(),
            pretrain: PretrainSection::default(),
            finetune: FinetuneSection::default(),
            data: DataSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub d_model: usize,
    /// `D_inner = expansion · d_model`
    pub expansion: usize,
    pub state_dim: usize,
    pub conv_width: usize,
    pub heads: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub text_depth: usize,
    pub interaction_layers: usize,
    pub emf_depth: usize,
    pub num_answers: usize,
    pub max_text_len: usize,
    pub image_side: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub stable_mode: bool,
    pub literal_cls_attention: bool,
    pub scan_block_length: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            d_model: 64,
            expansion: 2,
            state_dim: 16,
            conv_width: 4,
            heads: 4,
            encoder_depth: 4,
            decoder_depth: 2,
            text_depth: 2,
            interaction_layers: 2,
            emf_depth: 2,
            num_answers: 16,
            max_text_len: 32,
            image_side: 32,
            patch_size: 4,
            channels: 3,
            stable_mode: true,
            literal_cls_attention: false,
            scan_block_length: 64,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub no_cross_attention: bool,
    pub no_cmm: bool,
    pub no_sam: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Constant,
    OneCycle,
    Cosine,
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(ScheduleKind::Constant),
            "onecycle" => Ok(ScheduleKind::OneCycle),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => Err(Error::config(format!("unknown schedule `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    pub image_mask_ratio: f64,
    pub text_mask_prob: f64,
    pub normalize_targets: bool,
    pub masked_only: bool,
    pub clip_norm: f64,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    pub ema_decay: f64,
    pub weight_floor: f64,
    pub weight_step_cap: f64,
}

impl Default for PretrainSection {
    fn default() -> Self {
        PretrainSection {
            epochs: 300,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            schedule: ScheduleKind::OneCycle,
            image_mask_ratio: 0.75,
            text_mask_prob: 0.15,
            normalize_targets: false,
            masked_only: true,
            clip_norm: 1.0,
            checkpoint_every: 0,
            ema_decay: 0.95,
            weight_floor: 0.05,
            weight_step_cap: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: ScheduleKind,
    pub clip_norm: f64,
    pub video_frames: usize,
    pub checkpoint_every: usize,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        FinetuneSection {
            epochs: 60,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.01,
            schedule: ScheduleKind::Cosine,
            clip_norm: 1.0,
            video_frames: 50,
            checkpoint_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Per-channel constants applied after scaling pixels to `[0, 1]`.
    pub pixel_mean: Vec<f64>,
    pub pixel_std: Vec<f64>,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            pixel_mean: vec![0.5; 3],
            pixel_std: vec![0.5; 3],
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        let positive = [
            ("d_model", m.d_model),
            ("expansion", m.expansion),
            ("state_dim", m.state_dim),
            ("conv_width", m.conv_width),
            ("heads", m.heads),
            ("num_answers", m.num_answers),
            ("patch_size", m.patch_size),
            ("channels", m.channels),
            ("scan_block_length", m.scan_block_length),
            ("emf_depth", m.emf_depth),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("model.{name} must be positive")));
        }
        if m.d_model % m.heads != 0 {
            return Err(Error::config(format!("{} heads do not divide d_model {}", m.heads, m.d_model)));
        }
        if m.image_side % m.patch_size != 0 {
            return Err(Error::config(format!(
                "image_side {} not divisible by patch_size {}",
                m.image_side, m.patch_size
            )));
        }
        if m.max_text_len < 2 {
            return Err(Error::config("max_text_len must leave room for cls and sep"));
        }
        if !(0.0..1.0).contains(&self.pretrain.image_mask_ratio) {
            return Err(Error::config("image_mask_ratio must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.pretrain.text_mask_prob) {
            return Err(Error::config("text_mask_prob must lie in [0, 1]"));
        }
        if self.pretrain.batch_size == 0 || self.finetune.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.data.pixel_mean.len() != m.channels || self.data.pixel_std.len() != m.channels {
            return Err(Error::config("pixel_mean and pixel_std need one entry per channel"));
        }
        if self.data.pixel_std.iter().any(|s| *s <= 0.0) {
            return Err(Error::config("pixel_std entries must be positive"));
        }
        Ok(())
    }
}
