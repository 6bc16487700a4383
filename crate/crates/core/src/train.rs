//! Optimizer, learning-rate schedules and the pretraining / finetuning loops.
//!
//! Samples of a batch run in parallel but their gradients are summed in
//! batch order, and every random draw comes from a seed derived from
//! `(run seed, epoch, sample)`, so a run is bit-reproducible.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::checkpoint;
use crate::config::{RunConfig, ScheduleKind};
use crate::data::{list_frames, load_image, standardize_pixels, stratified_frames, Manifest, Record, Split};
use crate::emf::{topk_vocab, AnswerVocab};
use crate::error::{Error, Result};
use crate::model::{LcmfModel, ModelConfig, PretrainSample};
use crate::param::{Init, ParamId, ParamStore};
use crate::sdmae::{patchify, sample_mask};
use crate::tape::Gradients;
use crate::tensor::Tensor;
use crate::text::{mlm_corrupt, MlmSettings, Vocab};
use crate::weighter::LossWeights;

pub const CONFIG_FILE: &str = "config.toml";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const ANSWERS_FILE: &str = "answers.txt";
pub const CHECKPOINT_FILE: &str = "checkpoint.lcmf";
pub const METRICS_FILE: &str = "metrics.csv";
pub const PRETRAIN_HEADER: [&str; 9] = [
    "epoch", "step", "loss_img", "loss_txt", "w_img", "w_txt", "ema_img", "ema_txt", "lr",
];
pub const FINETUNE_HEADER: [&str; 5] = ["epoch", "step", "loss", "accuracy", "lr"];
/// Consecutive non-finite steps tolerated before a run aborts.
pub const MAX_BAD_STEPS: usize = 3;

const PRETRAIN_STREAM: u64 = 1;
const FINETUNE_STREAM: u64 = 2;
const SHUFFLE_STREAM: u64 = 3;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Folds `parts` into `seed` with splitmix64.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(seed), |acc, p| splitmix64(acc ^ p))
}

/// Learning rate at a step of a run of `total` steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub base: f64,
    pub total: usize,
}

impl Schedule {
    /// One-cycle: cosine warm-up from `base/25` over the first 30% of steps,
    /// then cosine annealing to `base/25e4`.
    pub const WARMUP_FRACTION: f64 = 0.3;
    pub const DIV_START: f64 = 25.0;
    pub const DIV_FINAL: f64 = 25.0e4;

    pub fn lr(&self, step: usize) -> f64 {
        let total = self.total.max(1) as f64;
        let t = (step as f64).min(total);
        let cos_interp = |from: f64, to: f64, frac: f64| to + (from - to) * 0.5 * (1.0 + (PI * frac).cos());
        match self.kind {
            ScheduleKind::Constant => self.base,
            ScheduleKind::Cosine => cos_interp(self.base, 0.0, t / total),
            ScheduleKind::OneCycle => {
                let warm = (Self::WARMUP_FRACTION * total).max(1.0);
                let lo = self.base / Self::DIV_START;
                if t < warm {
                    cos_interp(lo, self.base, t / warm)
                } else {
                    let rest = (total - warm).max(1.0);
                    cos_interp(self.base, self.base / Self::DIV_FINAL, (t - warm) / rest)
                }
            }
        }
    }
}

/// Adam with decoupled weight decay. Decay applies to randomly initialised
/// matrices only; norms, biases and zero-initialised maps are left alone.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    steps: Vec<i32>,
    decay: Vec<bool>,
}

impl AdamW {
    pub fn new(store: &ParamStore, weight_decay: f64) -> Self {
        let sizes: Vec<usize> = store.iter().map(|(_, p)| p.numel()).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            steps: vec![0; sizes.len()],
            decay: store
                .iter()
                .map(|(_, p)| p.value().rank() == 2 && matches!(p.init(), Init::Uniform { .. }))
                .collect(),
        }
    }

    pub fn decays(&self, id: ParamId) -> bool {
        self.decay[id.index()]
    }

    /// Updates the parameters in `active` from the store's gradients.
    pub fn step(&mut self, store: &mut ParamStore, active: &[ParamId], lr: f64) {
        for &id in active {
            let i = id.index();
            self.steps[i] += 1;
            let c1 = 1.0 - self.beta1.powi(self.steps[i]);
            let c2 = 1.0 - self.beta2.powi(self.steps[i]);
            let wd = if self.decay[i] { lr * self.weight_decay } else { 0.0 };
            let (value, grad) = store.value_and_grad_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (p, g)) in value.data_mut().iter_mut().zip(grad.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g * g;
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                *p -= wd * *p + lr * update;
            }
        }
    }
}

/// Sums per-sample gradients into the store in order, scaled by `scale`.
/// Returns the parameters that received a gradient, in id order.
fn reduce_gradients(store: &mut ParamStore, grads: &[Gradients], scale: f64) -> Vec<ParamId> {
    store.zero_grad();
    let mut active = vec![false; store.len()];
    for g in grads {
        g.accumulate_scaled_into(store, scale);
        for (id, _) in g.params() {
            active[id.index()] = true;
        }
    }
    store.ids().filter(|id| active[id.index()]).collect()
}

/// Global L2 norm of the active gradients; rescales them to `max_norm`
/// when larger (`max_norm <= 0` disables clipping).
pub fn clip_gradients(store: &mut ParamStore, active: &[ParamId], max_norm: f64) -> f64 {
    let norm = active
        .iter()
        .map(|&id| store.get(id).grad().data().iter().map(|g| g * g).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        for &id in active {
            store.grad_mut(id).data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

fn fmt_row(values: &[f64]) -> Vec<String> {
    values.iter().map(|v| v.to_string()).collect()
}

/// Reads and standardises one image into patches.
pub fn load_patches(path: &Path, cfg: &RunConfig) -> Result<Tensor> {
    let img = load_image(path)?;
    let side = cfg.model.image_side;
    if img.shape()[0] != side || img.shape()[1] != side {
        return Err(Error::Data(format!(
            "{}: expected {side}x{side}, got {:?}",
            path.display(),
            &img.shape()[..2]
        )));
    }
    patchify(
        &standardize_pixels(&img, &cfg.data.pixel_mean, &cfg.data.pixel_std)?,
        cfg.model.patch_size,
    )
}

/// Patches of every frame the model sees for a record: the image itself, or
/// `k` stratified frames of a video.
pub fn record_frames(manifest: &Manifest, rec: &Record, cfg: &RunConfig, k: usize) -> Result<Vec<Tensor>> {
    match (&rec.image, &rec.frames) {
        (Some(img), _) => Ok(vec![load_patches(&manifest.resolve(img), cfg)?]),
        (None, Some(dir)) => {
            let files = list_frames(&manifest.resolve(dir))?;
            stratified_frames(files.len(), k)?
                .into_iter()
                .map(|i| load_patches(&files[i], cfg))
                .collect()
        }
        (None, None) => Err(Error::Data("record without image or frames".into())),
    }
}

fn tokens(vocab: &Vocab, text: &str, max_len: usize) -> Vec<usize> {
    let mut ids = vocab.tokenize(text);
    if ids.len() > max_len {
        warn!("truncating `{text}` to {max_len} tokens");
        ids.truncate(max_len);
    }
    ids
}

fn train_records(manifest: &Manifest) -> Result<Vec<&Record>> {
    let recs: Vec<&Record> = manifest.split(Split::Train).collect();
    if recs.is_empty() {
        return Err(Error::Data("manifest has no training records".into()));
    }
    Ok(recs)
}

fn batches(n: usize, batch: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[SHUFFLE_STREAM, epoch as u64])));
    order.chunks(batch).map(<[usize]>::to_vec).collect()
}

fn checkpoint_due(every: usize, epoch: usize) -> bool {
    every > 0 && (epoch + 1) % every == 0
}

/// Tracks consecutive skipped steps.
#[derive(Default)]
struct BadSteps {
    run: usize,
    total: usize,
}

impl BadSteps {
    fn record(&mut self, epoch: usize, step: usize, what: &str) -> Result<()> {
        self.run += 1;
        self.total += 1;
        warn!("epoch {epoch} step {step}: non-finite {what}, step skipped");
        if self.run >= MAX_BAD_STEPS {
            return Err(Error::Training(format!("{MAX_BAD_STEPS} consecutive non-finite steps")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Mean masked-patch loss per epoch.
    pub epoch_img: Vec<f64>,
    /// Mean MLM loss per epoch.
    pub epoch_txt: Vec<f64>,
    pub steps: usize,
    pub skipped_steps: usize,
    pub checkpoint: PathBuf,
}

struct PretrainItem {
    patches: Tensor,
    ids: Vec<usize>,
}

/// Masked reconstruction plus masked language modelling on the training
/// split's images and captions. Writes config, vocabulary, metrics and
/// checkpoints into `out`.
pub fn pretrain(cfg: &RunConfig, manifest: &Manifest, out: &Path) -> Result<PretrainReport> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    let recs = train_records(manifest)?;
    let vocab = Vocab::build(recs.iter().flat_map(|r| [r.caption.as_str(), r.question.as_str()]));
    vocab.save(&out.join(VOCAB_FILE))?;

    let (model, mut store) = LcmfModel::build(ModelConfig::from_run(cfg, vocab.len())?, cfg.seed)?;
    let items = recs
        .iter()
        .map(|r| {
            Ok(PretrainItem {
                patches: record_frames(manifest, r, cfg, 1)?.remove(0),
                ids: tokens(&vocab, &r.caption, cfg.model.max_text_len),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let p = &cfg.pretrain;
    let steps_per_epoch = items.len().div_ceil(p.batch_size);
    let schedule = Schedule {
        kind: p.schedule,
        base: p.lr,
        total: steps_per_epoch * p.epochs,
    };
    let mut opt = AdamW::new(&store, p.weight_decay);
    let mut weighter = LossWeights::with_settings(2, p.ema_decay, p.weight_floor, p.weight_step_cap)?;
    let mlm = MlmSettings {
        prob: p.text_mask_prob,
        ..MlmSettings::default()
    };
    let num_patches = model.cfg.sdmae.num_patches();
    let mut csv = csv::Writer::from_path(out.join(METRICS_FILE)).map_err(csv_err)?;
    csv.write_record(PRETRAIN_HEADER).map_err(csv_err)?;

    let mut report = PretrainReport {
        epoch_img: Vec::new(),
        epoch_txt: Vec::new(),
        steps: 0,
        skipped_steps: 0,
        checkpoint: out.join(CHECKPOINT_FILE),
    };
    let mut bad = BadSteps::default();
    for epoch in 0..p.epochs {
        let (mut sum_img, mut sum_txt, mut seen) = (0.0, 0.0, 0usize);
        for batch in batches(items.len(), p.batch_size, cfg.seed, epoch) {
            let step = report.steps;
            report.steps += 1;
            let w = weighter.weights().to_vec();
            let results: Vec<(Gradients, f64, f64)> = batch
                .par_iter()
                .map(|&i| {
                    let seed = derive_seed(cfg.seed, &[PRETRAIN_STREAM, epoch as u64, i as u64]);
                    let (ids, plan_mlm) = mlm_corrupt(&items[i].ids, &mlm, vocab.len(), splitmix64(seed ^ 1));
                    let sample = PretrainSample {
                        patches: items[i].patches.clone(),
                        plan: sample_mask(num_patches, p.image_mask_ratio, seed)?,
                        ids,
                        mlm: plan_mlm,
                    };
                    let mut t = model.tape(&store);
                    let o = model.pretrain_forward(&mut t, &sample, p.normalize_targets, p.masked_only)?;
                    let (li, lt) = (t.value(o.loss_img).item(), t.value(o.loss_txt).item());
                    let a = t.scale(o.loss_img, w[0]);
                    let b = t.scale(o.loss_txt, w[1]);
                    let total = t.add(a, b)?;
                    Ok((t.backward(total)?, li, lt))
                })
                .collect::<Result<_>>()?;
            let n = results.len() as f64;
            let loss_img = results.iter().map(|r| r.1).sum::<f64>() / n;
            let loss_txt = results.iter().map(|r| r.2).sum::<f64>() / n;
            let lr = schedule.lr(step);
            weighter.update(&[loss_img, loss_txt])?;
            if !(loss_img.is_finite() && loss_txt.is_finite()) {
                bad.record(epoch, step, "loss")?;
                continue;
            }
            let grads: Vec<Gradients> = results.into_iter().map(|r| r.0).collect();
            let active = reduce_gradients(&mut store, &grads, 1.0 / n);
            if !clip_gradients(&mut store, &active, p.clip_norm).is_finite() {
                bad.record(epoch, step, "gradient")?;
                continue;
            }
            bad.run = 0;
            opt.step(&mut store, &active, lr);
            sum_img += loss_img * n;
            sum_txt += loss_txt * n;
            seen += batch.len();
            let ema = weighter.ema();
            let mut row = vec![epoch.to_string(), step.to_string()];
            row.extend(fmt_row(&[loss_img, loss_txt, w[0], w[1], ema[0], ema[1], lr]));
            csv.write_record(&row).map_err(csv_err)?;
        }
        let denom = seen.max(1) as f64;
        report.epoch_img.push(sum_img / denom);
        report.epoch_txt.push(sum_txt / denom);
        info!(
            "pretrain epoch {epoch}: img {:.5} txt {:.5} weights {:?}",
            sum_img / denom,
            sum_txt / denom,
            weighter.weights()
        );
        if checkpoint_due(p.checkpoint_every, epoch) {
            checkpoint::save(&store, &out.join(format!("checkpoint_epoch{}.lcmf", epoch + 1)))?;
        }
    }
    csv.flush()?;
    checkpoint::save(&store, &report.checkpoint)?;
    report.skipped_steps = bad.total;
    Ok(report)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Data(format!("metrics csv: {e}"))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneReport {
    pub epoch_loss: Vec<f64>,
    /// Training accuracy of the predictions made during each epoch.
    pub epoch_accuracy: Vec<f64>,
    pub steps: usize,
    pub skipped_steps: usize,
    pub answer_coverage: f64,
    pub checkpoint: PathBuf,
}

struct AnswerItem {
    frames: Vec<Tensor>,
    ids: Vec<usize>,
    answer: usize,
}

/// Answer classification on the training split. With `init`, the vocabulary
/// next to that checkpoint is reused and its parameters are loaded.
pub fn finetune(cfg: &RunConfig, manifest: &Manifest, out: &Path, init: Option<&Path>) -> Result<FinetuneReport> {
    cfg.validate()?;
    fs::create_dir_all(out)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    let recs = train_records(manifest)?;
    let vocab = match init {
        Some(ckpt) => Vocab::load(&sibling(ckpt, VOCAB_FILE))?,
        None => Vocab::build(recs.iter().flat_map(|r| [r.caption.as_str(), r.question.as_str()])),
    };
    vocab.save(&out.join(VOCAB_FILE))?;
    let (answers, coverage) = topk_vocab(recs.iter().map(|r| r.answer.as_str()), cfg.model.num_answers)?;
    answers.save(&out.join(ANSWERS_FILE))?;

    let (model, mut store) = LcmfModel::build(ModelConfig::from_run(cfg, vocab.len())?, cfg.seed)?;
    if let Some(ckpt) = init {
        checkpoint::load_into(&mut store, ckpt)?;
    }
    let f = &cfg.finetune;
    let mut items = Vec::new();
    for r in &recs {
        let Some(answer) = answers.index(&r.answer) else {
            continue;
        };
        items.push(AnswerItem {
            frames: record_frames(manifest, r, cfg, f.video_frames)?,
            ids: tokens(&vocab, &r.question, cfg.model.max_text_len),
            answer,
        });
    }
    info!(
        "finetuning on {} of {} records, answer coverage {coverage:.3}",
        items.len(),
        recs.len()
    );

    let steps_per_epoch = items.len().div_ceil(f.batch_size);
    let schedule = Schedule {
        kind: f.schedule,
        base: f.lr,
        total: steps_per_epoch * f.epochs,
    };
    let mut opt = AdamW::new(&store, f.weight_decay);
    let mut csv = csv::Writer::from_path(out.join(METRICS_FILE)).map_err(csv_err)?;
    csv.write_record(FINETUNE_HEADER).map_err(csv_err)?;
    let mut report = FinetuneReport {
        epoch_loss: Vec::new(),
        epoch_accuracy: Vec::new(),
        steps: 0,
        skipped_steps: 0,
        answer_coverage: coverage,
        checkpoint: out.join(CHECKPOINT_FILE),
    };
    let mut bad = BadSteps::default();
    for epoch in 0..f.epochs {
        let (mut sum_loss, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for batch in batches(items.len(), f.batch_size, derive_seed(cfg.seed, &[FINETUNE_STREAM]), epoch) {
            let step = report.steps;
            report.steps += 1;
            let results: Vec<(Gradients, f64, bool)> = batch
                .par_iter()
                .map(|&i| {
                    let item = &items[i];
                    let mut t = model.tape(&store);
                    let fused = model.answer_forward(&mut t, &item.frames, &item.ids)?;
                    let hit = argmax(t.value(fused.logits).data(), answers.len()) == item.answer;
                    let loss = t.cross_entropy(fused.logits, &[item.answer])?;
                    let l = t.value(loss).item();
                    Ok((t.backward(loss)?, l, hit))
                })
                .collect::<Result<_>>()?;
            let n = results.len() as f64;
            let loss = results.iter().map(|r| r.1).sum::<f64>() / n;
            let hits = results.iter().filter(|r| r.2).count();
            let lr = schedule.lr(step);
            if !loss.is_finite() {
                bad.record(epoch, step, "loss")?;
                continue;
            }
            let grads: Vec<Gradients> = results.into_iter().map(|r| r.0).collect();
            let active = reduce_gradients(&mut store, &grads, 1.0 / n);
            if !clip_gradients(&mut store, &active, f.clip_norm).is_finite() {
                bad.record(epoch, step, "gradient")?;
                continue;
            }
            bad.run = 0;
            opt.step(&mut store, &active, lr);
            sum_loss += loss * n;
            correct += hits;
            seen += batch.len();
            let mut row = vec![epoch.to_string(), step.to_string()];
            row.extend(fmt_row(&[loss, hits as f64 / n, lr]));
            csv.write_record(&row).map_err(csv_err)?;
        }
        let denom = seen.max(1) as f64;
        report.epoch_loss.push(sum_loss / denom);
        report.epoch_accuracy.push(correct as f64 / denom);
        info!(
            "finetune epoch {epoch}: loss {:.5} train accuracy {:.3}",
            sum_loss / denom,
            correct as f64 / denom
        );
        if checkpoint_due(f.checkpoint_every, epoch) {
            checkpoint::save(&store, &out.join(format!("checkpoint_epoch{}.lcmf", epoch + 1)))?;
        }
    }
    csv.flush()?;
    checkpoint::save(&store, &report.checkpoint)?;
    report.skipped_steps = bad.total;
    Ok(report)
}

/// Index of the largest of the first `k` logits (first on ties).
pub fn argmax(logits: &[f64], k: usize) -> usize {
    logits[..k.min(logits.len())]
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// `name` in the directory holding `path`.
pub fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().map(|d| d.join(name)).unwrap_or_else(|| PathBuf::from(name))
}

/// Everything a finetuned run directory holds.
pub struct TrainedRun {
    pub cfg: RunConfig,
    pub vocab: Vocab,
    pub answers: AnswerVocab,
    pub model: LcmfModel,
    pub store: ParamStore,
}

impl TrainedRun {
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
        let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
        let answers = AnswerVocab::load(&dir.join(ANSWERS_FILE))?;
        if answers.len() > cfg.model.num_answers {
            return Err(Error::config(format!(
                "{} answers do not fit a head of {}",
                answers.len(),
                cfg.model.num_answers
            )));
        }
        let (model, mut store) = LcmfModel::build(ModelConfig::from_run(&cfg, vocab.len())?, cfg.seed)?;
        checkpoint::load_into(&mut store, &dir.join(CHECKPOINT_FILE))?;
        Ok(TrainedRun {
            cfg,
            vocab,
            answers,
            model,
            store,
        })
    }

    pub fn question_ids(&self, question: &str) -> Vec<usize> {
        tokens(&self.vocab, question, self.cfg.model.max_text_len)
    }
}
