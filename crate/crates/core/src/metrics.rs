//! Exact-match evaluation, per-type accuracy and cost accounting.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Manifest, QuestionType, Record};
use crate::error::{Error, Result};
use crate::train::{argmax, record_frames, TrainedRun};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeScore {
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub records: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// Only types that occur in the evaluated records.
    pub per_type: BTreeMap<QuestionType, TypeScore>,
    pub maa: f64,
    pub params: usize,
    /// Mean analytic FLOPs of one forward pass per record.
    pub flops_per_sample: f64,
    pub latency_ms: f64,
}

/// Arithmetic mean of the given accuracies (0 for none).
pub fn mean_average_accuracy(per_type: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = per_type.into_iter().fold((0.0, 0usize), |(s, n), a| (s + a, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Builds a report from `(type, correct)` outcomes.
pub fn score(outcomes: &[(QuestionType, bool)]) -> (usize, BTreeMap<QuestionType, TypeScore>) {
    let mut per_type: BTreeMap<QuestionType, TypeScore> = BTreeMap::new();
    for &(ty, hit) in outcomes {
        let e = per_type.entry(ty).or_insert(TypeScore {
            correct: 0,
            total: 0,
            accuracy: 0.0,
        });
        e.total += 1;
        e.correct += usize::from(hit);
    }
    for s in per_type.values_mut() {
        s.accuracy = s.correct as f64 / s.total as f64;
    }
    (outcomes.iter().filter(|o| o.1).count(), per_type)
}

/// Predicted answer string for one record.
pub fn predict(run: &TrainedRun, manifest: &Manifest, rec: &Record) -> Result<String> {
    let frames = record_frames(manifest, rec, &run.cfg, run.cfg.finetune.video_frames)?;
    let ids = run.question_ids(&rec.question);
    let mut t = run.model.inference_tape(&run.store);
    let fused = run.model.answer_forward(&mut t, &frames, &ids)?;
    let k = argmax(t.value(fused.logits).data(), run.answers.len());
    Ok(run.answers.answer(k).unwrap_or_default().to_string())
}

/// Exact-match accuracy of a trained run over `records`.
pub fn evaluate(run: &TrainedRun, manifest: &Manifest, records: &[&Record]) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::Data("nothing to evaluate".into()));
    }
    let start = Instant::now();
    let hits: Vec<bool> = records
        .par_iter()
        .map(|r| Ok(predict(run, manifest, r)? == r.answer))
        .collect::<Result<_>>()?;
    let elapsed = start.elapsed().as_secs_f64();
    let outcomes: Vec<(QuestionType, bool)> = records.iter().map(|r| r.qtype()).zip(hits).collect();
    let (correct, per_type) = score(&outcomes);

    let flops: f64 = records
        .iter()
        .map(|r| {
            let frames = if r.image.is_some() { 1 } else { run.cfg.finetune.video_frames };
            let tab = run.model.flops_table(run.question_ids(&r.question).len(), false);
            // Every frame passes the visual encoder; fusion runs once.
            let visual: u64 = tab
                .rows
                .iter()
                .filter(|(name, _)| is_visual_row(name))
                .map(|row| row.1)
                .sum();
            (tab.total() + visual * (frames as u64 - 1)) as f64
        })
        .sum::<f64>()
        / records.len() as f64;

    Ok(MetricsReport {
        records: records.len(),
        correct,
        accuracy: correct as f64 / records.len() as f64,
        maa: mean_average_accuracy(per_type.values().map(|s| s.accuracy)),
        per_type,
        params: run.store.num_elements(),
        flops_per_sample: flops,
        latency_ms: elapsed * 1e3 / records.len() as f64,
    })
}

fn is_visual_row(name: &str) -> bool {
    name.starts_with("patch_embed") || name.starts_with("encoder") || name.starts_with("diffusion")
}
