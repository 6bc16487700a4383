//! Adaptive multi-loss weighting from loss-to-EMA ratios.
//!
//! Each update computes `r_k = loss_k / max(ema_k, eps)` against the EMA from
//! before this step, turns the ratios into targets `n · r_k / Σ r`, projects
//! the targets onto `{w >= floor, Σ w = n}`, and moves every weight towards
//! its target by a shared factor chosen so no weight moves more than
//! `step_cap`. The EMAs are updated afterwards.

use crate::error::{Error, Result};

pub const DEFAULT_DECAY: f64 = 0.95;
pub const DEFAULT_FLOOR: f64 = 0.05;
pub const DEFAULT_STEP_CAP: f64 = 0.05;
const EPS: f64 = 1e-12;

/// `decay · ema + (1 - decay) · loss`
pub fn ema_update(ema: f64, loss: f64, decay: f64) -> f64 {
    decay * ema + (1.0 - decay) * loss
}

/// `Σ w_k · loss_k`
pub fn total_loss(losses: &[f64], weights: &[f64]) -> Result<f64> {
    if losses.len() != weights.len() {
        return Err(Error::dim("total_loss", &[losses.len()], &[weights.len()]));
    }
    Ok(losses.iter().zip(weights).map(|(l, w)| l * w).sum())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    ema: Vec<Option<f64>>,
    weights: Vec<f64>,
    pub decay: f64,
    pub floor: f64,
    pub step_cap: f64,
    skipped: usize,
}

/// What one update did.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UpdateOutcome {
    /// Tasks whose loss was non-finite and therefore ignored.
    pub skipped: usize,
}

impl LossWeights {
    pub fn new(tasks: usize) -> Result<Self> {
        Self::with_settings(tasks, DEFAULT_DECAY, DEFAULT_FLOOR, DEFAULT_STEP_CAP)
    }

    pub fn with_settings(tasks: usize, decay: f64, floor: f64, step_cap: f64) -> Result<Self> {
        if tasks < 2 {
            return Err(Error::config("loss weighting needs at least two tasks"));
        }
        if !(0.0..1.0).contains(&decay) || floor < 0.0 || floor * tasks as f64 > tasks as f64 || step_cap <= 0.0 {
            return Err(Error::config(format!(
                "invalid weighter settings decay={decay} floor={floor} step_cap={step_cap}"
            )));
        }
        Ok(LossWeights {
            ema: vec![None; tasks],
            weights: vec![1.0; tasks],
            decay,
            floor,
            step_cap,
            skipped: 0,
        })
    }

    pub fn tasks(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// EMA per task; `NaN` before the first finite loss.
    pub fn ema(&self) -> Vec<f64> {
        self.ema.iter().map(|e| e.unwrap_or(f64::NAN)).collect()
    }

    /// Total number of non-finite losses ignored so far.
    pub fn skipped(&self) -> usize {
        self.skipped
    }

    pub fn set_weights(&mut self, weights: Vec<f64>) -> Result<()> {
        if weights.len() != self.tasks() {
            return Err(Error::dim("set_weights", &[self.tasks()], &[weights.len()]));
        }
        self.weights = weights;
        Ok(())
    }

    pub fn total(&self, losses: &[f64]) -> Result<f64> {
        total_loss(losses, &self.weights)
    }

    pub fn update(&mut self, losses: &[f64]) -> Result<UpdateOutcome> {
        let n = self.tasks();
        if losses.len() != n {
            return Err(Error::dim("reweight", &[n], &[losses.len()]));
        }
        let finite: Vec<bool> = losses.iter().map(|l| l.is_finite()).collect();
        let skipped = finite.iter().filter(|f| !**f).count();
        self.skipped += skipped;

        // Ratios only for tasks with a finite loss and an existing EMA.
        let ratios: Vec<Option<f64>> = (0..n)
            .map(|k| match (finite[k], self.ema[k]) {
                (true, Some(e)) => Some(losses[k].max(0.0) / e.max(EPS)),
                _ => None,
            })
            .collect();
        if ratios.iter().all(Option::is_some) {
            let r: Vec<f64> = ratios.into_iter().map(Option::unwrap).collect();
            let sum: f64 = r.iter().sum();
            if sum > 0.0 {
                let raw: Vec<f64> = r.iter().map(|x| n as f64 * x / sum).collect();
                let target = project_floor(&raw, self.floor, n as f64);
                self.step_towards(&target);
            }
        }

        for k in 0..n {
            if finite[k] {
                self.ema[k] = Some(match self.ema[k] {
                    Some(e) => ema_update(e, losses[k], self.decay),
                    None => losses[k],
                });
            }
        }
        Ok(UpdateOutcome { skipped })
    }

    fn step_towards(&mut self, target: &[f64]) {
        let max_move = target
            .iter()
            .zip(&self.weights)
            .map(|(t, w)| (t - w).abs())
            .fold(0.0, f64::max);
        if max_move == 0.0 {
            return;
        }
        let s = (self.step_cap / max_move).min(1.0);
        for (w, t) in self.weights.iter_mut().zip(target) {
            *w += s * (t - *w);
        }
        // Both endpoints sum to n, so this only removes rounding drift.
        let n = self.weights.len() as f64;
        let sum: f64 = self.weights.iter().sum();
        for w in &mut self.weights {
            *w *= n / sum;
        }
    }
}

/// Euclidean projection of `v` onto `{x >= floor, Σ x = total}`.
fn project_floor(v: &[f64], floor: f64, total: f64) -> Vec<f64> {
    let mut out = v.to_vec();
    let mut fixed = vec![false; v.len()];
    loop {
        let free: Vec<usize> = (0..v.len()).filter(|&i| !fixed[i]).collect();
        let fixed_sum = floor * (v.len() - free.len()) as f64;
        let free_sum: f64 = free.iter().map(|&i| v[i]).sum();
        let shift = (total - fixed_sum - free_sum) / free.len().max(1) as f64;
        let mut changed = false;
        for &i in &free {
            out[i] = v[i] + shift;
            if out[i] < floor {
                fixed[i] = true;
                out[i] = floor;
                changed = true;
            }
        }
        if !changed {
            return out;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_respects_floor_and_total() {
        let p = project_floor(&[1.98, 0.02], 0.05, 2.0);
        assert!((p[1] - 0.05).abs() < 1e-15);
        assert!((p.iter().sum::<f64>() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn first_update_only_initialises() {
        let mut w = LossWeights::new(2).unwrap();
        w.update(&[3.0, 1.0]).unwrap();
        assert_eq!(w.weights(), &[1.0, 1.0]);
        assert_eq!(w.ema(), vec![3.0, 1.0]);
    }
}
