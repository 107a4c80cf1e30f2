//! Epoch loop with validation-driven early stopping.

use peftsam_core::interactive::{evaluate_ais, evaluate_interactive, training_step, StartKind, TrainConfig};
use peftsam_core::optim::Adam;
use peftsam_core::samlite::SamLite;
use peftsam_core::synth::{Metric, Sample};
use peftsam_core::{Error, Result};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TrainingSummary;

/// Minimum score gain that counts as an improvement.
pub const IMPROVEMENT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Patience,
    MaxEpochs,
    NonFinite,
}

impl StopReason {
    pub fn name(self) -> &'static str {
        match self {
            StopReason::Patience => "patience",
            StopReason::MaxEpochs => "max_epochs",
            StopReason::NonFinite => "non_finite",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub stagnant: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            stagnant: 0,
        }
    }

    /// Records the score of `epoch` (1-based); returns whether it improved.
    pub fn observe(&mut self, epoch: usize, score: f64) -> bool {
        if score > self.best + IMPROVEMENT_TOL || self.best == f64::NEG_INFINITY {
            self.best = score;
            self.best_epoch = epoch;
            self.stagnant = 0;
            true
        } else {
            self.stagnant += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stagnant >= self.patience
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub loss: f64,
    pub mask_loss: f64,
    pub instance_loss: f64,
    pub val_score: f64,
    pub best_score: f64,
    pub stagnant: usize,
}

pub struct TrainOutcome {
    /// Parameters from the best-scoring epoch.
    pub best: SamLite<f32>,
    pub summary: TrainingSummary,
    pub stop: StopReason,
    pub log: Vec<EpochLog>,
    /// Error that ended training early, if any.
    pub failure: Option<Error>,
}

/// Iteration-0 box dice on `val`, averaged with AIS mSA when the instance
/// head is trained.
pub fn validation_score(model: &SamLite<f32>, val: &[Sample], instance_head: bool, seed: u64) -> Result<f64> {
    let boxes = evaluate_interactive(model, val, StartKind::Box, 0, Metric::Dice, seed, false)?;
    if !instance_head {
        return Ok(boxes.initial);
    }
    let ais = evaluate_ais(model, val)?;
    let ais = ais.iter().sum::<f64>() / ais.len().max(1) as f64;
    Ok((boxes.initial + ais) / 2.0)
}

fn step_seed(seed: u64, epoch: usize, step: usize) -> u64 {
    seed ^ ((epoch as u64) << 32 | step as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
}

/// Trains until `patience` epochs pass without improvement or
/// `max_epochs` is reached. A non-finite loss stops training and returns
/// the best parameters seen so far.
pub fn train_model(
    mut model: SamLite<f32>,
    train: &[Sample],
    cfg: &TrainConfig,
    validate: &mut dyn FnMut(&SamLite<f32>) -> Result<f64>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    let mut opt = Adam::new(cfg.lr);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = model.clone();
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stop = StopReason::MaxEpochs;
    let mut failure = None;
    'epochs: for epoch in 1..=cfg.max_epochs {
        let mut rng = peftsam_core::interactive::image_rng(cfg.seed, epoch);
        order.shuffle(&mut rng);
        let mut entry = EpochLog {
            epoch,
            steps: 0,
            loss: 0.0,
            mask_loss: 0.0,
            instance_loss: 0.0,
            val_score: 0.0,
            best_score: 0.0,
            stagnant: 0,
        };
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train[i]).collect();
            match training_step(&mut model, &mut opt, &batch, cfg, step_seed(cfg.seed, epoch, step)) {
                Ok(s) if s.loss.is_finite() => {
                    entry.steps += 1;
                    entry.loss += s.loss;
                    entry.mask_loss += s.mask_loss;
                    entry.instance_loss += s.instance_loss;
                }
                Ok(_) | Err(Error::NonFinite(_)) => {
                    log::error!("non-finite loss in epoch {epoch}, step {step}; keeping the last good parameters");
                    stop = StopReason::NonFinite;
                    failure = Some(Error::NonFinite(format!("training loss in epoch {epoch}")));
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let n = entry.steps.max(1) as f64;
        entry.loss /= n;
        entry.mask_loss /= n;
        entry.instance_loss /= n;
        entry.val_score = validate(&model)?;
        if stopper.observe(epoch, entry.val_score) {
            best = model.clone();
        }
        entry.best_score = stopper.best;
        entry.stagnant = stopper.stagnant;
        log::info!(
            "epoch {epoch}: loss {:.4}, val {:.4}, best {:.4} (epoch {})",
            entry.loss,
            entry.val_score,
            stopper.best,
            stopper.best_epoch
        );
        on_epoch(&entry);
        log.push(entry);
        if stopper.should_stop() {
            stop = StopReason::Patience;
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        summary: TrainingSummary {
            epochs_run: log.len(),
            best_epoch: stopper.best_epoch,
            best_score: if stopper.best.is_finite() { stopper.best } else { 0.0 },
            stop_reason: stop.name().into(),
        },
        stop,
        log,
        failure,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stagnant_scores_stop_after_patience() {
        let mut s = EarlyStopping::new(3);
        let scores = [0.1, 0.2, 0.20005, 0.19, 0.2];
        let mut stopped = None;
        for (i, &v) in scores.iter().enumerate() {
            s.observe(i + 1, v);
            if s.should_stop() {
                stopped = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped, Some(5));
        assert_eq!(s.best_epoch, 2);
    }
}
