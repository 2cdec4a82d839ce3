use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{clip_global_norm, Adam};
use crate::autodiff::{Graph, Tensor};
use crate::config::RunConfig;
use crate::dataset::{class_weights, ClassWeights, TrialRecord};
use crate::error::{Error, Result};
use crate::evaluator::{pr_auc, roc_auc};
use crate::model::{Dims, Model};

pub const SHUFFLE_STREAM: u64 = 1;
pub const TRAIN_SELECTION_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainPhase {
    /// Training on the train split with validation-based model selection.
    Select,
    /// Refit on train + validation for the selected number of epochs.
    Retrain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub phase: TrainPhase,
    pub epoch: usize,
    pub train_loss: f64,
    pub train_classification: f64,
    pub valid_loss: Option<f64>,
    pub valid_roc_auc: Option<f64>,
    pub valid_pr_auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub config_hash: String,
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) with the lowest validation loss, or the last epoch
    /// when there is no validation split.
    pub best_epoch: usize,
    pub best_valid_loss: Option<f64>,
    pub best_valid_pr_auc: Option<f64>,
    pub retrained: bool,
    pub class_weights: (f64, f64),
    pub steps: u64,
}

pub struct FitOutcome {
    pub model: Model,
    pub report: TrainReport,
    /// Shuffle RNG after the final phase.
    pub rng: ChaCha8Rng,
}

fn stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn labels(records: &[TrialRecord]) -> Vec<u8> {
    records.iter().map(|r| r.label).collect()
}

/// One optimizer step on `batch`; returns (total loss, classification loss).
fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[&TrialRecord],
    weights: ClassWeights,
    sel_rng: &mut ChaCha8Rng,
    at: (usize, u64),
) -> Result<(f64, f64)> {
    let padded = model.pad(batch);
    let mut g = Graph::new();
    let p = model.params.bind(&mut g);
    let mut plan = model.plan(Some(sel_rng))?;
    let out = model.forward(&mut g, &p, &padded, &mut plan)?;
    let parts = model.losses(&mut g, &out, &padded.labels, weights)?;
    let total = g.value(parts.total).item();
    if !total.is_finite() {
        return Err(Error::Divergence {
            epoch: at.0,
            step: at.1,
            detail: format!("loss is {total}"),
        });
    }
    let grads = g.backward(parts.total)?;
    let mut grads: Vec<Tensor> = p.vars().iter().map(|&v| grads.wrt(v)).collect();
    let t = &model.config.train;
    if t.clip_gradients {
        clip_global_norm(&mut grads, t.grad_clip_norm);
    }
    adam.step(&mut model.params, &grads).map_err(|e| Error::Divergence {
        epoch: at.0,
        step: at.1,
        detail: e.to_string(),
    })?;
    Ok((total, g.value(parts.classification).item()))
}

struct PhaseResult {
    model: Model,
    records: Vec<EpochRecord>,
    best_epoch: usize,
    best_loss: Option<f64>,
    best_pr_auc: Option<f64>,
    steps: u64,
    rng: ChaCha8Rng,
}

fn run_phase(
    config: &RunConfig,
    dims: Dims,
    train: &[TrialRecord],
    valid: &[TrialRecord],
    epochs: usize,
    phase: TrainPhase,
) -> Result<PhaseResult> {
    if train.is_empty() {
        return Err(Error::Config("training split is empty".into()));
    }
    let weights = class_weights(&labels(train))?;
    let mut model = Model::new(config, dims)?;
    let mut adam = Adam::new(&model.params, &config.train);
    let mut rng = stream(config.seed, SHUFFLE_STREAM);
    let mut sel_rng = stream(config.seed, TRAIN_SELECTION_STREAM);
    let valid_labels = labels(valid);
    let both = valid_labels.contains(&0) && valid_labels.contains(&1);

    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut records = Vec::new();
    let mut best: Option<(f64, usize, Option<f64>, Model)> = None;
    let mut since_best = 0;
    for epoch in 1..=epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut sum_cls) = (0.0, 0.0);
        for chunk in order.chunks(config.train.batch_size) {
            let batch: Vec<&TrialRecord> = chunk.iter().map(|&i| &train[i]).collect();
            let at = (epoch, adam.steps() + 1);
            let (l, c) = train_step(&mut model, &mut adam, &batch, weights, &mut sel_rng, at)?;
            sum += l * batch.len() as f64;
            sum_cls += c * batch.len() as f64;
        }
        let mut rec = EpochRecord {
            phase,
            epoch,
            train_loss: sum / train.len() as f64,
            train_classification: sum_cls / train.len() as f64,
            valid_loss: None,
            valid_roc_auc: None,
            valid_pr_auc: None,
        };
        if !valid.is_empty() {
            let (loss, preds) = model.evaluate_loss(valid, weights)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step: adam.steps(),
                    detail: format!("validation loss is {loss}"),
                });
            }
            rec.valid_loss = Some(loss);
            if both {
                rec.valid_roc_auc = Some(roc_auc(&preds, &valid_labels)?);
                rec.valid_pr_auc = Some(pr_auc(&preds, &valid_labels)?);
            }
            if best.as_ref().is_none_or(|b| loss < b.0) {
                best = Some((loss, epoch, rec.valid_pr_auc, model.clone()));
                since_best = 0;
            } else {
                since_best += 1;
            }
        }
        debug!(
            "{phase:?} epoch {epoch}: train {:.5} valid {:?} auc {:?}",
            rec.train_loss, rec.valid_loss, rec.valid_roc_auc
        );
        records.push(rec);
        if !valid.is_empty() && since_best >= config.train.patience {
            info!("early stop after epoch {epoch}");
            break;
        }
    }
    let steps = adam.steps();
    Ok(match best {
        Some((loss, epoch, pr, m)) => PhaseResult {
            model: m,
            records,
            best_epoch: epoch,
            best_loss: Some(loss),
            best_pr_auc: pr,
            steps,
            rng,
        },
        None => PhaseResult {
            best_epoch: records.len(),
            model,
            records,
            best_loss: None,
            best_pr_auc: None,
            steps,
            rng,
        },
    })
}

/// Trains with validation-based model selection, then (if configured and a
/// validation split exists) refits from the same initialization on train +
/// validation for the selected number of epochs.
pub fn fit(train: &[TrialRecord], valid: &[TrialRecord], config: &RunConfig, dims: Dims) -> Result<FitOutcome> {
    config.validate()?;
    let sel = run_phase(config, dims, train, valid, config.train.epochs, TrainPhase::Select)?;
    let mut report = TrainReport {
        seed: config.seed,
        config_hash: config.hash(),
        epochs: sel.records,
        best_epoch: sel.best_epoch,
        best_valid_loss: sel.best_loss,
        best_valid_pr_auc: sel.best_pr_auc,
        retrained: false,
        class_weights: {
            let w = class_weights(&labels(train))?;
            (w.negative, w.positive)
        },
        steps: sel.steps,
    };
    if !(config.train.retrain_on_combined && !valid.is_empty()) {
        return Ok(FitOutcome {
            model: sel.model,
            report,
            rng: sel.rng,
        });
    }
    let combined: Vec<TrialRecord> = train.iter().chain(valid).cloned().collect();
    info!("retraining on {} trials for {} epochs", combined.len(), sel.best_epoch);
    let re = run_phase(config, dims, &combined, &[], sel.best_epoch, TrainPhase::Retrain)?;
    report.epochs.extend(re.records);
    report.retrained = true;
    report.steps += re.steps;
    Ok(FitOutcome {
        model: re.model,
        report,
        rng: re.rng,
    })
}
