//! MLM pretraining and classification fine-tuning with AdamW and a
//! linear warmup / linear decay schedule, plus the strategy graph
//! (BASE fine-tune, TAPT, DAPT, DAPT+TAPT).

use crate::mlm_data::{ClassifyExample, MlmExample};
use crate::model::{
    self, Batch, Dropout, ModelError, ModelState, ParamTensors,
};
use crate::scalar::Scalar;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const WEIGHT_DECAY: f64 = 0.01;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),
    #[error("empty example stream")]
    EmptyData,
    #[error("plan error: {0}")]
    Plan(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Fig.-2 style strategy selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Fine-tune directly from the initial weights.
    Base,
    /// Continue pretraining on the task's own unlabeled text.
    Tapt,
    /// Continue pretraining on the domain corpus.
    Dapt,
    /// Domain pretraining followed by task pretraining.
    DaptPlusTapt,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub strategy: Strategy,
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    pub max_seq: usize,
    pub seed: u64,
    pub warmup_fraction: f64,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.learning_rate <= 0.0 {
            return Err(TrainError::Plan("learning_rate must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Plan("batch_size must be >= 1".into()));
        }
        if self.max_steps.is_some() == self.epochs.is_some() {
            return Err(TrainError::Plan(
                "exactly one of max_steps (pretraining) or epochs (fine-tuning) must be set"
                    .into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(TrainError::Plan("warmup_fraction must be in [0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    /// MLM accuracy during pretraining; training-batch accuracy
    /// during fine-tuning epochs.
    pub accuracy: f64,
    /// Wall-clock time. Excluded from serialized logs so identical
    /// runs produce identical bytes.
    #[serde(skip)]
    pub wall_ms: u128,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<StepRecord>,
    pub final_loss: Option<f64>,
    pub final_accuracy: Option<f64>,
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    /// JSONL: one record per logged step, then a final summary line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        let summary = serde_json::json!({
            "summary": true,
            "final_loss": self.final_loss,
            "final_accuracy": self.final_accuracy,
            "best_epoch": self.best_epoch,
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

/// Linear warmup to `learning_rate` over `warmup_fraction` of
/// `total_steps`, then linear decay to zero at `total_steps`.
/// `step` counts from 0 (= before any update) to `total_steps`.
pub fn scheduled_lr(plan: &TrainPlan, step: usize, total_steps: usize) -> f64 {
    if total_steps == 0 {
        return plan.learning_rate;
    }
    let warmup = (plan.warmup_fraction * total_steps as f64).round() as usize;
    if warmup > 0 && step <= warmup {
        plan.learning_rate * step as f64 / warmup as f64
    } else if total_steps == warmup {
        plan.learning_rate
    } else {
        plan.learning_rate * (total_steps - step) as f64 / (total_steps - warmup) as f64
    }
}

/// Adam first/second moments, matching the parameter shapes.
pub struct AdamState<T> {
    pub m: ParamTensors<T>,
    pub v: ParamTensors<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: &model::ModelConfig) -> Self {
        AdamState {
            m: ParamTensors::zeros(config),
            v: ParamTensors::zeros(config),
        }
    }
}

fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.contains("norm"))
}

/// One AdamW update: bias-corrected Adam step at the scheduled
/// learning rate, decoupled weight decay 0.01 on everything except
/// biases and layer norms. `step_index` counts completed steps, so
/// the first call passes 0.
pub fn adam_step<T: Scalar>(
    state: &mut ModelState<T>,
    grads: &ParamTensors<T>,
    adam: &mut AdamState<T>,
    step_index: usize,
    total_steps: usize,
    plan: &TrainPlan,
) -> Result<(), TrainError> {
    for (name, g) in grads.tensors() {
        if g.has_non_finite() {
            return Err(TrainError::NonFiniteGradient(name));
        }
    }
    let lr = T::from_f64_lossy(scheduled_lr(plan, step_index + 1, total_steps));
    let t = (step_index + 1) as i32;
    let beta1 = T::from_f64_lossy(ADAM_BETA1);
    let beta2 = T::from_f64_lossy(ADAM_BETA2);
    let eps = T::from_f64_lossy(ADAM_EPS);
    let wd = T::from_f64_lossy(WEIGHT_DECAY);
    let bc1 = T::one() - T::from_f64_lossy(ADAM_BETA1.powi(t));
    let bc2 = T::one() - T::from_f64_lossy(ADAM_BETA2.powi(t));

    let params = state.params.tensors_mut();
    let gs = grads.tensors();
    let ms = adam.m.tensors_mut();
    let vs = adam.v.tensors_mut();
    for (((param, grad), moment1), moment2) in
        params.into_iter().zip(gs).zip(ms).zip(vs)
    {
        debug_assert_eq!(param.0, grad.0);
        let decay = decays(&param.0);
        let p = param.1.data_mut();
        let g = grad.1.data();
        let m = moment1.1.data_mut();
        let v = moment2.1.data_mut();
        for i in 0..p.len() {
            m[i] = beta1 * m[i] + (T::one() - beta1) * g[i];
            v[i] = beta2 * v[i] + (T::one() - beta2) * g[i] * g[i];
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + eps);
            if decay {
                p[i] -= lr * wd * p[i];
            }
        }
    }
    Ok(())
}

/// Fraction of masked positions whose argmax logit equals the target.
pub fn mlm_accuracy<T: Scalar>(
    state: &ModelState<T>,
    examples: &[MlmExample],
) -> Result<f64, TrainError> {
    let logits = model::mlm_logits(state, examples)?;
    let targets: Vec<u32> = examples
        .iter()
        .flat_map(|ex| ex.target_ids.iter().copied())
        .collect();
    let mut correct = 0usize;
    for (row, &target) in logits.rows.iter().zip(targets.iter()) {
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if argmax == target as usize {
            correct += 1;
        }
    }
    Ok(correct as f64 / targets.len() as f64)
}

fn classify_accuracy<T: Scalar>(
    state: &ModelState<T>,
    examples: &[ClassifyExample],
) -> Result<f64, TrainError> {
    if examples.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let logits = model::predict_logits(state, examples)?;
    let c = state.config.num_labels;
    let mut correct = 0usize;
    for (b, ex) in examples.iter().enumerate() {
        let row = &logits.data()[b * c..(b + 1) * c];
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap_or(std::cmp::Ordering::Equal))
            .map(|(i, _)| i)
            .unwrap_or(0);
        if argmax == ex.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / examples.len() as f64)
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx
}

/// Run `max_steps` AdamW steps over seeded shuffled batches of MLM
/// examples, logging MLM accuracy every `max(1, max_steps / 10)` steps.
pub fn pretrain<T: Scalar>(
    state: &ModelState<T>,
    examples: &[MlmExample],
    plan: &TrainPlan,
) -> Result<(ModelState<T>, TrainLog), TrainError> {
    plan.validate()?;
    let max_steps = plan
        .max_steps
        .ok_or_else(|| TrainError::Plan("pretraining requires max_steps".into()))?;
    if examples.is_empty() {
        return Err(TrainError::EmptyData);
    }
    let mut state = state.clone();
    let mut adam = AdamState::new(&state.config);
    let mut log = TrainLog::default();
    if max_steps == 0 {
        return Ok((state, log));
    }
    let log_every = (max_steps / 10).max(1);
    let start = std::time::Instant::now();

    let mut order: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let mut cursor = 0usize;
    for step in 0..max_steps {
        let mut batch: Vec<MlmExample> = Vec::with_capacity(plan.batch_size);
        let mut skipped = 0usize;
        while batch.len() < plan.batch_size {
            if cursor >= order.len() {
                order = shuffled_indices(examples.len(), plan.seed.wrapping_add(epoch));
                epoch += 1;
                cursor = 0;
            }
            let ex = &examples[order[cursor]];
            cursor += 1;
            if ex.mask_positions.is_empty() {
                // all-unmaskable corpora would spin here forever
                skipped += 1;
                if skipped > examples.len() {
                    return Err(TrainError::Plan(
                        "no example in the stream has masked positions".into(),
                    ));
                }
            } else {
                batch.push(ex.clone());
                skipped = 0;
            }
        }
        let dropout = Dropout::On {
            seed: plan.seed.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(step as u64),
        };
        let (loss, grads) = model::loss_and_grads(&state, Batch::Mlm(&batch), dropout)?;
        adam_step(&mut state, &grads, &mut adam, step, max_steps, plan)?;
        if (step + 1) % log_every == 0 || step + 1 == max_steps {
            let accuracy = mlm_accuracy(&state, examples)?;
            log.records.push(StepRecord {
                step: step + 1,
                loss,
                accuracy,
                wall_ms: start.elapsed().as_millis(),
            });
        }
    }
    log.final_loss = log.records.last().map(|r| r.loss);
    log.final_accuracy = log.records.last().map(|r| r.accuracy);
    Ok((state, log))
}

/// Fine-tune for `epochs` passes over seeded shuffled training data,
/// logging validation accuracy per epoch and returning the checkpoint
/// with the best validation accuracy (ties go to the earliest epoch).
pub fn finetune<T: Scalar>(
    state: &ModelState<T>,
    train: &[ClassifyExample],
    validate: &[ClassifyExample],
    plan: &TrainPlan,
) -> Result<(ModelState<T>, TrainLog), TrainError> {
    plan.validate()?;
    let epochs = plan
        .epochs
        .ok_or_else(|| TrainError::Plan("fine-tuning requires epochs".into()))?;
    if train.is_empty() {
        return Err(TrainError::EmptyData);
    }
    for ex in train.iter().chain(validate.iter()) {
        if ex.label >= state.config.num_labels {
            return Err(TrainError::Model(ModelError::LabelOutOfRange {
                label: ex.label,
                num_labels: state.config.num_labels,
            }));
        }
    }
    let mut current = state.clone();
    let mut log = TrainLog::default();
    if epochs == 0 {
        return Ok((current, log));
    }
    let mut adam = AdamState::new(&current.config);
    let steps_per_epoch = train.len().div_ceil(plan.batch_size);
    let total_steps = steps_per_epoch * epochs;
    let start = std::time::Instant::now();

    let mut best: Option<(f64, usize, ModelState<T>)> = None;
    let mut step = 0usize;
    for epoch in 0..epochs {
        let order = shuffled_indices(train.len(), plan.seed.wrapping_add(epoch as u64));
        for chunk in order.chunks(plan.batch_size) {
            let batch: Vec<ClassifyExample> =
                chunk.iter().map(|&i| train[i].clone()).collect();
            let dropout = Dropout::On {
                seed: plan
                    .seed
                    .wrapping_add(0x517cc1b727220a95)
                    .wrapping_add(step as u64),
            };
            let (loss, grads) =
                model::loss_and_grads(&current, Batch::Classify(&batch), dropout)?;
            adam_step(&mut current, &grads, &mut adam, step, total_steps, plan)?;
            step += 1;
            if step == total_steps || step % steps_per_epoch == 0 {
                log.final_loss = Some(loss);
            }
        }
        let val_accuracy = if validate.is_empty() {
            classify_accuracy(&current, train)?
        } else {
            classify_accuracy(&current, validate)?
        };
        log.records.push(StepRecord {
            step: epoch + 1,
            loss: log.final_loss.unwrap_or(f64::NAN),
            accuracy: val_accuracy,
            wall_ms: start.elapsed().as_millis(),
        });
        let improves = match &best {
            None => true,
            Some((best_acc, _, _)) => val_accuracy > *best_acc,
        };
        if improves {
            best = Some((val_accuracy, epoch + 1, current.clone()));
        }
    }
    let (best_acc, best_epoch, best_state) = best.expect("epochs >= 1");
    log.final_accuracy = Some(best_acc);
    log.best_epoch = Some(best_epoch);
    Ok((best_state, log))
}

/// Strategy graph: produce the pretrained starting point for
/// fine-tuning. `domain` is the in-domain corpus stream, `task` the
/// unlabeled task text stream.
pub fn run_pretraining_strategy<T: Scalar>(
    state: &ModelState<T>,
    strategy: Strategy,
    domain: &[MlmExample],
    task: &[MlmExample],
    plan: &TrainPlan,
) -> Result<(ModelState<T>, Vec<TrainLog>), TrainError> {
    let plan = TrainPlan {
        strategy,
        ..plan.clone()
    };
    match strategy {
        Strategy::Base => Ok((state.clone(), Vec::new())),
        Strategy::Dapt => {
            let (s, log) = pretrain(state, domain, &plan)?;
            Ok((s, vec![log]))
        }
        Strategy::Tapt => {
            let (s, log) = pretrain(state, task, &plan)?;
            Ok((s, vec![log]))
        }
        Strategy::DaptPlusTapt => {
            let (s1, log1) = pretrain(state, domain, &plan)?;
            let (s2, log2) = pretrain(&s1, task, &plan)?;
            Ok((s2, vec![log1, log2]))
        }
    }
}
