use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sdsnet_tensor::{Element, Tensor, TensorError};

use super::adam::{adam_step, AdamState};
use super::folds::FoldPlan;
use super::metrics::Confusion;
use super::{TrainConfig, TrainError};
use crate::models::{decide, sds_sum_baseline, Model, ModelConfig, ModelError, SubjectInput};
use crate::{Label, Session};

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean per-subject loss, accumulated in subject order.
    pub mean_loss: f64,
    /// Subject ids of every mini-batch, in update order.
    pub batches: Vec<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub held_out: Option<usize>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_loss).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Trained<T: Element> {
    pub model: Model<T>,
    pub log: TrainLog,
}

fn fold_of(plan: &FoldPlan, id: &str) -> Result<usize, TrainError> {
    plan.fold_of(id).ok_or_else(|| TrainError::Config(format!("subject {id} is not in the fold plan")))
}

fn diverged(e: ModelError, epoch: usize) -> TrainError {
    match e {
        ModelError::Tensor(TensorError::NonFinite { op }) => TrainError::Diverged {
            epoch,
            last_finite: (epoch > 1).then(|| epoch - 1),
            msg: format!("non-finite value in {op}"),
        },
        other => other.into(),
    }
}

/// Trains a fresh model (initialized from `seed`) on every subject outside
/// `held_out`, with mini-batches of whole subjects and one Adam step per
/// batch. Batch order is reshuffled each epoch from `seed`.
pub fn train<T: Element>(
    data: &[SubjectInput<T>],
    plan: &FoldPlan,
    held_out: Option<usize>,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Trained<T>, TrainError> {
    cfg.validate()?;
    let mut model = Model::<T>::new(model_cfg.clone(), seed)?;
    let mut training = Vec::new();
    for s in data {
        if Some(fold_of(plan, &s.subject_id)?) != held_out {
            training.push(s);
        }
    }
    if training.is_empty() && cfg.epochs > 0 {
        return Err(TrainError::Config("no training subjects outside the held-out fold".into()));
    }
    let names = model.params().names().to_vec();
    let mut adam = AdamState::new(model.params().values());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut log = TrainLog { held_out, epochs: Vec::with_capacity(cfg.epochs) };
    let mut order: Vec<usize> = (0..training.len()).collect();

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut losses = vec![0.0; training.len()];
        let mut batches = Vec::new();
        for batch in order.chunks(cfg.batch_size) {
            let weight = 1.0 / batch.len() as f64;
            let mut grads: Vec<Option<Tensor<T>>> = vec![None; names.len()];
            for &i in batch {
                let g = model.gradients(training[i], weight).map_err(|e| diverged(e, epoch))?;
                losses[i] = g.loss;
                for (acc, gi) in grads.iter_mut().zip(g.grads) {
                    match (acc.as_mut(), gi) {
                        (Some(a), Some(gi)) => a.add_assign(&gi).map_err(ModelError::from)?,
                        (None, gi) => *acc = gi,
                        (Some(_), None) => {}
                    }
                }
            }
            adam_step(model.params_mut().values_mut(), &names, &grads, &mut adam, cfg)?;
            batches.push(batch.iter().map(|&i| training[i].subject_id.clone()).collect());
        }
        let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        if !mean_loss.is_finite() {
            return Err(TrainError::Diverged { epoch, last_finite: (epoch > 1).then(|| epoch - 1), msg: "mean loss".into() });
        }
        log.epochs.push(EpochRecord { epoch, mean_loss, batches });
    }
    Ok(Trained { model, log })
}

/// Checks that no subject of the held-out fold appears in any batch.
/// Returns the number of batch entries inspected.
pub fn audit_leakage(plan: &FoldPlan, log: &TrainLog) -> Result<usize, TrainError> {
    let Some(fold) = log.held_out else { return Ok(0) };
    let held: HashSet<&str> = plan.members(fold).into_iter().collect();
    let mut checked = 0;
    for id in log.epochs.iter().flat_map(|e| e.batches.iter().flatten()) {
        if held.contains(id.as_str()) {
            return Err(TrainError::Leakage { subject: id.clone(), fold });
        }
        checked += 1;
    }
    Ok(checked)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub subject_id: String,
    pub label: Label,
    /// Model probability; absent for rule-based methods.
    pub prob: Option<f64>,
    pub decision: Label,
}

/// Predictions for the subjects of `fold` (all subjects when `None`).
pub fn predict<T: Element>(
    model: &Model<T>,
    data: &[SubjectInput<T>],
    plan: &FoldPlan,
    fold: Option<usize>,
) -> Result<Vec<Prediction>, TrainError> {
    let mut out = Vec::new();
    for s in data {
        if fold.is_some() && Some(fold_of(plan, &s.subject_id)?) != fold {
            continue;
        }
        let p = model.predict(s)?;
        out.push(Prediction { subject_id: s.subject_id.clone(), label: s.label, prob: Some(p), decision: decide(p) });
    }
    Ok(out)
}

pub fn evaluate<T: Element>(
    model: &Model<T>,
    data: &[SubjectInput<T>],
    plan: &FoldPlan,
    fold: Option<usize>,
) -> Result<Confusion, TrainError> {
    Ok(Confusion::from_pairs(predict(model, data, plan, fold)?.iter().map(|p| (p.label, p.decision))))
}

/// The sum-score rule on the subjects of `fold` (all when `None`).
pub fn evaluate_sds_sum(sessions: &[Session], plan: &FoldPlan, fold: Option<usize>) -> Result<Confusion, TrainError> {
    let mut c = Confusion::default();
    for s in sessions {
        if fold.is_some() && Some(fold_of(plan, &s.subject_id)?) != fold {
            continue;
        }
        c.record(s.label, sds_sum_baseline(&s.answers())?);
    }
    Ok(c)
}
