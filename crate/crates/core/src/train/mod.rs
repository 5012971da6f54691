//! Training: loss, optimizer, consolidation, single stages and the
//! domain-incremental driver.
//!
//! Every random decision of a stage comes from a stream derived from
//! `(seed, stage)`: the epoch shuffle from `[0, epoch]`, the fire masks of
//! sample `k` in batch `b` from `[1, epoch, b, k]`. Per-sample gradients may
//! be computed in parallel; they are summed in batch order, so results do
//! not depend on the thread count.

mod ewc;
mod loss;
mod optim;

pub use ewc::{anchor_penalty, ewc_fisher, ewc_penalty, EwcAnchor, EwcConfig, EwcState};
pub use loss::{dice_focal_loss, dice_focal_on_tape, DICE_SMOOTH, FOCAL_GAMMA};
pub use optim::{adam_update, AdamConfig, AdamState, Moments};

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{FreezePolicy, NcadaptModel, ParamFilter, PerceptionScope};
use crate::autodiff::{Rng, Tape, Tensor};
use crate::data::Case;
use crate::error::{Error, Result};
use crate::nca::ArchConfig;

const TRAIN_STREAM: u64 = 0x7A11;
const FISHER_STREAM: u64 = 0xF15E;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub lr_gamma: f64,
    #[serde(default)]
    pub adam: AdamConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ewc: Option<EwcConfig>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 8,
            lr: 1.6e-3,
            lr_gamma: 0.9999,
            adam: AdamConfig::default(),
            seed: 0,
            ewc: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return bad("learning-rate gamma must lie in (0, 1]");
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad("Adam betas must lie in [0, 1) and eps be positive");
        }
        if let Some(e) = &self.ewc {
            if !(e.lambda >= 0.0 && e.lambda.is_finite()) || e.fisher_batches == 0 {
                return bad("consolidation needs a finite lambda >= 0 and at least one Fisher batch");
            }
        }
        Ok(())
    }

    /// Learning rate used throughout `epoch` (0-based).
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_gamma.powi(epoch as i32)
    }
}

/// Summary of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: usize,
    pub domain: usize,
    pub label: String,
    pub epochs: usize,
    pub final_loss: f64,
    /// Mean data loss of every epoch.
    pub loss_curve: Vec<f64>,
    /// Mean consolidation penalty of every epoch (all zero without EWC).
    pub penalty_curve: Vec<f64>,
    pub trainable_params: usize,
    pub stored_params: usize,
    /// Wall-clock time; kept out of the serialized report so reports stay
    /// reproducible byte for byte.
    #[serde(skip)]
    pub wall_seconds: f64,
}

/// A finished stage: its report and the optimizer state it ended with.
#[derive(Debug, Clone)]
pub struct StageResult {
    pub report: TrainReport,
    pub optimizer: AdamState,
}

/// Mean loss and mean gradient over `batch` for the trainable tensors of
/// head `domain`. Sample `k` draws its fire masks from `rng.fork(k)`.
pub(crate) fn batch_gradient(
    model: &NcadaptModel,
    batch: &[&Case],
    domain: usize,
    rng: &Rng,
) -> Result<(f64, BTreeMap<usize, Tensor<f32>>)> {
    let per_sample: Vec<(f64, Vec<(usize, Tensor<f32>)>)> = batch
        .par_iter()
        .enumerate()
        .map(|(k, case)| {
            let mut tape = Tape::new();
            let (logits, rec) = model.forward(&mut tape, &case.image, domain, &rng.fork(k as u64), true)?;
            let loss = dice_focal_on_tape(&mut tape, logits, &case.label)?;
            let value = tape.value(loss).data()[0] as f64;
            let mut grads = tape.backward(loss)?;
            Ok((value, rec.leaves.iter().map(|&(i, v)| (i, grads.take(v))).collect()))
        })
        .collect::<Result<_>>()?;
    let inv = 1.0 / batch.len() as f32;
    let mut total = 0.0f64;
    let mut sum: BTreeMap<usize, Tensor<f32>> = BTreeMap::new();
    for (value, grads) in per_sample {
        total += value;
        for (i, g) in grads {
            match sum.get_mut(&i) {
                Some(acc) => {
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    sum.insert(i, g);
                }
            }
        }
    }
    for g in sum.values_mut() {
        for v in g.data_mut() {
            *v *= inv;
        }
    }
    Ok((total / batch.len() as f64, sum))
}

/// Trains the model's active domain on `data` for `cfg.epochs` epochs,
/// updating only trainable tensors. On a non-finite loss or gradient the
/// parameters are rolled back to the start of the failing epoch and a
/// divergence error is returned.
pub fn train_stage(
    model: &mut NcadaptModel,
    data: &[Case],
    cfg: &TrainConfig,
    ewc: &[EwcState],
    stage: usize,
) -> Result<StageResult> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let domain = model
        .active_domain()
        .ok_or_else(|| Error::InvalidArgument("register a domain before training".into()))?;
    let label = model.domains()[domain - 1].label.clone();
    let start = Instant::now();
    let rng = Rng::new(cfg.seed, TRAIN_STREAM).fork(stage as u64);
    let mut adam = AdamState::default();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut penalty_curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let good = model.snapshot();
        let mut order: Vec<usize> = (0..data.len()).collect();
        rng.fork_path(&[0, epoch as u64]).shuffle(&mut order);
        let lr = cfg.lr_at(epoch);
        let (mut loss_sum, mut penalty_sum, mut batches) = (0.0f64, 0.0f64, 0usize);
        let outcome: Result<()> = (|| {
            for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
                let batch: Vec<&Case> = idx.iter().map(|&i| &data[i]).collect();
                let masks = rng.fork_path(&[1, epoch as u64, b as u64]);
                let (loss, mut grads) = batch_gradient(model, &batch, domain, &masks)?;
                if !ewc.is_empty() {
                    let (penalty, pgrads) = ewc_penalty(model, ewc)?;
                    penalty_sum += penalty;
                    for (i, g) in pgrads {
                        let acc = grads.entry(i).or_insert_with(|| g.zeros_like());
                        for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += v;
                        }
                    }
                }
                if !loss.is_finite() {
                    return Err(Error::NonFinite("training loss"));
                }
                adam.step(model, &grads, lr, &cfg.adam)?;
                loss_sum += loss * batch.len() as f64;
                batches += 1;
            }
            Ok(())
        })();
        if let Err(e) = outcome {
            if matches!(e, Error::NonFinite(_) | Error::Diverged { .. }) {
                model.restore(good)?;
                return Err(Error::Diverged {
                    epoch,
                    reason: e.to_string(),
                });
            }
            return Err(e);
        }
        loss_curve.push(loss_sum / data.len() as f64);
        penalty_curve.push(penalty_sum / batches.max(1) as f64);
    }
    Ok(StageResult {
        report: TrainReport {
            stage,
            domain,
            label,
            epochs: cfg.epochs,
            final_loss: *loss_curve.last().expect("at least one epoch"),
            loss_curve,
            penalty_curve,
            trainable_params: model.count_params(ParamFilter::Trainable),
            stored_params: model.count_params(ParamFilter::All),
            wall_seconds: start.elapsed().as_secs_f64(),
        },
        optimizer: adam,
    })
}

/// One task of a domain-incremental sequence.
#[derive(Debug, Clone, Copy)]
pub struct Task<'a> {
    pub label: &'a str,
    pub train: &'a [Case],
}

/// Model, report and optimizer state after one stage of [`run_continual`].
#[derive(Debug, Clone)]
pub struct StageCheckpoint {
    pub model: NcadaptModel,
    pub result: StageResult,
    /// Consolidation states accumulated up to and including this stage.
    pub ewc: Vec<EwcState>,
}

/// Continues a sequence on an existing model: registers the next domain,
/// trains it, applies the freeze policy after the first stage and, with
/// consolidation enabled, appends this stage's Fisher estimate.
pub fn continue_stage(
    model: &mut NcadaptModel,
    task: Task<'_>,
    cfg: &TrainConfig,
    policy: FreezePolicy,
    ewc: &mut Vec<EwcState>,
) -> Result<StageResult> {
    model.add_domain(task.label)?;
    let stage = model.domains().len();
    let result = train_stage(model, task.train, cfg, ewc, stage)?;
    if let Some(e) = &cfg.ewc {
        let rng = Rng::new(cfg.seed, FISHER_STREAM).fork(stage as u64);
        ewc.push(ewc_fisher(model, task.train, e.fisher_batches, cfg.batch_size, e.lambda, &rng)?);
    }
    if stage == 1 {
        model.apply_freeze_policy(policy)?;
    }
    Ok(result)
}

/// Trains tasks in order on one fresh model. `on_stage` sees every stage as
/// it completes (e.g. to persist a checkpoint).
pub fn run_continual(
    tasks: &[Task<'_>],
    arch: &ArchConfig,
    cfg: &TrainConfig,
    policy: FreezePolicy,
    scope: PerceptionScope,
    mut on_stage: impl FnMut(&StageCheckpoint) -> Result<()>,
) -> Result<Vec<StageCheckpoint>> {
    if tasks.is_empty() {
        return Err(Error::InvalidArgument("no tasks to train".into()));
    }
    let mut model = NcadaptModel::new(arch.clone(), policy, scope, cfg.seed)?;
    let mut ewc = Vec::new();
    let mut out = Vec::with_capacity(tasks.len());
    for &task in tasks {
        let result = continue_stage(&mut model, task, cfg, policy, &mut ewc)?;
        let ckpt = StageCheckpoint {
            model: model.clone(),
            result,
            ewc: ewc.clone(),
        };
        on_stage(&ckpt)?;
        out.push(ckpt);
    }
    Ok(out)
}

/// Single-task reference model: a fresh, unfrozen backbone trained on one
/// task with the same hyper-parameters.
pub fn train_baseline(task: Task<'_>, arch: &ArchConfig, cfg: &TrainConfig) -> Result<(NcadaptModel, StageResult)> {
    let cfg = TrainConfig {
        ewc: None,
        ..cfg.clone()
    };
    let mut model = NcadaptModel::new(arch.clone(), FreezePolicy::None, PerceptionScope::Shared, cfg.seed)?;
    model.add_domain(task.label)?;
    let result = train_stage(&mut model, task.train, &cfg, &[], 1)?;
    Ok((model, result))
}
