use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::nn::{Mode, Network};
use crate::tensor::Tensor;
use crate::tln::FreezePlan;
use crate::train::augment::{AugmentConfig, Pipeline};
use crate::train::data::Dataset;
use crate::train::optim::{sgd_step, Gradients, OptimizerState};
use crate::train::schedule::{Budget, Schedule};

const EVAL_BATCH: usize = 128;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub budget: Budget,
    pub schedule: Schedule,
    pub momentum: f64,
    pub augment: AugmentConfig,
}

impl TrainConfig {
    pub fn new(budget: Budget) -> Self {
        TrainConfig {
            budget,
            schedule: Schedule::default(),
            momentum: 0.9,
            augment: AugmentConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.budget.validate()?;
        self.schedule.validate()?;
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::contract(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        Ok(())
    }
}

/// One line of the training log, written at the end of every epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    /// Iterations completed so far.
    pub iteration: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean minibatch loss over the epoch.
    pub loss: f64,
    /// Accuracy on the augmented training batches of the epoch.
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

/// Iterations per epoch: `ceil(|train| / batch_size)`.
pub fn epoch_len(train_len: usize, batch_size: usize) -> usize {
    train_len.div_ceil(batch_size).max(1)
}

fn stack(images: Vec<Tensor>) -> Result<Tensor> {
    let mut shape = vec![images.len()];
    shape.extend_from_slice(images[0].shape());
    let data = images.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(shape, data)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode inputs for `ds[indices]`, ready for the network.
pub fn eval_batch(ds: &Dataset, indices: &[usize]) -> Result<Tensor> {
    let [_, h, w] = ds.dims;
    let pipe = Pipeline::new(AugmentConfig::default(), ds.stats.clone(), h, w);
    let images = indices
        .iter()
        .map(|&i| pipe.eval_image(&ds.image(i)))
        .collect::<Result<Vec<_>>>()?;
    stack(images)
}

/// Eval-mode output of `tap` (default: last unit) for every sample, `[n, d]`.
pub fn predict_dataset(model: &Network, ds: &Dataset, tap: Option<&str>) -> Result<Tensor> {
    if ds.is_empty() {
        return Err(Error::contract("cannot run a model over an empty dataset"));
    }
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut rows = Vec::new();
    let mut width = 0;
    for chunk in idx.chunks(EVAL_BATCH) {
        let out = model.predict_tap(&eval_batch(ds, chunk)?, tap)?;
        width = out.shape()[1];
        rows.extend(out.into_data());
    }
    Tensor::new([ds.len(), width], rows)
}

/// Top-1 accuracy under eval-mode forward. Ties go to the lowest class index.
pub fn evaluate(model: &Network, ds: &Dataset) -> Result<f64> {
    let logits = predict_dataset(model, ds, None)?;
    let correct = logits
        .rows()
        .enumerate()
        .filter(|(i, row)| argmax(row) == ds.label(*i))
        .count();
    Ok(correct as f64 / ds.len() as f64)
}

/// Minibatch SGD on `model` under `plan` for `cfg.budget.iterations` steps.
///
/// Each epoch visits a fresh permutation of the training set; the batch
/// window wraps around so every batch has exactly `batch_size` samples.
/// Returns one [`EpochMetrics`] per completed (or final partial) epoch.
pub fn train(
    model: &mut Network,
    plan: &FreezePlan,
    train_ds: &Dataset,
    test_ds: Option<&Dataset>,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if train_ds.is_empty() {
        return Err(Error::contract("training set is empty"));
    }
    if plan.units.len() != model.units.len() {
        return Err(Error::contract(format!(
            "freeze plan covers {} units, network has {}",
            plan.units.len(),
            model.units.len()
        )));
    }
    let n = train_ds.len();
    let batch = cfg.budget.batch_size.min(n);
    let per_epoch = epoch_len(n, batch);
    let flags = plan.trainable_flags();
    let [_, h, w] = train_ds.dims;
    let pipe = Pipeline::new(cfg.augment, train_ds.stats.clone(), h, w);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = OptimizerState::new(cfg.momentum);
    let mut order: Vec<usize> = (0..n).collect();

    let mut trace = Vec::new();
    let (mut loss_sum, mut correct, mut seen, mut steps) = (0.0, 0usize, 0usize, 0usize);
    for it in 0..cfg.budget.iterations {
        let epoch = it / per_epoch;
        let pos = it % per_epoch;
        if pos == 0 {
            order.shuffle(&mut rng);
        }
        let lr = cfg.schedule.lr_at(epoch);
        let idx: Vec<usize> = (0..batch).map(|k| order[(pos * batch + k) % n]).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| train_ds.label(i)).collect();
        let images = idx
            .iter()
            .map(|&i| pipe.augment_image(&train_ds.image(i), &mut rng))
            .collect::<Result<Vec<_>>>()?;

        let mut tape = Tape::new();
        let x = tape.constant(stack(images)?);
        let fwd = model.forward(
            &mut tape,
            x,
            Mode::Train,
            &flags,
            Some(&mut rng as &mut dyn RngCore),
        )?;
        let (loss, probs) = tape.softmax_xent(fwd.output, &labels)?;
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(Error::NonFiniteLoss { iteration: it });
        }
        tape.backward(loss)?;
        let mut grads = Gradients::new();
        for &(key, var) in &fwd.params {
            if flags[key.unit] {
                let g = tape
                    .grad(var)
                    .ok_or_else(|| Error::contract(format!("no gradient recorded for {key:?}")))?;
                grads.insert(key, g.to_vec());
            }
        }
        sgd_step(model, &grads, &mut state, plan, lr)?;
        model.apply_stats(&fwd.stats);

        loss_sum += loss_value;
        correct += probs
            .rows()
            .zip(&labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        seen += batch;
        steps += 1;

        if pos + 1 == per_epoch || it + 1 == cfg.budget.iterations {
            let test_acc = test_ds.map(|t| evaluate(model, t)).transpose()?;
            trace.push(EpochMetrics {
                iteration: it + 1,
                epoch,
                lr,
                loss: loss_sum / steps as f64,
                train_acc: correct as f64 / seen as f64,
                test_acc,
            });
            (loss_sum, correct, seen, steps) = (0.0, 0, 0, 0);
        }
    }
    Ok(trace)
}
