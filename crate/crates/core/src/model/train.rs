//! Classifier training: optimizers and the standard cross-entropy loop.

use std::collections::BTreeMap;

use crate::autodiff::{argmax, Tape, Tensor};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::rng::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    SgdMomentum,
    Adam,
}

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 32,
            learning_rate: 0.05,
            optimizer: OptimizerKind::SgdMomentum,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        // learning_rate = 0 is allowed as an explicit no-op run.
        if self.learning_rate < 0.0 {
            return Err(Error::InvalidConfig("learning_rate must be >= 0".into()));
        }
        Ok(())
    }
}

/// Per-epoch loss/accuracy curves plus named auxiliary curves logged by the
/// robust-training variants.
#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epoch_loss: Vec<f64>,
    pub epoch_accuracy: Vec<f64>,
    pub final_loss: f64,
    pub aux: BTreeMap<String, Vec<f64>>,
}

/// First/second-moment state for parameter updates.
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    momentum: Vec<Vec<f64>>,
    adam_v: Vec<Vec<f64>>,
    step_count: u64,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, param_sizes: &[usize]) -> Self {
        let zeros: Vec<Vec<f64>> = param_sizes.iter().map(|&n| vec![0.0; n]).collect();
        Optimizer {
            kind,
            learning_rate,
            momentum: zeros.clone(),
            adam_v: zeros,
            step_count: 0,
        }
    }

    /// Apply one update. `grads[i]` pairs with `params[i]`.
    pub fn step(&mut self, params: &mut [(String, Tensor)], grads: &[Tensor]) {
        self.step_count += 1;
        let lr = self.learning_rate;
        match self.kind {
            OptimizerKind::Sgd => {
                for ((_, p), g) in params.iter_mut().zip(grads) {
                    for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
                        *pv -= lr * gv;
                    }
                }
            }
            OptimizerKind::SgdMomentum => {
                const MU: f64 = 0.9;
                for (((_, p), g), m) in params.iter_mut().zip(grads).zip(&mut self.momentum) {
                    for ((pv, gv), mv) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        *mv = MU * *mv + gv;
                        *pv -= lr * *mv;
                    }
                }
            }
            OptimizerKind::Adam => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                let t = self.step_count as f64;
                let bc1 = 1.0 - B1.powf(t);
                let bc2 = 1.0 - B2.powf(t);
                for ((((_, p), g), m), v) in params
                    .iter_mut()
                    .zip(grads)
                    .zip(&mut self.momentum)
                    .zip(&mut self.adam_v)
                {
                    for (((pv, gv), mv), vv) in p
                        .data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .zip(m.iter_mut())
                        .zip(v.iter_mut())
                    {
                        *mv = B1 * *mv + (1.0 - B1) * gv;
                        *vv = B2 * *vv + (1.0 - B2) * gv * gv;
                        let mhat = *mv / bc1;
                        let vhat = *vv / bc2;
                        *pv -= lr * mhat / (vhat.sqrt() + EPS);
                    }
                }
            }
        }
    }
}

/// Deterministic epoch/batch index plan shared by every training loop so
/// reductions between them are update-for-update exact.
pub(crate) fn batch_plan(
    n: usize,
    batch_size: usize,
    epochs: usize,
    shuffle: bool,
    seed: u64,
) -> Vec<Vec<Vec<usize>>> {
    let mut rng = SeededRng::new(seed);
    let mut plan = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        let mut idx: Vec<usize> = (0..n).collect();
        if shuffle {
            rng.shuffle(&mut idx);
        }
        plan.push(idx.chunks(batch_size).map(|c| c.to_vec()).collect());
    }
    plan
}

/// Minimize mean cross-entropy over the dataset, updating params in place.
pub fn train_classifier(
    model: &mut Classifier,
    dataset: &LabeledDataset,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty training dataset".into()));
    }
    for &l in &dataset.labels {
        if l >= model.num_classes() {
            return Err(Error::LabelOutOfRange {
                label: l,
                num_classes: model.num_classes(),
            });
        }
    }

    let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &sizes);
    let plan = batch_plan(dataset.len(), cfg.batch_size, cfg.epochs, cfg.shuffle, cfg.seed);

    let mut report = TrainReport::default();
    for epoch_batches in &plan {
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in epoch_batches {
            let images: Vec<Tensor> = batch.iter().map(|&i| dataset.images[i].clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| dataset.labels[i]).collect();
            let (loss, batch_correct) = train_step(model, &mut opt, &images, &labels)?;
            loss_sum += loss * batch.len() as f64;
            correct += batch_correct;
        }
        report.epoch_loss.push(loss_sum / dataset.len() as f64);
        report
            .epoch_accuracy
            .push(100.0 * correct as f64 / dataset.len() as f64);
    }
    report.final_loss = *report.epoch_loss.last().unwrap();
    Ok(report)
}

/// One gradient step on a batch; returns (mean loss, #correct).
pub(crate) fn train_step(
    model: &mut Classifier,
    opt: &mut Optimizer,
    images: &[Tensor],
    labels: &[usize],
) -> Result<(f64, usize)> {
    let batch = model.batch_from_images(images)?;
    let mut tape = Tape::new();
    let x = tape.constant(&batch);
    let mut param_vars = Vec::with_capacity(model.params().len());
    {
        // Register params as grad leaves without cloning the model.
        for (_, t) in model.params() {
            let mut leaf = t.clone();
            leaf.set_requires_grad(true);
            param_vars.push(tape.input(&leaf));
        }
    }
    let logits = forward_with_params(model, &mut tape, x, &param_vars)?;
    let loss = tape.cross_entropy(logits, labels)?;
    let loss_val = tape.value(loss).item();

    let correct = tape
        .value(logits)
        .data()
        .chunks(model.num_classes())
        .zip(labels)
        .filter(|(row, &l)| argmax(row) == l)
        .count();

    let grads = tape.backward(loss)?;
    let grad_tensors: Vec<Tensor> = param_vars
        .iter()
        .map(|&v| grads.wrt(v).unwrap().clone())
        .collect();
    opt.step(model.params_mut(), &grad_tensors);
    Ok((loss_val, correct))
}

/// Forward pass using externally registered parameter leaves, so training
/// can read gradients for them. Mirrors `Classifier::forward`.
pub(crate) fn forward_with_params(
    model: &Classifier,
    tape: &mut Tape,
    x: crate::autodiff::Var,
    param_vars: &[crate::autodiff::Var],
) -> Result<crate::autodiff::Var> {
    use crate::model::Arch;
    let by_name: std::collections::HashMap<&str, crate::autodiff::Var> = model
        .params()
        .iter()
        .map(|(n, _)| n.as_str())
        .zip(param_vars.iter().copied())
        .collect();
    let n = tape.value(x).shape()[0];
    match model.arch() {
        Arch::Mlp2 { .. } => {
            let h = tape.matmul(x, by_name["w1"])?;
            let h = tape.add_row_vec(h, by_name["b1"])?;
            let h = tape.relu(h);
            let out = tape.matmul(h, by_name["w2"])?;
            tape.add_row_vec(out, by_name["b2"])
        }
        Arch::CnnS { height, width, .. } => {
            let h = tape.conv2d(x, by_name["conv1_w"], Some(by_name["conv1_b"]), 1)?;
            let h = tape.relu(h);
            let h = tape.max_pool2(h)?;
            let h = tape.conv2d(h, by_name["conv2_w"], Some(by_name["conv2_b"]), 1)?;
            let h = tape.relu(h);
            let h = tape.max_pool2(h)?;
            let flat = 16 * (height / 4) * (width / 4);
            let h = tape.reshape(h, vec![n, flat])?;
            let out = tape.matmul(h, by_name["fc_w"])?;
            tape.add_row_vec(out, by_name["fc_b"])
        }
    }
}
