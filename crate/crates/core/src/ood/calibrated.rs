//! Confidence-calibrated training: push OOD-proxy confidences toward the
//! uniform distribution while training normally on in-distribution data.
//!
//! Loss per step: cross-entropy on the in-distribution batch plus
//! beta * KL(uniform || g(x_ood)) on an OOD proxy batch. With beta = 0 the
//! updates are identical to `train_classifier` under the same seed.

use crate::autodiff::{argmax, Tape, Tensor};
use crate::data::{LabeledDataset, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::model::{Classifier, Optimizer, TrainConfig, TrainReport};
use crate::rng::SeededRng;

/// KL(uniform || g) = -ln C - (1/C) sum_i ln g_i, appended on the tape for
/// a [n, c] logits variable, averaged over the batch.
fn uniform_kl_on_tape(
    tape: &mut Tape,
    logits: crate::autodiff::Var,
    classes: usize,
) -> crate::autodiff::Var {
    let log_probs = tape.log_softmax(logits);
    let mean_log = tape.mean(log_probs);
    let neg = tape.scalar_mul(mean_log, -1.0);
    tape.add_scalar(neg, -(classes as f64).ln())
}

/// Train with the calibration objective. The in-distribution batch order
/// matches `train_classifier` exactly; OOD proxy batches cycle through a
/// separately seeded shuffle.
pub fn train_confidence_calibrated(
    model: &mut Classifier,
    in_data: &LabeledDataset,
    ood_proxy: &UnlabeledDataset,
    beta: f64,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if beta < 0.0 {
        return Err(Error::InvalidArgument("beta must be >= 0".into()));
    }
    if in_data.is_empty() {
        return Err(Error::InvalidArgument("empty training dataset".into()));
    }
    if ood_proxy.is_empty() {
        return Err(Error::InvalidArgument("empty OOD proxy dataset".into()));
    }
    for &l in &in_data.labels {
        if l >= model.num_classes() {
            return Err(Error::LabelOutOfRange {
                label: l,
                num_classes: model.num_classes(),
            });
        }
    }

    let classes = model.num_classes();
    let sizes: Vec<usize> = model.params().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate, &sizes);
    let plan = crate::model::batch_plan(
        in_data.len(),
        cfg.batch_size,
        cfg.epochs,
        cfg.shuffle,
        cfg.seed,
    );
    // Independent stream for proxy sampling so the in-data stream matches
    // train_classifier bit-for-bit.
    let mut ood_rng = SeededRng::new(cfg.seed ^ 0x6f6f_645f_7072);
    let mut ood_order: Vec<usize> = (0..ood_proxy.len()).collect();
    ood_rng.shuffle(&mut ood_order);
    let mut ood_cursor = 0usize;

    let mut report = TrainReport::default();
    for epoch_batches in &plan {
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in epoch_batches {
            let images: Vec<Tensor> = batch.iter().map(|&i| in_data.images[i].clone()).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| in_data.labels[i]).collect();
            let in_batch = model.batch_from_images(&images)?;

            let mut tape = Tape::new();
            let xv = tape.constant(&in_batch);
            let mut param_vars = Vec::with_capacity(model.params().len());
            for (_, t) in model.params() {
                let mut leaf = t.clone();
                leaf.set_requires_grad(true);
                param_vars.push(tape.input(&leaf));
            }
            let logits =
                crate::model::forward_with_params(model, &mut tape, xv, &param_vars)?;
            let mut loss = tape.cross_entropy(logits, &labels)?;

            if beta > 0.0 {
                let take = batch.len().min(ood_proxy.len());
                let mut ood_images = Vec::with_capacity(take);
                for _ in 0..take {
                    if ood_cursor == ood_order.len() {
                        ood_rng.shuffle(&mut ood_order);
                        ood_cursor = 0;
                    }
                    ood_images.push(ood_proxy.images[ood_order[ood_cursor]].clone());
                    ood_cursor += 1;
                }
                let ood_batch = model.batch_from_images(&ood_images)?;
                let ov = tape.constant(&ood_batch);
                let ood_logits =
                    crate::model::forward_with_params(model, &mut tape, ov, &param_vars)?;
                let kl = uniform_kl_on_tape(&mut tape, ood_logits, classes);
                let weighted = tape.scalar_mul(kl, beta);
                loss = tape.add(loss, weighted)?;
            }

            let loss_val = tape.value(loss).item();
            loss_sum += loss_val * batch.len() as f64;
            correct += tape
                .value(logits)
                .data()
                .chunks(classes)
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();

            let grads = tape.backward(loss)?;
            let grad_tensors: Vec<Tensor> = param_vars
                .iter()
                .map(|&v| grads.wrt(v).unwrap().clone())
                .collect();
            opt.step(model.params_mut(), &grad_tensors);
        }
        report.epoch_loss.push(loss_sum / in_data.len() as f64);
        report
            .epoch_accuracy
            .push(100.0 * correct as f64 / in_data.len() as f64);
    }
    report.final_loss = *report.epoch_loss.last().unwrap();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_gaussian_noise_ood, gen_shape_pair, ShapeClass};
    use crate::model::{train_classifier, Arch};
    use crate::ood::baseline_score;

    fn setup() -> (LabeledDataset, UnlabeledDataset) {
        gen_shape_pair(
            80,
            60,
            &[12, 12],
            &[ShapeClass::HBar, ShapeClass::VBar],
            &[ShapeClass::Ring],
            71,
        )
        .unwrap()
    }

    fn fresh(seed: u64, names: &[String]) -> Classifier {
        Classifier::new(
            Arch::Mlp2 {
                input_dim: 144,
                hidden: 24,
            },
            names.to_vec(),
            seed,
        )
        .unwrap()
    }

    #[test]
    fn kl_at_uniform_confidences_is_zero() {
        let mut tape = Tape::new();
        let logits = tape.input(&Tensor::new(vec![2, 4], vec![0.7; 8]).unwrap());
        let kl = uniform_kl_on_tape(&mut tape, logits, 4);
        assert!(tape.value(kl).item().abs() < 1e-12);
    }

    #[test]
    fn negative_beta_rejected() {
        let (data, ood) = setup();
        let mut m = fresh(1, &data.label_names);
        assert!(
            train_confidence_calibrated(&mut m, &data, &ood, -1.0, &TrainConfig::default())
                .is_err()
        );
    }

    #[test]
    fn beta_zero_matches_plain_training_exactly() {
        let (data, ood) = setup();
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let mut a = fresh(5, &data.label_names);
        let mut b = fresh(5, &data.label_names);
        train_confidence_calibrated(&mut a, &data, &ood, 0.0, &cfg).unwrap();
        train_classifier(&mut b, &data, &cfg).unwrap();
        for ((_, pa), (_, pb)) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa.data(), pb.data());
        }
    }

    #[test]
    fn calibration_lowers_ood_confidence_vs_plain_twin() {
        let (data, _) = setup();
        // Proxy: gaussian noise; evaluation on held-out noise.
        let proxy = gen_gaussian_noise_ood(60, &[12, 12], 127.0, 50.0, 3).unwrap();
        let holdout = gen_gaussian_noise_ood(40, &[12, 12], 127.0, 50.0, 4).unwrap();
        let cfg = TrainConfig {
            epochs: 8,
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let mut plain = fresh(9, &data.label_names);
        let mut calibrated = fresh(9, &data.label_names);
        train_confidence_calibrated(&mut plain, &data, &proxy, 0.0, &cfg).unwrap();
        train_confidence_calibrated(&mut calibrated, &data, &proxy, 1.0, &cfg).unwrap();
        let mean_conf = |m: &Classifier| -> f64 {
            holdout
                .images
                .iter()
                .map(|x| baseline_score(m, x).unwrap())
                .sum::<f64>()
                / holdout.len() as f64
        };
        let plain_conf = mean_conf(&plain);
        let calibrated_conf = mean_conf(&calibrated);
        assert!(
            calibrated_conf < plain_conf,
            "calibrated {calibrated_conf} !< plain {plain_conf}"
        );
    }
}
