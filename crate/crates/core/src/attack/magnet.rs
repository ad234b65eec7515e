//! Adaptive attack on MagNet: the reconstruction distance between the input
//! and its autoencoder projection joins the adversarial loss, weighted by
//! `lambda_recon`. Success requires the target classification after
//! reforming and a detector score at or below the threshold.

use crate::advdet::{magnet_reform, Magnet, ReconNorm};
use crate::attack::{
    adv_loss, adv_loss_and_grad, adv_loss_on_tape, pgd_core, AttackConfig, AttackResult,
};
use crate::autodiff::{argmax, Tape, Tensor};
use crate::error::Result;
use crate::model::Classifier;

/// Attack-side options. `pixel_shift` moves start-image pixels toward zero
/// before attacking (clamped to [0,1]); off by default.
#[derive(Clone, Copy, Debug, Default)]
pub struct MagnetAttackOptions {
    pub pixel_shift: Option<f64>,
}

/// Adaptive MagNet attack. With `lambda_recon = 0` the optimization
/// trajectory is identical to `pgd_attack`; only the success criterion
/// (classification after reform plus detector evasion) differs.
pub fn magnet_adaptive_attack(
    model: &Classifier,
    magnet: &Magnet,
    start: &Tensor,
    target: usize,
    cfg: &AttackConfig,
    lambda_recon: f64,
    options: MagnetAttackOptions,
) -> Result<AttackResult> {
    let start = match options.pixel_shift {
        Some(shift) => start.map(|p| (p - shift).clamp(0.0, 1.0)),
        None => start.clone(),
    };

    let combined_loss = |x: &Tensor| -> Result<f64> {
        let base = adv_loss(model, x, target, cfg.loss_kind, cfg.kappa)?;
        if lambda_recon == 0.0 {
            return Ok(base);
        }
        Ok(base + lambda_recon * recon_term_value(magnet, x)?)
    };
    let combined_grad = |x: &Tensor| -> Result<(f64, Tensor)> {
        if lambda_recon == 0.0 {
            return adv_loss_and_grad(model, x, target, cfg.loss_kind, cfg.kappa);
        }
        let mut batch = model.batch_from_images(std::slice::from_ref(x))?;
        batch.set_requires_grad(true);
        let mut tape = Tape::new();
        let xv = tape.input(&batch);
        let logits = model.forward(&mut tape, xv)?;
        let base = adv_loss_on_tape(&mut tape, logits, target, cfg.loss_kind, cfg.kappa)?;
        let ae_in = tape.reshape(xv, ae_batch_shape(magnet))?;
        let recon = magnet.autoencoder.forward(&mut tape, ae_in)?;
        let diff = tape.sub(ae_in, recon)?;
        let dist = match magnet.recon_norm {
            ReconNorm::L1 => tape.l1_norm(diff),
            // Squared distance: same minimizers, smooth at zero.
            ReconNorm::L2 => tape.l2_norm_sq(diff),
        };
        let weighted = tape.scalar_mul(dist, lambda_recon);
        let total = tape.add(base, weighted)?;
        let loss_val = tape.value(total).item();
        let grads = tape.backward(total)?;
        let grad = grads.wrt(xv).unwrap().reshaped(x.shape().to_vec())?;
        Ok((loss_val, grad))
    };

    let (tracker, iterations_used, zero_grad) =
        pgd_core(&start, cfg, combined_grad, combined_loss)?;

    // Success is judged on the defended pipeline: detector, then reformer,
    // then the classifier.
    let adv = tracker.best_x;
    let verdict_score = magnet.score(&adv)?;
    let reformed = magnet_reform(&adv, magnet)?;
    let g_reformed = model.confidences(&reformed)?;
    let predicted = argmax(&g_reformed);
    let result = AttackResult {
        success: predicted == target && verdict_score <= magnet.threshold,
        target_confidence: g_reformed[target],
        adv_example: adv,
        start: start.clone(),
        target,
        iterations_used,
        queries_used: None,
        final_loss: tracker.best_loss,
        zero_grad_at_start: zero_grad,
        transform_success_rate: None,
    };
    debug_assert!(result.check_feasible(&cfg.constraint));
    Ok(result)
}

fn ae_batch_shape(magnet: &Magnet) -> Vec<usize> {
    let mut s = vec![1];
    s.extend(magnet.autoencoder.input_shape());
    s
}

fn recon_term_value(magnet: &Magnet, x: &Tensor) -> Result<f64> {
    let recon = magnet.autoencoder.reconstruct(x)?;
    Ok(match magnet.recon_norm {
        ReconNorm::L1 => x
            .data()
            .iter()
            .zip(recon.data())
            .map(|(a, b)| (a - b).abs())
            .sum(),
        ReconNorm::L2 => x
            .data()
            .iter()
            .zip(recon.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum(),
    })
}
