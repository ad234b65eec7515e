//! Expectation-over-transformations attack for physically robust
//! adversarial examples: every step averages the adversarial-loss gradient
//! over fresh draws of brightness / rescale / rotation transforms.
//!
//! Brightness is differentiated exactly; the nearest-neighbor warps route
//! their gradients straight through.

use crate::attack::{
    adv_loss_on_tape, pgd_core, AttackConfig, AttackResult,
};
use crate::autodiff::{argmax, Tape, Tensor};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::rng::SeededRng;

/// One transform draw, applied as brightness -> rescale -> rotation.
#[derive(Clone, Copy, Debug)]
pub struct Transform {
    /// Additive brightness shift; 0 is a no-op.
    pub brightness: f64,
    /// Uniform rescale factor; 1 is a no-op.
    pub scale: f64,
    /// Rotation in degrees; 0 is a no-op.
    pub rotation_deg: f64,
}

impl Transform {
    pub fn identity() -> Self {
        Transform {
            brightness: 0.0,
            scale: 1.0,
            rotation_deg: 0.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        self.brightness == 0.0 && self.scale == 1.0 && self.rotation_deg == 0.0
    }

    /// The non-differentiable part: nearest-neighbor rescale then rotation.
    /// Out-of-frame samples are zero.
    pub fn warp(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 2 {
            return Err(Error::InvalidShape {
                op: "transform",
                shape: shape.to_vec(),
                reason: "expected [h, w]".into(),
            });
        }
        if self.scale == 1.0 && self.rotation_deg == 0.0 {
            return Ok(x.clone());
        }
        let (h, w) = (shape[0], shape[1]);
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let theta = self.rotation_deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        let data = x.data();
        let mut out = vec![0.0; h * w];
        for oy in 0..h {
            for ox in 0..w {
                // Inverse map: undo rotation, then undo scaling.
                let dy = oy as f64 - cy;
                let dx = ox as f64 - cx;
                let ry = -sin * dx + cos * dy;
                let rx = cos * dx + sin * dy;
                let sy = ry / self.scale + cy;
                let sx = rx / self.scale + cx;
                let iy = (sy + 0.5).floor() as isize;
                let ix = (sx + 0.5).floor() as isize;
                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                    out[oy * w + ox] = data[iy as usize * w + ix as usize];
                }
            }
        }
        Tensor::new(vec![h, w], out)
    }
}

/// Draws transforms uniformly from configured ranges.
#[derive(Clone, Copy, Debug)]
pub struct TransformSampler {
    pub brightness: (f64, f64),
    pub scale: (f64, f64),
    pub rotation_deg: (f64, f64),
}

impl TransformSampler {
    /// The physical-capture ranges: brightness in [-0.2, 0.2], rescale in
    /// [0.8, 1.2], rotation in [-15, 15] degrees.
    pub fn physical() -> Self {
        TransformSampler {
            brightness: (-0.2, 0.2),
            scale: (0.8, 1.2),
            rotation_deg: (-15.0, 15.0),
        }
    }

    /// Degenerate sampler that always yields the identity.
    pub fn identity() -> Self {
        TransformSampler {
            brightness: (0.0, 0.0),
            scale: (1.0, 1.0),
            rotation_deg: (0.0, 0.0),
        }
    }

    pub fn sample(&self, rng: &mut SeededRng) -> Transform {
        let draw = |rng: &mut SeededRng, (lo, hi): (f64, f64)| {
            if lo == hi {
                lo
            } else {
                rng.uniform_in(lo, hi)
            }
        };
        Transform {
            brightness: draw(rng, self.brightness),
            scale: draw(rng, self.scale),
            rotation_deg: draw(rng, self.rotation_deg),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct EotConfig {
    pub samples_per_step: usize,
    /// Fresh draws used to measure success under transform at the end.
    pub eval_draws: usize,
}

impl Default for EotConfig {
    fn default() -> Self {
        EotConfig {
            samples_per_step: 8,
            eval_draws: 100,
        }
    }
}

/// Adversarial loss of one transformed view, with gradient routed to x.
fn transformed_loss(
    model: &Classifier,
    x: &Tensor,
    transform: &Transform,
    target: usize,
    cfg: &AttackConfig,
    want_grad: bool,
) -> Result<(f64, Option<Tensor>)> {
    let mut batch = model.batch_from_images(std::slice::from_ref(x))?;
    batch.set_requires_grad(want_grad);
    let mut tape = Tape::new();
    let xv = tape.input(&batch);
    // Warp first (straight-through), then brightness exactly on-tape.
    let mut cur = xv;
    if transform.scale != 1.0 || transform.rotation_deg != 0.0 {
        let warped = transform.warp(x)?;
        let warped_batch = model.batch_from_images(std::slice::from_ref(&warped))?;
        cur = tape.straight_through(cur, warped_batch)?;
    }
    if transform.brightness != 0.0 {
        let shifted = tape.add_scalar(cur, transform.brightness);
        cur = tape.clamp(shifted, 0.0, 1.0);
    }
    let logits = model.forward(&mut tape, cur)?;
    let loss = adv_loss_on_tape(&mut tape, logits, target, cfg.loss_kind, cfg.kappa)?;
    let loss_val = tape.value(loss).item();
    if !want_grad {
        return Ok((loss_val, None));
    }
    let grads = tape.backward(loss)?;
    let grad = grads.wrt(xv).unwrap().reshaped(x.shape().to_vec())?;
    Ok((loss_val, Some(grad)))
}

/// The transformed view an evaluator would classify.
fn apply_full(x: &Tensor, t: &Transform) -> Result<Tensor> {
    let warped = t.warp(x)?;
    Ok(warped.map(|v| (v + t.brightness).clamp(0.0, 1.0)))
}

/// EOT attack. The returned `success` refers to the untransformed
/// adversarial example; `transform_success_rate` carries the fraction of
/// fresh transform draws classified as the target.
pub fn eot_attack(
    model: &Classifier,
    start: &Tensor,
    target: usize,
    cfg: &AttackConfig,
    sampler: &TransformSampler,
    eot: &EotConfig,
) -> Result<AttackResult> {
    if eot.samples_per_step == 0 {
        return Err(Error::InvalidConfig("samples_per_step must be >= 1".into()));
    }
    let mut rng = SeededRng::new(cfg.seed);
    let k = eot.samples_per_step;

    let loss_and_grad = |x: &Tensor, rng: &mut SeededRng| -> Result<(f64, Tensor)> {
        let mut loss_sum = 0.0;
        let mut grad_sum = vec![0.0; x.numel()];
        for _ in 0..k {
            let t = sampler.sample(rng);
            let (l, g) = transformed_loss(model, x, &t, target, cfg, true)?;
            loss_sum += l;
            for (acc, gi) in grad_sum.iter_mut().zip(g.unwrap().data()) {
                *acc += gi;
            }
        }
        let kf = k as f64;
        for g in grad_sum.iter_mut() {
            *g /= kf;
        }
        Ok((
            loss_sum / kf,
            Tensor::new(x.shape().to_vec(), grad_sum)?,
        ))
    };
    let loss_at = |x: &Tensor, rng: &mut SeededRng| -> Result<f64> {
        let mut loss_sum = 0.0;
        for _ in 0..k {
            let t = sampler.sample(rng);
            let (l, _) = transformed_loss(model, x, &t, target, cfg, false)?;
            loss_sum += l;
        }
        Ok(loss_sum / k as f64)
    };

    // The shared rng must be threaded through both closures in call order.
    let rng_cell = std::cell::RefCell::new(&mut rng);
    let (tracker, iterations_used, zero_grad) = pgd_core(
        start,
        cfg,
        |x| loss_and_grad(x, &mut rng_cell.borrow_mut()),
        |x| loss_at(x, &mut rng_cell.borrow_mut()),
    )?;

    // Success under transform: fraction of fresh draws classified as target.
    let adv = tracker.best_x;
    let mut eval_rng = SeededRng::new(cfg.seed ^ 0x65_76_61_6c);
    let mut hits = 0usize;
    for _ in 0..eot.eval_draws {
        let t = sampler.sample(&mut eval_rng);
        let view = apply_full(&adv, &t)?;
        let (pred, _) = model.predict(&view)?;
        if pred == target {
            hits += 1;
        }
    }
    let g = model.confidences(&adv)?;
    let predicted = argmax(&g);
    let result = AttackResult {
        adv_example: adv,
        start: start.clone(),
        target,
        success: predicted == target,
        target_confidence: g[target],
        iterations_used,
        queries_used: None,
        final_loss: tracker.best_loss,
        zero_grad_at_start: zero_grad,
        transform_success_rate: Some(hits as f64 / eot.eval_draws as f64),
    };
    debug_assert!(result.check_feasible(&cfg.constraint));
    Ok(result)
}
