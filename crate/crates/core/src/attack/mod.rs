//! Targeted evasion attacks from in-distribution or OOD starting points.
//!
//! All attacks minimize an adversarial loss by iterative optimization while
//! projecting onto the feasible set H = {x : d(x, x0) <= eps} intersected
//! with the [0,1] pixel box. Only targeted attacks are implemented.

mod blackbox;
mod bpda;
mod eot;
mod magnet;

pub use blackbox::{blackbox_pgd_attack, estimate_gradient_fd, CountingOracle, QueryOracle};
pub use bpda::bpda_attack;
pub use eot::{eot_attack, EotConfig, Transform, TransformSampler};
pub use magnet::{magnet_adaptive_attack, MagnetAttackOptions};

use crate::autodiff::{argmin, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::rng::SeededRng;

/// Distance metric for the perturbation ball.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Norm {
    Linf,
    L2,
}

/// Feasible set: eps-ball around the start in the given norm, intersected
/// with the fixed [0,1] pixel box. Epsilon is on the [0,1] scale.
#[derive(Clone, Copy, Debug)]
pub struct PerturbationConstraint {
    pub norm: Norm,
    pub epsilon: f64,
}

impl PerturbationConstraint {
    pub fn linf(epsilon: f64) -> Self {
        PerturbationConstraint {
            norm: Norm::Linf,
            epsilon,
        }
    }

    pub fn l2(epsilon: f64) -> Self {
        PerturbationConstraint {
            norm: Norm::L2,
            epsilon,
        }
    }

    /// Distance from `start` under this constraint's norm.
    pub fn distance(&self, x: &Tensor, start: &Tensor) -> f64 {
        match self.norm {
            Norm::Linf => x.linf_distance(start),
            Norm::L2 => x.l2_distance(start),
        }
    }

    pub fn is_feasible(&self, x: &Tensor, start: &Tensor) -> bool {
        self.distance(x, start) <= self.epsilon + 1e-9
            && x.data().iter().all(|&p| (0.0..=1.0).contains(&p))
    }
}

/// Adversarial loss driving classification toward the target.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    /// Cross-entropy at the target label.
    Xent,
    /// Margin logit loss max(max_{i != T} phi_i - phi_T, -kappa).
    Cw,
}

/// Target label selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Targeting {
    /// Uniform over classes excluding the current prediction.
    Rand,
    /// Class with the least confidence on the unmodified input.
    LeastLikely,
}

/// Everything needed to run one targeted attack.
#[derive(Clone, Debug)]
pub struct AttackConfig {
    pub loss_kind: LossKind,
    /// CW confidence margin; ignored for cross-entropy.
    pub kappa: f64,
    pub constraint: PerturbationConstraint,
    /// Step size; `None` picks eps/10 for Linf and eps/5 for L2.
    pub step_size: Option<f64>,
    pub max_iters: usize,
    pub plateau_patience: usize,
    /// Relative best-loss improvement below which an iteration counts as
    /// plateaued.
    pub plateau_min_delta: f64,
    pub targeting: Targeting,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(constraint: PerturbationConstraint) -> Self {
        AttackConfig {
            loss_kind: LossKind::Xent,
            kappa: 0.0,
            constraint,
            step_size: None,
            max_iters: 100,
            plateau_patience: 20,
            plateau_min_delta: 1e-4,
            targeting: Targeting::Rand,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters < 1 {
            return Err(Error::InvalidConfig("max_iters must be >= 1".into()));
        }
        if self.constraint.epsilon < 0.0 {
            return Err(Error::InvalidConfig("epsilon must be >= 0".into()));
        }
        if self.kappa < 0.0 {
            return Err(Error::InvalidConfig("kappa must be >= 0".into()));
        }
        if let Some(a) = self.step_size {
            if a <= 0.0 {
                return Err(Error::InvalidConfig("step_size must be > 0".into()));
            }
        }
        Ok(())
    }

    pub fn effective_step_size(&self) -> f64 {
        if let Some(a) = self.step_size {
            return a;
        }
        let eps = self.constraint.epsilon;
        if eps == 0.0 {
            // The ball is a point; any positive step is projected away.
            return 1e-3;
        }
        match self.constraint.norm {
            Norm::Linf => eps / 10.0,
            Norm::L2 => eps / 5.0,
        }
    }
}

/// Everything observed about one attack's outcome.
#[derive(Clone, Debug)]
pub struct AttackResult {
    pub adv_example: Tensor,
    pub start: Tensor,
    pub target: usize,
    /// f(adv_example) == target; for detector-protected attacks, also
    /// requires evasion of the detector.
    pub success: bool,
    /// g(adv_example)(target).
    pub target_confidence: f64,
    pub iterations_used: usize,
    /// Oracle queries consumed (black-box attacks only).
    pub queries_used: Option<u64>,
    pub final_loss: f64,
    /// The loss gradient at the start point was exactly zero.
    pub zero_grad_at_start: bool,
    /// Fraction of fresh transform draws classified as the target
    /// (expectation-over-transforms attacks only).
    pub transform_success_rate: Option<f64>,
}

impl AttackResult {
    /// Feasibility invariant: within the ball (both norms use the +1e-9
    /// slack) and inside the pixel box.
    pub fn check_feasible(&self, constraint: &PerturbationConstraint) -> bool {
        constraint.is_feasible(&self.adv_example, &self.start)
    }
}

/// Pick an attack target for `x`.
pub fn select_target(
    model: &Classifier,
    x: &Tensor,
    mode: Targeting,
    seed: u64,
) -> Result<usize> {
    let c = model.num_classes();
    if c < 2 {
        return Err(Error::InvalidArgument(
            "target selection needs at least two classes".into(),
        ));
    }
    match mode {
        Targeting::Rand => {
            let (predicted, _) = model.predict(x)?;
            let mut rng = SeededRng::new(seed);
            let draw = rng.below(c - 1);
            Ok(if draw < predicted { draw } else { draw + 1 })
        }
        Targeting::LeastLikely => {
            let g = model.confidences(x)?;
            Ok(argmin(&g))
        }
    }
}

/// Append the adversarial loss for `logits` (shape [1,c]) to the tape.
pub(crate) fn adv_loss_on_tape(
    tape: &mut Tape,
    logits: Var,
    target: usize,
    kind: LossKind,
    kappa: f64,
) -> Result<Var> {
    let c = *tape.value(logits).shape().last().unwrap();
    if target >= c {
        return Err(Error::LabelOutOfRange {
            label: target,
            num_classes: c,
        });
    }
    match kind {
        LossKind::Xent => tape.cross_entropy(logits, &[target]),
        LossKind::Cw => {
            let flat = tape.reshape(logits, vec![c])?;
            let others = tape.remove_index(flat, target)?;
            let other_max = tape.reduce_max(others)?;
            let target_logit = tape.gather(flat, target)?;
            let margin = tape.sub(other_max, target_logit)?;
            Ok(tape.clamp(margin, -kappa, f64::INFINITY))
        }
    }
}

/// Adversarial loss value at `x` (no gradient).
pub fn adv_loss(
    model: &Classifier,
    x: &Tensor,
    target: usize,
    kind: LossKind,
    kappa: f64,
) -> Result<f64> {
    let batch = model.batch_from_images(std::slice::from_ref(x))?;
    let mut tape = Tape::new();
    let xv = tape.constant(&batch);
    let logits = model.forward(&mut tape, xv)?;
    let loss = adv_loss_on_tape(&mut tape, logits, target, kind, kappa)?;
    Ok(tape.value(loss).item())
}

/// Loss value and gradient with respect to the input.
pub(crate) fn adv_loss_and_grad(
    model: &Classifier,
    x: &Tensor,
    target: usize,
    kind: LossKind,
    kappa: f64,
) -> Result<(f64, Tensor)> {
    let mut batch = model.batch_from_images(std::slice::from_ref(x))?;
    batch.set_requires_grad(true);
    let mut tape = Tape::new();
    let xv = tape.input(&batch);
    let logits = model.forward(&mut tape, xv)?;
    let loss = adv_loss_on_tape(&mut tape, logits, target, kind, kappa)?;
    let loss_val = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let grad = grads.wrt(xv).unwrap().reshaped(x.shape().to_vec())?;
    Ok((loss_val, grad))
}

/// Project onto the feasible set: Linf clamps per pixel to
/// [x0 - eps, x0 + eps] then to [0,1]; L2 rescales the difference to length
/// eps when it exceeds it, then clamps to [0,1].
pub fn project(x: &Tensor, start: &Tensor, constraint: &PerturbationConstraint) -> Tensor {
    let eps = constraint.epsilon;
    let mut out = vec![0.0; x.numel()];
    match constraint.norm {
        Norm::Linf => {
            for ((o, &xi), &si) in out.iter_mut().zip(x.data()).zip(start.data()) {
                *o = xi.clamp(si - eps, si + eps).clamp(0.0, 1.0);
            }
        }
        Norm::L2 => {
            let dist = x.l2_distance(start);
            let scale = if dist > eps && dist > 0.0 { eps / dist } else { 1.0 };
            for ((o, &xi), &si) in out.iter_mut().zip(x.data()).zip(start.data()) {
                *o = (si + (xi - si) * scale).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

/// Best-iterate tracker with relative-improvement plateau detection.
pub(crate) struct BestTracker {
    pub best_loss: f64,
    pub best_x: Tensor,
    pub best_iter: usize,
    stall: usize,
    min_delta: f64,
    patience: usize,
}

impl BestTracker {
    pub fn new(loss0: f64, x0: Tensor, min_delta: f64, patience: usize) -> Self {
        BestTracker {
            best_loss: loss0,
            best_x: x0,
            best_iter: 0,
            stall: 0,
            min_delta,
            patience,
        }
    }

    /// Record the loss of the iterate produced at `iter`; returns true when
    /// the search has plateaued and should stop.
    pub fn observe(&mut self, iter: usize, loss: f64, x: &Tensor) -> bool {
        let threshold = self.min_delta * self.best_loss.abs().max(1e-12);
        if self.best_loss - loss > threshold {
            self.stall = 0;
        } else {
            self.stall += 1;
        }
        if loss < self.best_loss {
            self.best_loss = loss;
            self.best_x = x.clone();
            self.best_iter = iter;
        }
        self.stall >= self.patience
    }
}

/// The shared projected-descent loop: evaluate the loss at the start, then
/// step/project/re-evaluate until `max_iters` or plateau, tracking the
/// best-loss iterate. Returns (tracker, iterations used, zero-grad flag).
pub(crate) fn pgd_core(
    start: &Tensor,
    cfg: &AttackConfig,
    mut loss_and_grad_fn: impl FnMut(&Tensor) -> Result<(f64, Tensor)>,
    mut loss_fn: impl FnMut(&Tensor) -> Result<f64>,
) -> Result<(BestTracker, usize, bool)> {
    cfg.validate()?;
    if start.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::InvalidArgument("start point outside [0,1]".into()));
    }
    let alpha = cfg.effective_step_size();
    let mut x = project(start, start, &cfg.constraint);
    let loss0 = loss_fn(&x)?;
    let mut tracker = BestTracker::new(
        loss0,
        x.clone(),
        cfg.plateau_min_delta,
        cfg.plateau_patience,
    );
    let mut zero_grad_at_start = false;
    let mut iterations_used = 0;

    for iter in 1..=cfg.max_iters {
        let (_, grad) = loss_and_grad_fn(&x)?;
        if iter == 1 && grad.data().iter().all(|&g| g == 0.0) {
            // sign(0) = 0: the step is a no-op but the attack proceeds.
            zero_grad_at_start = true;
        }
        let stepped = take_step(&x, &grad, alpha, cfg.constraint.norm);
        x = project(&stepped, start, &cfg.constraint);
        iterations_used = iter;
        let loss = loss_fn(&x)?;
        if tracker.observe(iter, loss, &x) {
            break;
        }
    }
    Ok((tracker, iterations_used, zero_grad_at_start))
}

/// Projected gradient descent: Linf takes sign steps, L2 takes normalized
/// gradient steps; stops at `max_iters` or on plateau; returns the
/// best-loss feasible iterate.
pub fn pgd_attack(
    model: &Classifier,
    start: &Tensor,
    target: usize,
    cfg: &AttackConfig,
) -> Result<AttackResult> {
    let (tracker, iterations_used, zero_grad) = pgd_core(
        start,
        cfg,
        |x| adv_loss_and_grad(model, x, target, cfg.loss_kind, cfg.kappa),
        |x| adv_loss(model, x, target, cfg.loss_kind, cfg.kappa),
    )?;
    finish_result(
        model,
        start,
        target,
        tracker,
        iterations_used,
        zero_grad,
        &cfg.constraint,
    )
}

pub(crate) fn take_step(x: &Tensor, grad: &Tensor, alpha: f64, norm: Norm) -> Tensor {
    let data: Vec<f64> = match norm {
        Norm::Linf => x
            .data()
            .iter()
            .zip(grad.data())
            .map(|(&xi, &gi)| xi - alpha * sign(gi))
            .collect(),
        Norm::L2 => {
            let gnorm = grad.data().iter().map(|g| g * g).sum::<f64>().sqrt();
            if gnorm == 0.0 {
                x.data().to_vec()
            } else {
                x.data()
                    .iter()
                    .zip(grad.data())
                    .map(|(&xi, &gi)| xi - alpha * gi / gnorm)
                    .collect()
            }
        }
    };
    Tensor::new(x.shape().to_vec(), data).unwrap()
}

pub(crate) fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Score the best iterate and assemble the result, asserting feasibility.
pub(crate) fn finish_result(
    model: &Classifier,
    start: &Tensor,
    target: usize,
    tracker: BestTracker,
    iterations_used: usize,
    zero_grad_at_start: bool,
    constraint: &PerturbationConstraint,
) -> Result<AttackResult> {
    let g = model.confidences(&tracker.best_x)?;
    let predicted = crate::autodiff::argmax(&g);
    let result = AttackResult {
        adv_example: tracker.best_x,
        start: start.clone(),
        target,
        success: predicted == target,
        target_confidence: g[target],
        iterations_used,
        queries_used: None,
        final_loss: tracker.best_loss,
        zero_grad_at_start,
        transform_success_rate: None,
    };
    debug_assert!(result.check_feasible(constraint));
    Ok(result)
}
