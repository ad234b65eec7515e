//! Query-based black-box attack: finite-difference gradient estimation with
//! random-grouping query reduction, composed with the PGD loop. The target
//! model sits behind a query-counting oracle that exposes only confidence
//! vectors.

use std::cell::RefCell;

use crate::attack::{project, take_step, AttackConfig, AttackResult, BestTracker, LossKind};
use crate::autodiff::{argmax, Tensor};
use crate::error::{Error, Result};
use crate::model::Classifier;
use crate::rng::SeededRng;

/// Black-box access: confidence vector g(x) for any input, nothing else.
pub trait QueryOracle {
    fn confidences(&self, x: &Tensor) -> Result<Vec<f64>>;
    fn queries_used(&self) -> u64;
}

/// Wraps a local model behind the query-count interface.
pub struct CountingOracle<'a> {
    model: &'a Classifier,
    count: RefCell<u64>,
}

impl<'a> CountingOracle<'a> {
    pub fn new(model: &'a Classifier) -> Self {
        CountingOracle {
            model,
            count: RefCell::new(0),
        }
    }
}

impl QueryOracle for CountingOracle<'_> {
    fn confidences(&self, x: &Tensor) -> Result<Vec<f64>> {
        *self.count.borrow_mut() += 1;
        self.model.confidences(x)
    }

    fn queries_used(&self) -> u64 {
        *self.count.borrow()
    }
}

/// Adversarial loss computed from a confidence vector alone. The CW margin
/// uses log-confidences, which equal logits up to a shared shift.
pub fn loss_from_confidences(g: &[f64], target: usize, kind: LossKind, kappa: f64) -> f64 {
    const FLOOR: f64 = 1e-300;
    match kind {
        LossKind::Xent => -g[target].max(FLOOR).ln(),
        LossKind::Cw => {
            let lt = g[target].max(FLOOR).ln();
            let other = g
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != target)
                .map(|(_, &p)| p.max(FLOOR).ln())
                .fold(f64::NEG_INFINITY, f64::max);
            (other - lt).max(-kappa)
        }
    }
}

/// Finite-difference gradient estimate with random grouping: pixels are
/// partitioned into seeded random groups; each group gets one central
/// difference of the loss along its +/- h indicator direction, and every
/// pixel inherits its group's estimate. Queries used: 2 x number of groups.
#[allow(clippy::too_many_arguments)]
pub fn estimate_gradient_fd(
    oracle: &dyn QueryOracle,
    x: &Tensor,
    loss_kind: LossKind,
    target: usize,
    kappa: f64,
    group_size: usize,
    h: f64,
    seed: u64,
) -> Result<(Tensor, u64)> {
    if group_size == 0 {
        return Err(Error::InvalidArgument("group_size must be >= 1".into()));
    }
    if h <= 0.0 {
        return Err(Error::InvalidArgument("h must be > 0".into()));
    }
    let n = x.numel();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = SeededRng::new(seed);
    rng.shuffle(&mut order);

    let mut grad = vec![0.0; n];
    let mut queries = 0u64;
    let mut probe = x.clone();
    for group in order.chunks(group_size) {
        for &i in group {
            probe.data_mut()[i] = x.data()[i] + h;
        }
        let plus = loss_from_confidences(&oracle.confidences(&probe)?, target, loss_kind, kappa);
        for &i in group {
            probe.data_mut()[i] = x.data()[i] - h;
        }
        let minus = loss_from_confidences(&oracle.confidences(&probe)?, target, loss_kind, kappa);
        for &i in group {
            probe.data_mut()[i] = x.data()[i];
        }
        queries += 2;
        let estimate = (plus - minus) / (2.0 * h);
        for &i in group {
            grad[i] = estimate;
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), grad)?, queries))
}

/// PGD with estimated gradients against a query oracle. Each iteration
/// spends 2 x groups queries on the estimate plus one on the loss probe.
pub fn blackbox_pgd_attack(
    oracle: &dyn QueryOracle,
    start: &Tensor,
    target: usize,
    cfg: &AttackConfig,
    group_size: usize,
    h: f64,
) -> Result<AttackResult> {
    cfg.validate()?;
    if start.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::InvalidArgument("start point outside [0,1]".into()));
    }
    let alpha = cfg.effective_step_size();
    let loss_at = |x: &Tensor| -> Result<f64> {
        Ok(loss_from_confidences(
            &oracle.confidences(x)?,
            target,
            cfg.loss_kind,
            cfg.kappa,
        ))
    };

    let mut x = project(start, start, &cfg.constraint);
    let loss0 = loss_at(&x)?;
    let mut tracker = BestTracker::new(
        loss0,
        x.clone(),
        cfg.plateau_min_delta,
        cfg.plateau_patience,
    );
    let mut zero_grad_at_start = false;
    let mut iterations_used = 0;
    for iter in 1..=cfg.max_iters {
        let (grad, _) = estimate_gradient_fd(
            oracle,
            &x,
            cfg.loss_kind,
            target,
            cfg.kappa,
            group_size,
            h,
            cfg.seed.wrapping_add(iter as u64),
        )?;
        if iter == 1 && grad.data().iter().all(|&g| g == 0.0) {
            zero_grad_at_start = true;
        }
        let stepped = take_step(&x, &grad, alpha, cfg.constraint.norm);
        x = project(&stepped, start, &cfg.constraint);
        iterations_used = iter;
        let loss = loss_at(&x)?;
        if tracker.observe(iter, loss, &x) {
            break;
        }
    }

    let g = oracle.confidences(&tracker.best_x)?;
    let predicted = argmax(&g);
    let result = AttackResult {
        adv_example: tracker.best_x,
        start: start.clone(),
        target,
        success: predicted == target,
        target_confidence: g[target],
        iterations_used,
        queries_used: Some(oracle.queries_used()),
        final_loss: tracker.best_loss,
        zero_grad_at_start,
        transform_success_rate: None,
    };
    debug_assert!(result.check_feasible(&cfg.constraint));
    Ok(result)
}
