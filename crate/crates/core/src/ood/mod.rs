//! Out-of-distribution detection: max-softmax baseline thresholding, ODIN,
//! and confidence-calibrated training.
//!
//! Verdict polarity: an input is flagged OOD exactly when its score is
//! strictly below the calibrated threshold.

mod calibrated;
mod odin;

pub use calibrated::train_confidence_calibrated;
pub use odin::{odin_score, tune_odin, OdinConfig};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Classifier;

/// In/out decision: `is_ood == (score < threshold)`.
#[derive(Clone, Copy, Debug)]
pub struct DetectorVerdict {
    pub score: f64,
    pub threshold: f64,
    pub is_ood: bool,
}

impl DetectorVerdict {
    pub fn new(score: f64, threshold: f64) -> Self {
        DetectorVerdict {
            score,
            threshold,
            is_ood: score < threshold,
        }
    }
}

/// Which scoring rule a detector uses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OodDetectorKind {
    /// Max softmax probability.
    Baseline,
    /// Temperature-scaled max softmax after the confidence-raising input
    /// perturbation.
    Odin(OdinConfig),
}

/// Baseline score: the maximum softmax probability.
pub fn baseline_score(model: &Classifier, x: &Tensor) -> Result<f64> {
    let g = model.confidences(x)?;
    Ok(g.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

/// Largest threshold keeping at least `target_tpr` of the in-distribution
/// scores at or above it.
pub fn calibrate_threshold(scores_in: &[f64], target_tpr: f64) -> Result<f64> {
    if scores_in.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot calibrate on empty scores".into(),
        ));
    }
    if !(0.0 < target_tpr && target_tpr <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "target_tpr {target_tpr} outside (0,1]"
        )));
    }
    let mut sorted = scores_in.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let n = sorted.len();
    let k = (target_tpr * n as f64).ceil() as usize;
    Ok(sorted[k.clamp(1, n) - 1])
}

/// Score an input with the given detector and threshold.
pub fn detect(
    model: &Classifier,
    kind: &OodDetectorKind,
    threshold: f64,
    x: &Tensor,
) -> Result<DetectorVerdict> {
    let score = match kind {
        OodDetectorKind::Baseline => baseline_score(model, x)?,
        OodDetectorKind::Odin(cfg) => odin_score(model, x, cfg)?,
    };
    Ok(DetectorVerdict::new(score, threshold))
}

/// Area under the ROC curve for separating in-distribution (positive, high
/// score) from OOD (negative, low score). Rank-based; ties get half credit.
pub fn auroc(scores_in: &[f64], scores_out: &[f64]) -> f64 {
    let mut better = 0.0;
    for &si in scores_in {
        for &so in scores_out {
            if si > so {
                better += 1.0;
            } else if si == so {
                better += 0.5;
            }
        }
    }
    better / (scores_in.len() as f64 * scores_out.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;

    fn fixed_logit_model(logits: &[f64]) -> Classifier {
        let mut m = Classifier::new(
            Arch::Mlp2 {
                input_dim: 4,
                hidden: 4,
            },
            (0..logits.len()).map(|i| format!("c{i}")).collect(),
            0,
        )
        .unwrap();
        for (name, t) in m.params_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
            if name == "b2" {
                t.data_mut().copy_from_slice(logits);
            }
        }
        m
    }

    #[test]
    fn uniform_logits_score_one_over_classes() {
        let m = fixed_logit_model(&[0.0; 10]);
        let s = baseline_score(&m, &Tensor::from_vec(vec![0.1; 4])).unwrap();
        assert!((s - 0.1).abs() < 1e-12);
    }

    #[test]
    fn dominant_logit_scores_near_one() {
        let m = fixed_logit_model(&[10.0, 0.0, 0.0]);
        let s = baseline_score(&m, &Tensor::from_vec(vec![0.1; 4])).unwrap();
        assert!((s - 0.99991).abs() < 1e-5, "score {s}");
    }

    #[test]
    fn calibrate_threshold_order_statistics() {
        let scores = [0.9, 0.8, 0.7, 0.6, 0.5];
        assert_eq!(calibrate_threshold(&scores, 0.8).unwrap(), 0.6);
        assert_eq!(calibrate_threshold(&scores, 1.0).unwrap(), 0.5);
        assert!(calibrate_threshold(&[], 0.95).is_err());
    }

    #[test]
    fn verdict_uses_strict_less() {
        let v = DetectorVerdict::new(0.99, 0.5);
        assert!(!v.is_ood);
        let v = DetectorVerdict::new(0.5, 0.5);
        assert!(!v.is_ood, "score == threshold counts as in-distribution");
        let v = DetectorVerdict::new(0.49, 0.5);
        assert!(v.is_ood);
    }

    #[test]
    fn raising_score_never_flips_in_to_out() {
        let thr = 0.6;
        let mut last_ood = true;
        for i in 0..100 {
            let v = DetectorVerdict::new(i as f64 / 100.0, thr);
            if !last_ood {
                assert!(!v.is_ood);
            }
            last_ood = v.is_ood;
        }
    }

    #[test]
    fn high_confidence_adversarial_bypasses_by_construction() {
        // The formal core: confidence > threshold implies an in-distribution
        // verdict, because the baseline score is that same max confidence.
        let target_confidence = 0.99;
        let threshold = 0.9;
        let v = DetectorVerdict::new(target_confidence, threshold);
        assert!(!v.is_ood);
    }

    #[test]
    fn auroc_separates_and_ties() {
        assert_eq!(auroc(&[0.9, 0.8], &[0.1, 0.2]), 1.0);
        assert_eq!(auroc(&[0.1], &[0.9]), 0.0);
        assert_eq!(auroc(&[0.5], &[0.5]), 0.5);
    }
}
