//! Adversarial-example detectors deployed as input processing: feature
//! squeezing and the autoencoder-based MagNet detector/reformer.
//!
//! Verdict polarity here is opposite to OOD detection: high scores mean
//! adversarial. Thresholds are calibrated exclusively on benign data at a
//! target false-positive rate.

mod magnet;
mod squeeze;

pub use magnet::{
    magnet_detect, magnet_reform, magnet_train, Autoencoder, Magnet, MagnetTrainReport, ReconNorm,
};
pub use squeeze::{
    bit_depth_reduce, fs_detect, fs_score, gaussian_blur3, median_filter, SqueezerConfig,
    SqueezerKind,
};

/// Detector decision for the adversarial/benign polarity:
/// flagged as adversarial exactly when `score > threshold`.
#[derive(Clone, Copy, Debug)]
pub struct AdvVerdict {
    pub score: f64,
    pub threshold: f64,
    pub is_adversarial: bool,
}

impl AdvVerdict {
    pub fn new(score: f64, threshold: f64) -> Self {
        AdvVerdict {
            score,
            threshold,
            is_adversarial: score > threshold,
        }
    }
}

/// Smallest threshold with benign false-positive rate (fraction of benign
/// scores strictly above it) at most `fpr_target`.
pub fn calibrate_fpr_threshold(benign_scores: &[f64], fpr_target: f64) -> crate::Result<f64> {
    if benign_scores.is_empty() {
        return Err(crate::Error::InvalidArgument(
            "cannot calibrate on empty benign scores".into(),
        ));
    }
    if !(0.0..=1.0).contains(&fpr_target) {
        return Err(crate::Error::InvalidArgument(format!(
            "fpr_target {fpr_target} outside [0,1]"
        )));
    }
    let mut sorted = benign_scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let n = sorted.len();
    let allowed = (fpr_target * n as f64).floor() as usize;
    // With threshold = (allowed+1)-th largest score, at most `allowed`
    // benign scores are strictly above it.
    Ok(sorted[allowed.min(n - 1)])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn verdict_polarity() {
        assert!(AdvVerdict::new(0.6, 0.5).is_adversarial);
        assert!(!AdvVerdict::new(0.5, 0.5).is_adversarial);
        assert!(!AdvVerdict::new(0.4, 0.5).is_adversarial);
    }

    #[test]
    fn fpr_calibration_keeps_rate_at_or_below_target() {
        let scores: Vec<f64> = (0..100).map(|i| i as f64 / 100.0).collect();
        let thr = calibrate_fpr_threshold(&scores, 0.05).unwrap();
        let fpr = scores.iter().filter(|&&s| s > thr).count() as f64 / 100.0;
        assert!(fpr <= 0.05);
        assert!(fpr >= 0.03, "threshold too conservative: fpr {fpr}");
    }

    #[test]
    fn empty_scores_rejected() {
        assert!(calibrate_fpr_threshold(&[], 0.05).is_err());
    }
}
