//! Feature squeezing: input-coarsening transforms plus output comparison.
//!
//! The squeezer set follows the joint recommendation: bit depth reduction,
//! median filtering, and a smoothing squeezer. Non-local smoothing is
//! replaced by a 3x3 sigma=1 Gaussian blur ("smoothing-simplified"); the
//! joint-squeezer structure is unchanged.

use crate::advdet::AdvVerdict;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::Classifier;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SqueezerKind {
    BitDepth,
    Median,
    Smoothing,
}

/// Enabled squeezers and their parameters. All squeezers map [0,1] into
/// [0,1] and are deterministic.
#[derive(Clone, Debug)]
pub struct SqueezerConfig {
    /// Bit depth n in [1,8].
    pub bit_depth: u32,
    /// Median window size, odd and >= 1.
    pub median_kernel: usize,
    pub enabled: Vec<SqueezerKind>,
}

impl SqueezerConfig {
    /// Defaults for binary-ish 28x28 images: 1-bit depth plus 3x3 median
    /// and the smoothing squeezer.
    pub fn mnist_scale() -> Self {
        SqueezerConfig {
            bit_depth: 1,
            median_kernel: 3,
            enabled: vec![
                SqueezerKind::BitDepth,
                SqueezerKind::Median,
                SqueezerKind::Smoothing,
            ],
        }
    }

    /// Defaults for natural-image scale: 5-bit depth.
    pub fn cifar_scale() -> Self {
        SqueezerConfig {
            bit_depth: 5,
            ..SqueezerConfig::mnist_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=8).contains(&self.bit_depth) {
            return Err(Error::InvalidConfig(format!(
                "bit_depth {} outside [1,8]",
                self.bit_depth
            )));
        }
        if self.median_kernel % 2 == 0 || self.median_kernel == 0 {
            return Err(Error::InvalidConfig(format!(
                "median_kernel {} must be odd and >= 1",
                self.median_kernel
            )));
        }
        Ok(())
    }

    /// Apply one squeezer kind to an image.
    pub fn apply(&self, kind: SqueezerKind, x: &Tensor) -> Result<Tensor> {
        match kind {
            SqueezerKind::BitDepth => Ok(bit_depth_reduce(x, self.bit_depth)),
            SqueezerKind::Median => median_filter(x, self.median_kernel),
            SqueezerKind::Smoothing => gaussian_blur3(x),
        }
    }
}

/// Quantize to n bits: round(x * (2^n - 1)) / (2^n - 1), half-up rounding.
/// Output values lie on the lattice {i / (2^n - 1)}.
pub fn bit_depth_reduce(x: &Tensor, n: u32) -> Tensor {
    debug_assert!((1..=8).contains(&n));
    let levels = (2u32.pow(n) - 1) as f64;
    x.map(|v| (v * levels + 0.5).floor() / levels)
}

/// Per-pixel median over a k x k window with mirror padding (the border
/// pixel itself is not duplicated). k must be odd.
pub fn median_filter(x: &Tensor, k: usize) -> Result<Tensor> {
    if k % 2 == 0 || k == 0 {
        return Err(Error::InvalidArgument(format!(
            "median kernel {k} must be odd and >= 1"
        )));
    }
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            op: "median_filter",
            shape: shape.to_vec(),
            reason: "expected [h, w]".into(),
        });
    }
    let (h, w) = (shape[0], shape[1]);
    let half = (k / 2) as isize;
    let data = x.data();
    let mut out = vec![0.0; h * w];
    let mut window = Vec::with_capacity(k * k);
    for y in 0..h as isize {
        for xx in 0..w as isize {
            window.clear();
            for dy in -half..=half {
                for dx in -half..=half {
                    let sy = reflect_index(y + dy, h);
                    let sx = reflect_index(xx + dx, w);
                    window.push(data[sy * w + sx]);
                }
            }
            window.sort_by(|a, b| a.partial_cmp(b).unwrap());
            out[y as usize * w + xx as usize] = window[window.len() / 2];
        }
    }
    Tensor::new(vec![h, w], out)
}

/// 3x3 Gaussian blur with sigma = 1 and mirror padding.
pub fn gaussian_blur3(x: &Tensor) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 2 {
        return Err(Error::InvalidShape {
            op: "gaussian_blur3",
            shape: shape.to_vec(),
            reason: "expected [h, w]".into(),
        });
    }
    let (h, w) = (shape[0], shape[1]);
    // 1-D weights [e^-1/2, 1, e^-1/2], normalized over the 2-D product.
    let a = (-0.5f64).exp();
    let k1 = [a, 1.0, a];
    let norm: f64 = k1.iter().map(|u| k1.iter().map(|v| u * v).sum::<f64>()).sum();
    let data = x.data();
    let mut out = vec![0.0; h * w];
    for y in 0..h as isize {
        for xx in 0..w as isize {
            let mut acc = 0.0;
            for (dy, ky) in (-1..=1).zip(k1.iter()) {
                for (dx, kx) in (-1..=1).zip(k1.iter()) {
                    let sy = reflect_index(y + dy, h);
                    let sx = reflect_index(xx + dx, w);
                    acc += ky * kx * data[sy * w + sx];
                }
            }
            out[y as usize * w + xx as usize] = acc / norm;
        }
    }
    Tensor::new(vec![h, w], out)
}

fn reflect_index(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut i = i;
    // Mirror without repeating the edge: -1 -> 1, n -> n-2.
    while i < 0 || i >= n {
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * n - 2 - i;
        }
    }
    i as usize
}

/// Feature-squeezing score: max over enabled squeezers of the L1 distance
/// between g(x) and g(squeeze(x)). Bounded by 2 on the simplex.
pub fn fs_score(model: &Classifier, x: &Tensor, cfg: &SqueezerConfig) -> Result<f64> {
    cfg.validate()?;
    let g = model.confidences(x)?;
    let mut score: f64 = 0.0;
    for &kind in &cfg.enabled {
        let squeezed = cfg.apply(kind, x)?;
        let gs = model.confidences(&squeezed)?;
        let l1: f64 = g.iter().zip(&gs).map(|(a, b)| (a - b).abs()).sum();
        score = score.max(l1);
    }
    Ok(score)
}

/// Feature-squeezing verdict; high score means adversarial.
pub fn fs_detect(
    model: &Classifier,
    x: &Tensor,
    cfg: &SqueezerConfig,
    threshold: f64,
) -> Result<AdvVerdict> {
    Ok(AdvVerdict::new(fs_score(model, x, cfg)?, threshold))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn one_bit_depth_rounds_half_up() {
        let x = Tensor::from_vec(vec![0.4, 0.6, 0.5]);
        let y = bit_depth_reduce(&x, 1);
        assert_eq!(y.data(), &[0.0, 1.0, 1.0]);
    }

    #[test]
    fn eight_bit_depth_fixes_quantized_input() {
        let x = Tensor::from_vec((0..=255).map(|i| i as f64 / 255.0).collect());
        let y = bit_depth_reduce(&x, 8);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn outputs_lie_on_lattice() {
        let mut rng = SeededRng::new(2);
        for n in 1..=8u32 {
            let x = Tensor::from_vec((0..64).map(|_| rng.uniform()).collect());
            let y = bit_depth_reduce(&x, n);
            let levels = (2u32.pow(n) - 1) as f64;
            for &v in y.data() {
                let scaled = v * levels;
                assert!((scaled - scaled.round()).abs() < 1e-9);
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn median_of_constant_image_is_unchanged() {
        let x = Tensor::new(vec![5, 5], vec![0.7; 25]).unwrap();
        let y = median_filter(&x, 3).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn median_removes_single_impulse() {
        let mut data = vec![0.0; 25];
        data[12] = 1.0;
        let x = Tensor::new(vec![5, 5], data).unwrap();
        let y = median_filter(&x, 3).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn even_kernel_rejected() {
        let x = Tensor::new(vec![4, 4], vec![0.0; 16]).unwrap();
        assert!(median_filter(&x, 2).is_err());
    }

    #[test]
    fn median_matches_naive_counting_oracle() {
        let mut rng = SeededRng::new(9);
        for _ in 0..10 {
            let x = Tensor::new(vec![6, 6], (0..36).map(|_| rng.uniform()).collect()).unwrap();
            let y = median_filter(&x, 3).unwrap();
            // Oracle: the median m of a window with odd count satisfies
            // #(<= m) >= ceil(k/2) and #(>= m) >= ceil(k/2).
            for py in 0..6isize {
                for px in 0..6isize {
                    let mut window = Vec::new();
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            let sy = reflect_index(py + dy, 6);
                            let sx = reflect_index(px + dx, 6);
                            window.push(x.data()[sy * 6 + sx]);
                        }
                    }
                    let m = y.data()[py as usize * 6 + px as usize];
                    let le = window.iter().filter(|&&v| v <= m).count();
                    let ge = window.iter().filter(|&&v| v >= m).count();
                    assert!(window.contains(&m));
                    assert!(le >= 5 && ge >= 5, "le={le} ge={ge}");
                }
            }
        }
    }

    #[test]
    fn squeezers_preserve_unit_interval() {
        let mut rng = SeededRng::new(3);
        let x = Tensor::new(vec![8, 8], (0..64).map(|_| rng.uniform()).collect()).unwrap();
        let cfg = SqueezerConfig::mnist_scale();
        for kind in [SqueezerKind::BitDepth, SqueezerKind::Median, SqueezerKind::Smoothing] {
            let y = cfg.apply(kind, &x).unwrap();
            assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn blur_of_constant_image_is_unchanged() {
        let x = Tensor::new(vec![6, 6], vec![0.42; 36]).unwrap();
        let y = gaussian_blur3(&x).unwrap();
        for &v in y.data() {
            assert!((v - 0.42).abs() < 1e-12);
        }
    }
}
