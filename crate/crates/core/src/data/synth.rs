//! Synthetic dataset generators.
//!
//! Gaussian-noise images stand in for noise OOD data; a fixed procedural
//! family of geometric glyphs provides labeled sets whose class lists can be
//! chosen disjointly, so one family yields both in-distribution data and
//! semantically distinct OOD data.

use crate::autodiff::Tensor;
use crate::data::{LabeledDataset, UnlabeledDataset};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Gaussian-noise OOD images: per-pixel N(mean, stddev^2) on the [0,255]
/// scale, clipped to [0,255], then divided by 255. Defaults mean=127,
/// stddev=50, count=10_000.
pub fn gen_gaussian_noise_ood(
    count: usize,
    shape: &[usize],
    mean: f64,
    stddev: f64,
    seed: u64,
) -> Result<UnlabeledDataset> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    if stddev <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "stddev must be positive, got {stddev}"
        )));
    }
    let mut rng = SeededRng::new(seed);
    let numel: usize = shape.iter().product();
    let mut images = Vec::with_capacity(count);
    for _ in 0..count {
        let data: Vec<f64> = (0..numel)
            .map(|_| rng.gaussian_with(mean, stddev).clamp(0.0, 255.0) / 255.0)
            .collect();
        images.push(Tensor::new(shape.to_vec(), data)?);
    }
    UnlabeledDataset::new(images, "gaussian-noise")
}

/// The fixed procedural glyph family. In/out class lists are drawn from this
/// enum; disjointness between paired sets is checked at generation time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeClass {
    HBar,
    VBar,
    Cross,
    Ring,
    Disc,
    SquareOutline,
    FilledSquare,
    DiagMain,
    DiagAnti,
    Frame,
    XCross,
    Checker,
}

pub const ALL_SHAPE_CLASSES: [ShapeClass; 12] = [
    ShapeClass::HBar,
    ShapeClass::VBar,
    ShapeClass::Cross,
    ShapeClass::Ring,
    ShapeClass::Disc,
    ShapeClass::SquareOutline,
    ShapeClass::FilledSquare,
    ShapeClass::DiagMain,
    ShapeClass::DiagAnti,
    ShapeClass::Frame,
    ShapeClass::XCross,
    ShapeClass::Checker,
];

impl ShapeClass {
    pub fn name(&self) -> &'static str {
        match self {
            ShapeClass::HBar => "hbar",
            ShapeClass::VBar => "vbar",
            ShapeClass::Cross => "cross",
            ShapeClass::Ring => "ring",
            ShapeClass::Disc => "disc",
            ShapeClass::SquareOutline => "square-outline",
            ShapeClass::FilledSquare => "filled-square",
            ShapeClass::DiagMain => "diag-main",
            ShapeClass::DiagAnti => "diag-anti",
            ShapeClass::Frame => "frame",
            ShapeClass::XCross => "xcross",
            ShapeClass::Checker => "checker",
        }
    }
}

/// Labeled glyph dataset. Labels index into `class_set`; generation is a pure
/// function of `(count, shape, class_set, seed)`.
pub fn gen_synthetic_shapes(
    count: usize,
    shape: &[usize],
    class_set: &[ShapeClass],
    seed: u64,
) -> Result<LabeledDataset> {
    if count == 0 {
        return Err(Error::InvalidArgument("count must be at least 1".into()));
    }
    if class_set.is_empty() {
        return Err(Error::InvalidArgument("class_set must be nonempty".into()));
    }
    if shape.len() != 2 || shape[0] < 12 || shape[1] < 12 {
        return Err(Error::InvalidShape {
            op: "gen_synthetic_shapes",
            shape: shape.to_vec(),
            reason: "expected [h, w] with h, w >= 12".into(),
        });
    }
    let mut rng = SeededRng::new(seed);
    let mut images = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % class_set.len();
        images.push(render_glyph(class_set[label], shape, &mut rng));
        labels.push(label);
    }
    let names = class_set.iter().map(|c| c.name().to_string()).collect();
    LabeledDataset::new(images, labels, names)
}

/// Paired in/out generation with disjointness enforced: the out set carries
/// no labels and shares no glyph class with the in set.
pub fn gen_shape_pair(
    in_count: usize,
    out_count: usize,
    shape: &[usize],
    in_set: &[ShapeClass],
    out_set: &[ShapeClass],
    seed: u64,
) -> Result<(LabeledDataset, UnlabeledDataset)> {
    for c in out_set {
        if in_set.contains(c) {
            return Err(Error::InvalidArgument(format!(
                "class {:?} requested in both the in-set and the out-set",
                c
            )));
        }
    }
    let in_data = gen_synthetic_shapes(in_count, shape, in_set, seed)?;
    // Salted so paired sets draw different streams under equal seeds.
    let out_labeled = gen_synthetic_shapes(out_count, shape, out_set, seed ^ 0x6f75_745f_7365_74)?;
    let out = UnlabeledDataset::new(out_labeled.images, "synthetic-shapes-ood")?;
    Ok((in_data, out))
}

fn render_glyph(class: ShapeClass, shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let (h, w) = (shape[0], shape[1]);
    let mut px = vec![0.0f64; h * w];

    // Low-amplitude background so images are not exactly sparse.
    for p in px.iter_mut() {
        *p = rng.uniform() * 0.08;
    }

    let intensity = rng.uniform_in(0.75, 1.0);
    let thickness = 2 + rng.below(2); // 2..=3
    let jitter = |rng: &mut SeededRng, span: usize| -> isize {
        rng.below(span * 2 + 1) as isize - span as isize
    };
    let cx = (w / 2) as isize + jitter(rng, w / 8);
    let cy = (h / 2) as isize + jitter(rng, h / 8);

    let put = |px: &mut Vec<f64>, x: isize, y: isize| {
        if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
            px[y as usize * w + x as usize] = intensity;
        }
    };

    match class {
        ShapeClass::HBar => {
            for t in 0..thickness {
                for x in 2..w as isize - 2 {
                    put(&mut px, x, cy + t as isize);
                }
            }
        }
        ShapeClass::VBar => {
            for t in 0..thickness {
                for y in 2..h as isize - 2 {
                    put(&mut px, cx + t as isize, y);
                }
            }
        }
        ShapeClass::Cross => {
            for t in 0..thickness {
                for x in 2..w as isize - 2 {
                    put(&mut px, x, cy + t as isize);
                }
                for y in 2..h as isize - 2 {
                    put(&mut px, cx + t as isize, y);
                }
            }
        }
        ShapeClass::Ring => {
            let r = (h.min(w) as f64 / 2.0) * rng.uniform_in(0.5, 0.75);
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let d = (((x - cx) * (x - cx) + (y - cy) * (y - cy)) as f64).sqrt();
                    if (d - r).abs() <= thickness as f64 * 0.7 {
                        put(&mut px, x, y);
                    }
                }
            }
        }
        ShapeClass::Disc => {
            let r = (h.min(w) as f64 / 2.0) * rng.uniform_in(0.4, 0.6);
            for y in 0..h as isize {
                for x in 0..w as isize {
                    let d = (((x - cx) * (x - cx) + (y - cy) * (y - cy)) as f64).sqrt();
                    if d <= r {
                        put(&mut px, x, y);
                    }
                }
            }
        }
        ShapeClass::SquareOutline => {
            let half = (h.min(w) as isize / 2) * 2 / 3;
            for t in 0..thickness as isize {
                for x in (cx - half)..=(cx + half) {
                    put(&mut px, x, cy - half + t);
                    put(&mut px, x, cy + half - t);
                }
                for y in (cy - half)..=(cy + half) {
                    put(&mut px, cx - half + t, y);
                    put(&mut px, cx + half - t, y);
                }
            }
        }
        ShapeClass::FilledSquare => {
            let half = (h.min(w) as isize / 2) / 2 + 1;
            for y in (cy - half)..=(cy + half) {
                for x in (cx - half)..=(cx + half) {
                    put(&mut px, x, y);
                }
            }
        }
        ShapeClass::DiagMain => {
            let off = jitter(rng, w / 6);
            for d in 0..h.max(w) as isize {
                for t in 0..thickness as isize {
                    put(&mut px, d + off + t, d);
                }
            }
        }
        ShapeClass::DiagAnti => {
            let off = jitter(rng, w / 6);
            for d in 0..h.max(w) as isize {
                for t in 0..thickness as isize {
                    put(&mut px, w as isize - 1 - d + off + t, d);
                }
            }
        }
        ShapeClass::Frame => {
            let margin = 1 + rng.below(3) as isize;
            for t in 0..thickness as isize {
                for x in margin..w as isize - margin {
                    put(&mut px, x, margin + t);
                    put(&mut px, x, h as isize - 1 - margin - t);
                }
                for y in margin..h as isize - margin {
                    put(&mut px, margin + t, y);
                    put(&mut px, w as isize - 1 - margin - t, y);
                }
            }
        }
        ShapeClass::XCross => {
            for d in 0..h.max(w) as isize {
                for t in 0..thickness as isize {
                    put(&mut px, d + t, d);
                    put(&mut px, w as isize - 1 - d + t, d);
                }
            }
        }
        ShapeClass::Checker => {
            let cell = 3 + rng.below(3); // 3..=5
            let phase = rng.below(2);
            for y in 0..h {
                for x in 0..w {
                    if ((x / cell) + (y / cell) + phase) % 2 == 0 {
                        px[y * w + x] = intensity;
                    }
                }
            }
        }
    }

    for p in px.iter_mut() {
        *p = p.clamp(0.0, 1.0);
    }
    Tensor::new(vec![h, w], px).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_count_is_an_error() {
        assert!(gen_synthetic_shapes(0, &[28, 28], &[ShapeClass::HBar], 1).is_err());
        assert!(gen_gaussian_noise_ood(0, &[28, 28], 127.0, 50.0, 1).is_err());
    }

    #[test]
    fn nonpositive_stddev_is_an_error() {
        assert!(gen_gaussian_noise_ood(10, &[28, 28], 127.0, 0.0, 1).is_err());
        assert!(gen_gaussian_noise_ood(10, &[28, 28], 127.0, -1.0, 1).is_err());
    }

    #[test]
    fn tiny_stddev_concentrates_at_mean() {
        let ds = gen_gaussian_noise_ood(5, &[8, 8], 127.0, 1e-9, 3).unwrap();
        for img in &ds.images {
            for &p in img.data() {
                assert!((p - 127.0 / 255.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn noise_sample_mean_within_three_sigma() {
        let ds = gen_gaussian_noise_ood(13, &[28, 28], 127.0, 50.0, 7).unwrap();
        let pixels: Vec<f64> = ds.images.iter().flat_map(|t| t.data().to_vec()).collect();
        let n = 10_000.min(pixels.len());
        let mean: f64 = pixels[..n].iter().sum::<f64>() / n as f64;
        // Clipping at [0,255] shifts the mean only negligibly at sigma=50.
        let tol = 3.0 * (50.0 / 255.0) / (n as f64).sqrt();
        assert!(
            (mean - 127.0 / 255.0).abs() < tol + 0.002,
            "mean {mean} outside tolerance {tol}"
        );
    }

    #[test]
    fn generators_are_seed_deterministic() {
        let a = gen_gaussian_noise_ood(4, &[8, 8], 127.0, 50.0, 99).unwrap();
        let b = gen_gaussian_noise_ood(4, &[8, 8], 127.0, 50.0, 99).unwrap();
        for (x, y) in a.images.iter().zip(b.images.iter()) {
            assert_eq!(x.data(), y.data());
        }
        let s1 = gen_synthetic_shapes(6, &[16, 16], &[ShapeClass::Ring, ShapeClass::HBar], 5)
            .unwrap();
        let s2 = gen_synthetic_shapes(6, &[16, 16], &[ShapeClass::Ring, ShapeClass::HBar], 5)
            .unwrap();
        for (x, y) in s1.images.iter().zip(s2.images.iter()) {
            assert_eq!(x.data(), y.data());
        }
        assert_eq!(s1.labels, s2.labels);
    }

    #[test]
    fn overlapping_pair_rejected_disjoint_accepted() {
        let err = gen_shape_pair(
            4,
            4,
            &[16, 16],
            &[ShapeClass::HBar, ShapeClass::Cross],
            &[ShapeClass::Cross],
            1,
        );
        assert!(err.is_err());
        let (ind, out) = gen_shape_pair(
            4,
            4,
            &[16, 16],
            &[ShapeClass::HBar, ShapeClass::Cross],
            &[ShapeClass::Ring],
            1,
        )
        .unwrap();
        assert_eq!(ind.len(), 4);
        assert_eq!(out.len(), 4);
    }

    #[test]
    fn all_pixels_in_unit_interval() {
        let ds = gen_synthetic_shapes(24, &[28, 28], &ALL_SHAPE_CLASSES, 11).unwrap();
        for img in &ds.images {
            assert!(img.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}
