//! Small classifiers: architectures, inference, and evaluation.
//!
//! A classifier maps image tensors to logits (phi); confidences are
//! softmax(phi) and the predicted class is the argmax with lowest index
//! winning ties. Parameters are mutated only by the training loops; all
//! inference paths treat the model as read-only.

mod checkpoint;
mod train;

pub use checkpoint::{read_container, write_container, Container};
pub use train::{train_classifier, Optimizer, OptimizerKind, TrainConfig, TrainReport};

pub(crate) use train::{batch_plan, forward_with_params};

use crate::autodiff::{argmax, Tape, Tensor, Var};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Reference architectures. The attack math is architecture-agnostic; these
/// are deliberately small.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Arch {
    /// Two dense layers with a relu between them.
    Mlp2 { input_dim: usize, hidden: usize },
    /// conv(8,3x3)-relu-pool-conv(16,3x3)-relu-pool-dense.
    CnnS {
        in_channels: usize,
        height: usize,
        width: usize,
    },
}

impl Arch {
    pub fn id(&self) -> &'static str {
        match self {
            Arch::Mlp2 { .. } => "mlp2",
            Arch::CnnS { .. } => "cnn-s",
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Arch::Mlp2 { input_dim, .. } => vec![*input_dim],
            Arch::CnnS {
                in_channels,
                height,
                width,
            } => vec![*in_channels, *height, *width],
        }
    }

    fn param_shapes(&self, num_classes: usize) -> Vec<(String, Vec<usize>)> {
        match self {
            Arch::Mlp2 { input_dim, hidden } => vec![
                ("w1".into(), vec![*input_dim, *hidden]),
                ("b1".into(), vec![*hidden]),
                ("w2".into(), vec![*hidden, num_classes]),
                ("b2".into(), vec![num_classes]),
            ],
            Arch::CnnS {
                in_channels,
                height,
                width,
            } => {
                let flat = 16 * (height / 4) * (width / 4);
                vec![
                    ("conv1_w".into(), vec![8, *in_channels, 3, 3]),
                    ("conv1_b".into(), vec![8]),
                    ("conv2_w".into(), vec![16, 8, 3, 3]),
                    ("conv2_b".into(), vec![16]),
                    ("fc_w".into(), vec![flat, num_classes]),
                    ("fc_b".into(), vec![num_classes]),
                ]
            }
        }
    }

    fn dims(&self) -> Vec<u32> {
        match self {
            Arch::Mlp2 { input_dim, hidden } => vec![*input_dim as u32, *hidden as u32],
            Arch::CnnS {
                in_channels,
                height,
                width,
            } => vec![*in_channels as u32, *height as u32, *width as u32],
        }
    }

    fn from_id(id: &str, dims: &[u32]) -> Result<Arch> {
        match (id, dims) {
            ("mlp2", [d, h]) => Ok(Arch::Mlp2 {
                input_dim: *d as usize,
                hidden: *h as usize,
            }),
            ("cnn-s", [c, h, w]) => Ok(Arch::CnnS {
                in_channels: *c as usize,
                height: *h as usize,
                width: *w as usize,
            }),
            _ => Err(Error::InvalidArgument(format!(
                "unknown architecture {id:?} with dims {dims:?}"
            ))),
        }
    }
}

/// Parameterized differentiable map from images to logits.
#[derive(Clone, Debug)]
pub struct Classifier {
    arch: Arch,
    num_classes: usize,
    label_names: Vec<String>,
    params: Vec<(String, Tensor)>,
    /// Names of OOD sources mapped to trailing background classes, in class
    /// order. Empty for plain classifiers.
    background_sources: Vec<String>,
}

impl Classifier {
    /// Fresh model with uniform(-sqrt(1/fan_in), +sqrt(1/fan_in)) init.
    pub fn new(arch: Arch, label_names: Vec<String>, seed: u64) -> Result<Self> {
        if label_names.is_empty() {
            return Err(Error::InvalidArgument("need at least one class".into()));
        }
        if let Arch::CnnS { height, width, .. } = arch {
            if height % 4 != 0 || width % 4 != 0 {
                return Err(Error::InvalidShape {
                    op: "cnn-s",
                    shape: vec![height, width],
                    reason: "height and width must be divisible by 4".into(),
                });
            }
        }
        let num_classes = label_names.len();
        let mut rng = SeededRng::new(seed);
        let mut params = Vec::new();
        for (name, shape) in arch.param_shapes(num_classes) {
            let fan_in = fan_in_of(&name, &shape);
            let bound = (1.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..shape.iter().product())
                .map(|_| rng.uniform_in(-bound, bound))
                .collect();
            params.push((name, Tensor::new(shape, data)?));
        }
        Ok(Classifier {
            arch,
            num_classes,
            label_names,
            params,
            background_sources: Vec::new(),
        })
    }

    /// Copy of this model with `sources.len()` background classes appended.
    /// The new output classes sit at indices C, C+1, ... in source order.
    pub fn with_background_classes(&self, sources: &[String], seed: u64) -> Result<Classifier> {
        let mut names = self.label_names.clone();
        for s in sources {
            names.push(format!("background-{s}"));
        }
        let mut fresh = Classifier::new(self.arch.clone(), names, seed)?;
        fresh.background_sources = sources.to_vec();
        Ok(fresh)
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn label_names(&self) -> &[String] {
        &self.label_names
    }

    pub fn input_shape(&self) -> Vec<usize> {
        self.arch.input_shape()
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [(String, Tensor)] {
        &mut self.params
    }

    pub fn background_sources(&self) -> &[String] {
        &self.background_sources
    }

    /// Indices of the background classes (empty for plain classifiers).
    pub fn background_indices(&self) -> Vec<usize> {
        let c = self.num_classes - self.background_sources.len();
        (c..self.num_classes).collect()
    }

    /// Stack per-example images into a [n, ...input_shape] batch. Accepts
    /// images of any shape with the right element count.
    pub fn batch_from_images(&self, images: &[Tensor]) -> Result<Tensor> {
        let ishape = self.input_shape();
        let per: usize = ishape.iter().product();
        let mut data = Vec::with_capacity(images.len() * per);
        for img in images {
            if img.numel() != per {
                return Err(Error::ShapeMismatch {
                    op: "batch_from_images",
                    lhs: img.shape().to_vec(),
                    rhs: ishape.clone(),
                });
            }
            data.extend_from_slice(img.data());
        }
        let mut shape = vec![images.len()];
        shape.extend_from_slice(&ishape);
        Tensor::new(shape, data)
    }

    /// Forward pass on a registered batch variable shaped [n, ...input_shape].
    /// Returns the [n, num_classes] logits variable.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let shape = tape.value(x).shape().to_vec();
        let ishape = self.input_shape();
        if shape.len() != ishape.len() + 1 || shape[1..] != ishape[..] {
            return Err(Error::ShapeMismatch {
                op: "forward",
                lhs: shape,
                rhs: ishape,
            });
        }
        let n = shape[0];
        let mut p = std::collections::HashMap::new();
        for (name, t) in &self.params {
            p.insert(name.as_str(), tape.input(t));
        }
        match &self.arch {
            Arch::Mlp2 { hidden: _, .. } => {
                let h = tape.matmul(x, p["w1"])?;
                let h = tape.add_row_vec(h, p["b1"])?;
                let h = tape.relu(h);
                let out = tape.matmul(h, p["w2"])?;
                tape.add_row_vec(out, p["b2"])
            }
            Arch::CnnS { height, width, .. } => {
                let h = tape.conv2d(x, p["conv1_w"], Some(p["conv1_b"]), 1)?;
                let h = tape.relu(h);
                let h = tape.max_pool2(h)?;
                let h = tape.conv2d(h, p["conv2_w"], Some(p["conv2_b"]), 1)?;
                let h = tape.relu(h);
                let h = tape.max_pool2(h)?;
                let flat = 16 * (height / 4) * (width / 4);
                let h = tape.reshape(h, vec![n, flat])?;
                let out = tape.matmul(h, p["fc_w"])?;
                tape.add_row_vec(out, p["fc_b"])
            }
        }
    }

    /// Logits phi(x) for a single image or a batch; output [c] or [n,c].
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let single = self.is_single(x)?;
        let imgs = [x.clone()];
        let batch = if single {
            self.batch_from_images(&imgs)?
        } else {
            x.clone()
        };
        let mut tape = Tape::new();
        let xv = tape.constant(&batch);
        let out = self.forward(&mut tape, xv)?;
        let t = tape.value(out);
        if single {
            t.reshaped(vec![self.num_classes])
        } else {
            Ok(t.clone())
        }
    }

    /// Confidence vector g(x) = softmax(phi(x)) for a single image.
    pub fn confidences(&self, x: &Tensor) -> Result<Vec<f64>> {
        let logits = self.logits(x)?;
        Ok(softmax_slice(logits.data()))
    }

    /// Predicted class and its confidence; lowest index wins ties.
    pub fn predict(&self, x: &Tensor) -> Result<(usize, f64)> {
        let g = self.confidences(x)?;
        let cls = argmax(&g);
        Ok((cls, g[cls]))
    }

    /// Batched confidences for many images; one row per image.
    pub fn confidences_batch(&self, images: &[Tensor]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(256) {
            let batch = self.batch_from_images(chunk)?;
            let mut tape = Tape::new();
            let xv = tape.constant(&batch);
            let logits = self.forward(&mut tape, xv)?;
            for row in tape.value(logits).data().chunks(self.num_classes) {
                out.push(softmax_slice(row));
            }
        }
        Ok(out)
    }

    fn is_single(&self, x: &Tensor) -> Result<bool> {
        let ishape = self.input_shape();
        let per: usize = ishape.iter().product();
        if x.numel() == per {
            return Ok(true);
        }
        if x.shape().len() == ishape.len() + 1 && x.shape()[1..] == ishape[..] {
            return Ok(false);
        }
        Err(Error::ShapeMismatch {
            op: "logits",
            lhs: x.shape().to_vec(),
            rhs: ishape,
        })
    }
}

/// Accuracy and mean confidence on correctly classified items.
#[derive(Clone, Copy, Debug)]
pub struct EvalStats {
    /// Percent of items whose prediction matches the label.
    pub accuracy: f64,
    /// Mean predicted-label confidence over correctly classified items;
    /// 0 when nothing was classified correctly (see `confidence_defined`).
    pub mean_confidence: f64,
    pub confidence_defined: bool,
}

/// Evaluate accuracy and mean confidence over a labeled dataset.
pub fn evaluate_model(model: &Classifier, dataset: &LabeledDataset) -> Result<EvalStats> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let conf = model.confidences_batch(&dataset.images)?;
    let mut correct = 0usize;
    let mut conf_sum = 0.0;
    for (g, &label) in conf.iter().zip(dataset.labels.iter()) {
        let pred = argmax(g);
        if pred == label {
            correct += 1;
            conf_sum += g[pred];
        }
    }
    let defined = correct > 0;
    Ok(EvalStats {
        accuracy: 100.0 * correct as f64 / dataset.len() as f64,
        mean_confidence: if defined {
            conf_sum / correct as f64
        } else {
            0.0
        },
        confidence_defined: defined,
    })
}

pub(crate) fn softmax_slice(logits: &[f64]) -> Vec<f64> {
    let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn fan_in_of(name: &str, shape: &[usize]) -> usize {
    if name.ends_with("_b") || name.starts_with('b') {
        // Biases: fan-in of the layer they belong to; for simplicity use the
        // output width, which keeps them small.
        return shape[0].max(1);
    }
    match shape.len() {
        2 => shape[0],
        4 => shape[1] * shape[2] * shape[3],
        _ => shape.iter().product::<usize>().max(1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_shapes, ShapeClass};

    fn toy_mlp(seed: u64) -> Classifier {
        Classifier::new(
            Arch::Mlp2 {
                input_dim: 4,
                hidden: 6,
            },
            vec!["a".into(), "b".into(), "c".into()],
            seed,
        )
        .unwrap()
    }

    #[test]
    fn zeroed_final_layer_gives_zero_logits() {
        let mut m = toy_mlp(1);
        for (name, t) in m.params_mut() {
            if name == "w2" || name == "b2" {
                for v in t.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let x = Tensor::from_vec(vec![0.3, -0.2, 0.5, 0.9]);
        let l = m.logits(&x).unwrap();
        assert_eq!(l.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn batch_logits_have_batch_shape() {
        let m = toy_mlp(2);
        let imgs: Vec<Tensor> = (0..5)
            .map(|i| Tensor::from_vec(vec![i as f64 * 0.1; 4]))
            .collect();
        let batch = m.batch_from_images(&imgs).unwrap();
        let l = m.logits(&batch).unwrap();
        assert_eq!(l.shape(), &[5, 3]);
    }

    #[test]
    fn logits_are_bit_reproducible() {
        let x = Tensor::from_vec(vec![0.1, 0.9, 0.4, 0.2]);
        let a = toy_mlp(7).logits(&x).unwrap();
        let b = toy_mlp(7).logits(&x).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn predict_follows_softmax_argmax() {
        let mut m = toy_mlp(3);
        // Make the network an identity-ish map onto fixed logits by zeroing
        // everything and setting biases.
        for (name, t) in m.params_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
            if name == "b2" {
                t.data_mut().copy_from_slice(&[0.1, 2.0, -1.0]);
            }
        }
        let (cls, conf) = m.predict(&Tensor::from_vec(vec![0.0; 4])).unwrap();
        assert_eq!(cls, 1);
        let g = softmax_slice(&[0.1, 2.0, -1.0]);
        assert!((conf - g[1]).abs() < 1e-12);
        assert!((conf - 0.8338).abs() < 1e-4);
    }

    #[test]
    fn equal_logits_tie_to_lowest_index() {
        let mut m = Classifier::new(
            Arch::Mlp2 {
                input_dim: 2,
                hidden: 3,
            },
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            4,
        )
        .unwrap();
        for (_, t) in m.params_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
        let (cls, conf) = m.predict(&Tensor::from_vec(vec![0.5, 0.5])).unwrap();
        assert_eq!(cls, 0);
        assert!((conf - 0.25).abs() < 1e-12);
    }

    #[test]
    fn predict_invariant_to_constant_logit_shift() {
        let m = toy_mlp(5);
        let x = Tensor::from_vec(vec![0.2, 0.4, 0.6, 0.8]);
        let logits = m.logits(&x).unwrap();
        let g0 = softmax_slice(logits.data());
        let shifted: Vec<f64> = logits.data().iter().map(|v| v + 13.5).collect();
        let g1 = softmax_slice(&shifted);
        assert_eq!(argmax(&g0), argmax(&g1));
    }

    #[test]
    fn predict_matches_brute_force_argmax_on_trained_model() {
        let data = gen_synthetic_shapes(60, &[12, 12], &[ShapeClass::HBar, ShapeClass::VBar], 9)
            .unwrap();
        let mut m = Classifier::new(
            Arch::Mlp2 {
                input_dim: 144,
                hidden: 16,
            },
            data.label_names.clone(),
            10,
        )
        .unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            ..TrainConfig::default()
        };
        train_classifier(&mut m, &data, &cfg).unwrap();
        for img in data.images.iter().take(10) {
            let (cls, conf) = m.predict(img).unwrap();
            let g = m.confidences(img).unwrap();
            let brute = g
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap().then(b.0.cmp(&a.0)))
                .unwrap();
            assert_eq!(cls, brute.0);
            assert!((conf - g[brute.0]).abs() < 1e-15);
        }
    }

    #[test]
    fn confidences_form_distribution() {
        let m = toy_mlp(8);
        let g = m.confidences(&Tensor::from_vec(vec![5.0, -3.0, 2.0, 0.0])).unwrap();
        let sum: f64 = g.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert!(g.iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn evaluate_model_conventions() {
        let data = gen_synthetic_shapes(20, &[12, 12], &[ShapeClass::HBar, ShapeClass::VBar], 9)
            .unwrap();
        let m = Classifier::new(
            Arch::Mlp2 {
                input_dim: 144,
                hidden: 8,
            },
            data.label_names.clone(),
            10,
        )
        .unwrap();
        let stats = evaluate_model(&m, &data).unwrap();
        assert!((0.0..=100.0).contains(&stats.accuracy));
        let empty = LabeledDataset::new(vec![], vec![], data.label_names.clone()).unwrap();
        assert!(evaluate_model(&m, &empty).is_err());
    }

    #[test]
    fn zero_correct_reports_flagged_zero_confidence() {
        let shapes = gen_synthetic_shapes(10, &[12, 12], &[ShapeClass::HBar, ShapeClass::VBar], 2)
            .unwrap();
        let mut m = Classifier::new(
            Arch::Mlp2 {
                input_dim: 144,
                hidden: 4,
            },
            shapes.label_names.clone(),
            1,
        )
        .unwrap();
        // Force class 0 always, then mislabel everything as class 1.
        for (name, t) in m.params_mut() {
            for v in t.data_mut() {
                *v = 0.0;
            }
            if name == "b2" {
                t.data_mut()[0] = 10.0;
            }
        }
        let wrong = LabeledDataset::new(
            shapes.images.clone(),
            vec![1; shapes.len()],
            shapes.label_names.clone(),
        )
        .unwrap();
        let stats = evaluate_model(&m, &wrong).unwrap();
        assert_eq!(stats.accuracy, 0.0);
        assert_eq!(stats.mean_confidence, 0.0);
        assert!(!stats.confidence_defined);
    }
}
