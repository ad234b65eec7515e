//! Dataset ingestion and generation.
//!
//! Owns the in-distribution / out-of-distribution roles: labeled datasets for
//! training and evaluation, unlabeled datasets as OOD attack-start pools.
//! All images live in [0,1]; epsilons quoted on the [0,255] scale are divided
//! by 255 at the config boundary, never inside the loaders.

mod idx;
mod manifest;
mod pgm;
mod synth;

pub use idx::{load_idx_images, load_idx_labels, write_idx_images, write_idx_labels};
pub use manifest::{load_manifest, DatasetManifest, DatasetRole};
pub use pgm::{load_pgm, write_pgm};
pub use synth::{
    gen_gaussian_noise_ood, gen_shape_pair, gen_synthetic_shapes, ShapeClass, ALL_SHAPE_CLASSES,
};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// In-distribution dataset: images with class labels.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub label_names: Vec<String>,
}

impl LabeledDataset {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, label_names: Vec<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        for &l in &labels {
            if l >= label_names.len() {
                return Err(Error::LabelOutOfRange {
                    label: l,
                    num_classes: label_names.len(),
                });
            }
        }
        for img in &images {
            check_unit_range(img)?;
        }
        Ok(LabeledDataset {
            images,
            labels,
            label_names,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    /// First `n` items (dataset order).
    pub fn take(&self, n: usize) -> LabeledDataset {
        let n = n.min(self.len());
        LabeledDataset {
            images: self.images[..n].to_vec(),
            labels: self.labels[..n].to_vec(),
            label_names: self.label_names.clone(),
        }
    }

    /// Split at `n`: (first n, rest).
    pub fn split_at(&self, n: usize) -> (LabeledDataset, LabeledDataset) {
        let n = n.min(self.len());
        (
            LabeledDataset {
                images: self.images[..n].to_vec(),
                labels: self.labels[..n].to_vec(),
                label_names: self.label_names.clone(),
            },
            LabeledDataset {
                images: self.images[n..].to_vec(),
                labels: self.labels[n..].to_vec(),
                label_names: self.label_names.clone(),
            },
        )
    }
}

/// Out-of-distribution dataset: images only, no labels by construction.
#[derive(Clone, Debug)]
pub struct UnlabeledDataset {
    pub images: Vec<Tensor>,
    pub source_name: String,
}

impl UnlabeledDataset {
    pub fn new(images: Vec<Tensor>, source_name: impl Into<String>) -> Result<Self> {
        for img in &images {
            check_unit_range(img)?;
        }
        Ok(UnlabeledDataset {
            images,
            source_name: source_name.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn take(&self, n: usize) -> UnlabeledDataset {
        let n = n.min(self.len());
        UnlabeledDataset {
            images: self.images[..n].to_vec(),
            source_name: self.source_name.clone(),
        }
    }

    pub fn split_at(&self, n: usize) -> (UnlabeledDataset, UnlabeledDataset) {
        let n = n.min(self.len());
        (
            UnlabeledDataset {
                images: self.images[..n].to_vec(),
                source_name: self.source_name.clone(),
            },
            UnlabeledDataset {
                images: self.images[n..].to_vec(),
                source_name: format!("{}-holdout", self.source_name),
            },
        )
    }
}

fn check_unit_range(img: &Tensor) -> Result<()> {
    if img.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
        return Err(Error::InvalidArgument(
            "image pixel outside [0,1]".to_string(),
        ));
    }
    Ok(())
}
