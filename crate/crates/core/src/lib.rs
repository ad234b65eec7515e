//! Desk-scale bench for open-world evasion attacks.
//!
//! Trains small image classifiers, generates in-distribution and
//! out-of-distribution adversarial examples under norm constraints,
//! evaluates OOD detectors, adversarial-example detectors, and robust
//! training defenses against them, and emits reproducible reports.

pub mod advdet;
pub mod attack;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod model;
pub mod ood;
pub mod rng;

pub use error::{Error, Result};
