//! Learning toolkit for grasp quality prediction from depth images.
//!
//! Everything runs on the CPU with no external ML framework: a small
//! reverse-mode autodiff engine over dense tensors, a two-tower convolutional
//! network that scores (depth patch, gripper depth) pairs, a synthetic scene
//! generator with an exact geometric label oracle, deterministic data
//! augmentation, Adam training, and calibration/ablation evaluation tooling.
//!
//! Determinism is a design constraint throughout: given a seed, dataset
//! generation, augmentation, initialization and the f64 compute path are
//! reproducible bit for bit; the f32 path is reproducible run to run on the
//! same build.

pub mod augment;
pub mod check;
pub mod cli;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod optim;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};
