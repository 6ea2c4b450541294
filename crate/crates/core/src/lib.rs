//! Augmented in-context learning for Gaussian-mixture classification.
//!
//! A four-layer transformer is built by hand so that its chain-of-thought
//! rollout performs EM over the unlabeled part of the prompt. The crate also
//! provides the reference EM it is checked against, a teacher-forcing
//! trainer for the first-layer matrix, and an experiment runner.

pub mod attention;
pub mod bench;
pub mod em;
pub mod error;
pub mod numeric;
pub mod prompt;
pub mod rng;
pub mod task;
pub mod trainer;

pub use error::{Error, Result};
