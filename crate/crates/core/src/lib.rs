//! Collaborative discrepancy optimization for unsupervised anomaly
//! localization.
//!
//! A frozen pretrained *expert* and a randomly initialized *apprentice* share
//! an architecture. The apprentice is trained on normal images with synthetic
//! square perturbations so that its features agree with the expert on normal
//! pixels and disagree on perturbed ones. At test time the per-pixel feature
//! discrepancy is the anomaly score.

pub mod dataset;
pub mod digest;
pub mod error;
pub mod features;
pub mod loss;
pub mod metrics;
pub mod perturbation;
pub mod report;
pub mod rng;
pub mod scoring;
pub mod trainer;

pub use error::{Error, Result};
