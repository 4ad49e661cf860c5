//! Desk-scale adversarial training laboratory.
//!
//! The crate trains small dual-branch convolutional classifiers against
//! gradient attacks and instruments the run: gradient conflict between loss
//! terms, feature distances, batch-norm statistic drift, and representation
//! similarity. Everything is deterministic given a seed; two runs with the
//! same config produce byte-identical checkpoints and metrics.

pub mod attacks;
pub mod cli;
pub mod data;
pub mod diagnostics;
pub mod losses;
pub mod nn;
pub mod tensor;
pub mod trainer;
