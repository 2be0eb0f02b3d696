//! Channel correlation loss (CC-Loss) for image classification.
//!
//! A channel-attention classifier head whose attention vectors are pulled
//! together within a class and pushed apart across classes by a batch-level
//! distance ratio, trained with a small reverse-mode autodiff core.

pub mod ccloss;
pub mod cli;
pub mod data;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;
