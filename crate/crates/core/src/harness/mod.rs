//! Synthetic data, training, evaluation and ablation plumbing.

pub mod ablation;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod io;
pub mod model;
pub mod optim;
pub mod suite;
pub mod train;
