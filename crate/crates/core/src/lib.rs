//! Behavioral simulation and co-design toolkit for analog integrate-and-fire
//! neurons that execute binarized neural networks.
//!
//! - [`neuron`]: capacitor charging, spike times, clock quantization, sizing.
//! - [`levels`]: MAC-level histograms, top-k level selection, clipping, decode.
//! - [`variation`]: current variation and the mapping-probability matrix.
//! - [`capmin_v`]: greedy spike-time merging for variation tolerance.
//! - [`bnn`]: binarized inference with sub-MAC tiling and error injection.
//! - [`data`] and [`train`]: datasets and a small straight-through trainer.

pub mod bnn;
pub mod capmin_v;
pub mod data;
pub mod error;
pub mod levels;
pub mod neuron;
pub mod seed;
pub mod train;
pub mod variation;

pub use error::{Error, Result};
