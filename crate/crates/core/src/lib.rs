//! Federated learning with mixed-precision quantization-aware training.
//!
//! Clients train fixed-point models whose weights are stored as packed bit
//! planes, promote bit-level sparsity with a group Lasso penalty on the
//! planes, and drop sparse most-significant planes after local training.
//! The server de-quantizes the uploads, aggregates them into a
//! full-precision model plus a fractional per-layer bit-width vector, and
//! reallocates bit-widths per client budget with a greedy pruning-growing
//! pass before re-quantizing the model for each client.
//!
//! Module map:
//!
//! * [`quant`] - bit-plane layers, quantize/dequantize, shift-add products,
//!   plane densities, MSB pruning, activation quantization.
//! * [`ste`] - straight-through gradients and power-of-two fixed-point updates.
//! * [`nn`] / [`trainer`] - the small networks and the local update loop.
//! * [`server`] - aggregation and pruning-growing bit reallocation.
//! * [`sim`] - data partitioning, client sampling and the round loop.
//! * [`checkpoint`] - the binary layer record format.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod metrics;
pub mod nn;
pub mod partition;
pub mod quant;
pub mod rng;
pub mod server;
pub mod sim;
pub mod ste;
pub mod trainer;

pub use error::{Error, Result};
pub use exec::Execution;
pub use quant::{QuantizedLayer, ScalePolicy};
