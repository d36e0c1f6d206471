//! Quantized parallel restarted SGD, simulated.
//!
//! Workers run `K` local SGD steps between synchronizations and exchange
//! stochastically quantized updates, either around a ring all-reduce with
//! re-quantization at every hop or over a gossip graph with replica tracking.
//! Everything is deterministic given a seed: each random draw comes from a
//! stream keyed by who draws it and why.

pub mod algorithms;
pub mod bounds;
pub mod collectives;
pub mod objectives;
pub mod quant;
pub mod rng;
pub mod runner;
pub mod simnet;
pub mod topology;

pub(crate) mod linalg;
