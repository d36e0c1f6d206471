//! Bit accounting and a simulated clock.
//!
//! Compute time is a configured constant per local step, so simulated time
//! depends only on the configuration and the bits actually sent.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quant::{self, QuantizedBlock};

#[derive(Debug, Error, PartialEq)]
pub enum LinkError {
    #[error("bandwidth must be positive, got {0}")]
    Bandwidth(f64),
    #[error("latency must be nonnegative, got {0}")]
    Latency(f64),
    #[error("compute time must be nonnegative, got {0}")]
    Compute(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LinkModel {
    pub bandwidth_bps: f64,
    pub latency_s: f64,
    pub compute_per_step_s: f64,
}

impl Default for LinkModel {
    fn default() -> Self {
        LinkModel { bandwidth_bps: 100e6, latency_s: 0.0, compute_per_step_s: 1e-3 }
    }
}

impl LinkModel {
    pub fn new(bandwidth_bps: f64, latency_s: f64, compute_per_step_s: f64) -> Result<Self, LinkError> {
        let link = LinkModel { bandwidth_bps, latency_s, compute_per_step_s };
        link.validate()?;
        Ok(link)
    }

    pub fn from_mbps(mbps: f64, latency_ms: f64, compute_per_step_s: f64) -> Result<Self, LinkError> {
        Self::new(mbps * 1e6, latency_ms * 1e-3, compute_per_step_s)
    }

    pub fn validate(&self) -> Result<(), LinkError> {
        if !(self.bandwidth_bps > 0.0 && self.bandwidth_bps.is_finite()) {
            return Err(LinkError::Bandwidth(self.bandwidth_bps));
        }
        if !(self.latency_s >= 0.0 && self.latency_s.is_finite()) {
            return Err(LinkError::Latency(self.latency_s));
        }
        if !(self.compute_per_step_s >= 0.0 && self.compute_per_step_s.is_finite()) {
            return Err(LinkError::Compute(self.compute_per_step_s));
        }
        Ok(())
    }

    fn transfer(&self, bits: usize) -> f64 {
        bits as f64 / self.bandwidth_bps
    }
}

pub enum Payload<'a> {
    Raw(&'a [f64]),
    Quantized(&'a QuantizedBlock),
}

/// Raw vectors cost 32 bits per element; quantized blocks their exact
/// encoded length.
pub fn message_bits(payload: Payload<'_>) -> usize {
    match payload {
        Payload::Raw(v) => 32 * v.len(),
        Payload::Quantized(b) => quant::encoded_len(b),
    }
}

/// One all-reduce round: `K` local steps, then `2(M-1)` pipeline steps each
/// lasting one latency plus its largest concurrent message.
pub fn round_time_ar(local_steps: usize, step_max_bits: &[usize], link: &LinkModel) -> f64 {
    let comm: f64 = step_max_bits.iter().map(|&b| link.latency_s + link.transfer(b)).sum();
    local_steps as f64 * link.compute_per_step_s + comm
}

/// One gossip round: each worker pushes its message to `degree` neighbours
/// through a single egress link; workers send concurrently.
pub fn round_time_gossip(local_steps: usize, degree: usize, max_edge_bits: usize, link: &LinkModel) -> f64 {
    let compute = local_steps as f64 * link.compute_per_step_s;
    if degree == 0 {
        return compute;
    }
    compute + link.latency_s + link.transfer(degree * max_edge_bits)
}

/// Running totals across rounds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Clock {
    pub bits: u64,
    pub seconds: f64,
}

impl Clock {
    pub fn advance(&mut self, bits: u64, seconds: f64) {
        self.bits += bits;
        self.seconds += seconds;
    }
}
