//! Ring all-reduce with re-quantization at every reduce-scatter hop.
//!
//! Segment `j` starts at worker `j`, which quantizes its own slice and sends
//! it to worker `j - 1`. Each receiver decodes the bits, adds its slice and
//! quantizes the partial sum again. After `M - 1` hops worker `j + 1` holds
//! the final block, which then travels `M - 1` more hops verbatim
//! (all-gather), so every worker decodes the same bits.

use std::fmt::Write as _;
use std::ops::Range;

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::bounds;
use crate::linalg;
use crate::quant::{self, BitString, CodecError, Compressor, QuantError, QuantizedBlock};
use crate::rng::{Purpose, Seed};
use crate::topology::ring_successor;

#[derive(Debug, Error)]
pub enum CollectiveError {
    #[error("cannot split {dim} coordinates over {workers} workers")]
    Split { dim: usize, workers: usize },
    #[error("worker {worker} sent {got} coordinates, expected {expected}")]
    LengthMismatch { worker: usize, got: usize, expected: usize },
    #[error("no updates")]
    NoWorkers,
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

/// Contiguous, ordered segments covering `0..dim`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SegmentPlan {
    dim: usize,
    ranges: Vec<Range<usize>>,
}

impl SegmentPlan {
    /// The first `dim % workers` segments get one extra coordinate.
    pub fn split(dim: usize, workers: usize) -> Result<Self, CollectiveError> {
        if workers == 0 || dim < workers {
            return Err(CollectiveError::Split { dim, workers });
        }
        let (base, extra) = (dim / workers, dim % workers);
        let mut ranges = Vec::with_capacity(workers);
        let mut start = 0;
        for i in 0..workers {
            let len = base + usize::from(i < extra);
            ranges.push(start..start + len);
            start += len;
        }
        Ok(SegmentPlan { dim, ranges })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn workers(&self) -> usize {
        self.ranges.len()
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn range(&self, segment: usize) -> Range<usize> {
        self.ranges[segment].clone()
    }
}

pub fn split_segments(dim: usize, workers: usize) -> Result<SegmentPlan, CollectiveError> {
    SegmentPlan::split(dim, workers)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    ReduceScatter,
    AllGather,
}

/// One message on the ring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct HopRecord {
    pub phase: Phase,
    /// Pipeline step, `0..2(M-1)`; all segments move concurrently per step.
    pub step: usize,
    pub sender: usize,
    pub receiver: usize,
    pub segment: usize,
    pub bits: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CollectiveTrace {
    pub hops: Vec<HopRecord>,
}

impl CollectiveTrace {
    pub fn total_bits(&self) -> u64 {
        self.hops.iter().map(|h| h.bits as u64).sum()
    }

    pub fn hop_count(&self) -> usize {
        self.hops.len()
    }

    /// Largest message in each pipeline step, in step order.
    pub fn step_max_bits(&self) -> Vec<usize> {
        let steps = self.hops.iter().map(|h| h.step + 1).max().unwrap_or(0);
        let mut out = vec![0; steps];
        for h in &self.hops {
            out[h.step] = out[h.step].max(h.bits);
        }
        out
    }

    /// `round,hop,sender,receiver,segment,bits` rows (no header).
    pub fn write_csv_rows(&self, round: usize, out: &mut String) {
        for h in &self.hops {
            let _ = writeln!(out, "{round},{},{},{},{},{}", h.step, h.sender, h.receiver, h.segment, h.bits);
        }
    }
}

pub const TRACE_CSV_HEADER: &str = "round,hop,sender,receiver,segment,bits";

/// What arrives after encoding, transmission and decoding.
struct Delivered {
    value: Vec<f64>,
    bits: BitString,
    block: QuantizedBlock,
}

fn compress<R: Rng + ?Sized>(v: &[f64], s: u32, rng: &mut R) -> Result<Delivered, CollectiveError> {
    let block = quant::quantize(v, s, rng)?;
    let bits = quant::encode_block(&block)?;
    let block = quant::decode_block(&bits, v.len(), s)?;
    Ok(Delivered { value: quant::dequantize(&block), bits, block })
}

/// Output of one all-reduce.
#[derive(Debug, Clone)]
pub struct AllReduce {
    /// The assembled sum every worker decodes (not yet divided by `M`).
    pub sum: Vec<f64>,
    pub trace: CollectiveTrace,
    /// Final quantized block per segment; `None` in lossless mode.
    pub final_blocks: Vec<Option<QuantizedBlock>>,
}

/// Sum `updates` over the ring. Quantization draws for segment `j` at
/// reduce-scatter position `i` come from the stream `(round, j, i)`.
pub fn quantized_ring_allreduce(
    updates: &[Vec<f64>],
    compressor: Compressor,
    plan: &SegmentPlan,
    seed: Seed,
    round: u64,
) -> Result<AllReduce, CollectiveError> {
    let workers = plan.workers();
    if updates.len() != workers {
        return Err(if updates.is_empty() {
            CollectiveError::NoWorkers
        } else {
            CollectiveError::Split { dim: plan.dim(), workers: updates.len() }
        });
    }
    for (worker, u) in updates.iter().enumerate() {
        if u.len() != plan.dim() {
            return Err(CollectiveError::LengthMismatch { worker, got: u.len(), expected: plan.dim() });
        }
    }

    let mut sum = vec![0.0; plan.dim()];
    let mut trace = CollectiveTrace::default();
    let mut final_blocks = Vec::with_capacity(workers);

    for segment in 0..workers {
        let range = plan.range(segment);
        let mut holder = segment;
        let mut carried: Option<Vec<f64>> = None;
        let mut last_bits = 0;
        let mut last_block = None;
        for position in 0..workers {
            if position > 0 {
                let receiver = ring_successor(holder, workers);
                trace.hops.push(HopRecord {
                    phase: Phase::ReduceScatter,
                    step: position - 1,
                    sender: holder,
                    receiver,
                    segment,
                    bits: last_bits,
                });
                holder = receiver;
            }
            let own = &updates[holder][range.clone()];
            let partial: Vec<f64> = match carried.take() {
                None => own.to_vec(),
                Some(mut acc) => {
                    linalg::axpy(1.0, own, &mut acc);
                    acc
                }
            };
            match compressor {
                Compressor::Lossless => {
                    last_bits = 32 * partial.len();
                    carried = Some(partial);
                }
                Compressor::Qsgd { levels } => {
                    let mut rng = seed.stream(Purpose::RingQuantize, &[round, segment as u64, position as u64]);
                    let delivered = compress(&partial, levels, &mut rng)?;
                    last_bits = delivered.bits.len();
                    carried = Some(delivered.value);
                    last_block = Some(delivered.block);
                }
            }
        }
        for step in 0..workers - 1 {
            let receiver = ring_successor(holder, workers);
            trace.hops.push(HopRecord {
                phase: Phase::AllGather,
                step: workers - 1 + step,
                sender: holder,
                receiver,
                segment,
                bits: last_bits,
            });
            holder = receiver;
        }
        sum[range].copy_from_slice(&carried.expect("at least one worker"));
        final_blocks.push(last_block);
    }
    Ok(AllReduce { sum, trace, final_blocks })
}

/// Monte Carlo check of the recursive-compression second moment.
#[derive(Debug, Clone, Serialize)]
pub struct Lemma1Report {
    pub dim: usize,
    pub levels: u32,
    pub workers: usize,
    pub trials: usize,
    /// Mean of `||(1/M) out - (1/M) sum w||^2` for the fixed inputs.
    pub empirical: f64,
    pub std_error: f64,
    /// `(2 C1 / M) sum ||w||^2`.
    pub bound: f64,
    pub c1: f64,
    /// `bound - (empirical + 3 std_error)`; nonnegative means pass.
    pub margin: f64,
    pub pass: bool,
    /// The fixed inputs fed in reverse worker order. Informational: the
    /// moment of a particular input set does depend on the order.
    pub reversed_empirical: f64,
    pub reversed_std_error: f64,
    /// Fresh i.i.d. inputs per trial, natural and reversed order, on
    /// independent streams. Exchangeability makes these equal in law.
    pub exchangeable_empirical: f64,
    pub exchangeable_std_error: f64,
    pub exchangeable_reversed_empirical: f64,
    pub exchangeable_reversed_std_error: f64,
    /// Whether the two exchangeable 3-sigma intervals overlap.
    pub permutation_consistent: bool,
}

fn mean_and_se(samples: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut s1, mut s2) = (0.0, 0.0, 0.0);
    for x in samples {
        n += 1.0;
        s1 += x;
        s2 += x * x;
    }
    let mean = s1 / n;
    let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

fn averaged_error(inputs: &[Vec<f64>], levels: u32, plan: &SegmentPlan, seed: Seed, round: u64) -> Result<f64, CollectiveError> {
    let exact = linalg::mean(inputs);
    let inv = 1.0 / inputs.len() as f64;
    let out = quantized_ring_allreduce(inputs, Compressor::Qsgd { levels }, plan, seed, round)?;
    Ok(out.sum.iter().zip(&exact).map(|(a, b)| (a * inv - b) * (a * inv - b)).sum())
}

/// Mean and standard error of the averaged pipeline's squared error for
/// fixed inputs, over `trials` quantization draws.
pub fn recursive_compression_moment(
    inputs: &[Vec<f64>],
    levels: u32,
    trials: usize,
    seed: Seed,
) -> Result<(f64, f64), CollectiveError> {
    let plan = SegmentPlan::split(inputs[0].len(), inputs.len())?;
    let errors = (0..trials).map(|t| averaged_error(inputs, levels, &plan, seed, t as u64)).collect::<Result<Vec<_>, _>>()?;
    Ok(mean_and_se(errors.into_iter()))
}

fn gaussian_inputs(dim: usize, workers: usize, seed: Seed, path: &[u64]) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, StandardNormal};
    let mut data = seed.stream(Purpose::Verify, path);
    (0..workers).map(|_| (0..dim).map(|_| StandardNormal.sample(&mut data)).collect()).collect()
}

fn exchangeable_moment(dim: usize, levels: u32, workers: usize, trials: usize, seed: Seed, reverse: bool) -> Result<(f64, f64), CollectiveError> {
    let plan = SegmentPlan::split(dim, workers)?;
    let errors = (0..trials)
        .map(|t| {
            let mut inputs = gaussian_inputs(dim, workers, seed, &[dim as u64, workers as u64, t as u64]);
            if reverse {
                inputs.reverse();
            }
            averaged_error(&inputs, levels, &plan, seed, t as u64)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(mean_and_se(errors.into_iter()))
}

/// Draw `M` fixed standard-normal vectors, then rerun the quantized pipeline
/// `trials` times with fresh quantization draws.
pub fn verify_lemma1(dim: usize, levels: u32, workers: usize, trials: usize, seed: Seed) -> Result<Lemma1Report, CollectiveError> {
    let inputs = gaussian_inputs(dim, workers, seed, &[dim as u64, workers as u64]);
    let c1 = bounds::c1(dim, levels, workers).map_err(|_| CollectiveError::Split { dim, workers })?;
    let total: f64 = inputs.iter().map(|w| linalg::norm_sq(w)).sum();
    let bound = 2.0 * c1 / workers as f64 * total;

    let (empirical, std_error) = recursive_compression_moment(&inputs, levels, trials, seed.child(Purpose::Verify, 1))?;
    let reversed: Vec<Vec<f64>> = inputs.iter().rev().cloned().collect();
    let (reversed_empirical, reversed_std_error) =
        recursive_compression_moment(&reversed, levels, trials, seed.child(Purpose::Verify, 2))?;
    let (ex, ex_se) = exchangeable_moment(dim, levels, workers, trials, seed.child(Purpose::Verify, 3), false)?;
    let (ex_rev, ex_rev_se) = exchangeable_moment(dim, levels, workers, trials, seed.child(Purpose::Verify, 4), true)?;
    let margin = bound - (empirical + 3.0 * std_error);
    Ok(Lemma1Report {
        dim,
        levels,
        workers,
        trials,
        empirical,
        std_error,
        bound,
        c1,
        margin,
        pass: margin >= 0.0,
        reversed_empirical,
        reversed_std_error,
        exchangeable_empirical: ex,
        exchangeable_std_error: ex_se,
        exchangeable_reversed_empirical: ex_rev,
        exchangeable_reversed_std_error: ex_rev_se,
        permutation_consistent: (ex - ex_rev).abs() <= 3.0 * (ex_se + ex_rev_se),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn random_updates(workers: usize, dim: usize, key: u64) -> Vec<Vec<f64>> {
        let mut rng = Seed(key).stream(Purpose::Data, &[]);
        (0..workers)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect()
    }

    #[test]
    fn split_sizes() {
        let sizes = |d, m| SegmentPlan::split(d, m).unwrap().ranges().iter().map(|r| r.len()).collect::<Vec<_>>();
        assert_eq!(sizes(8, 4), vec![2, 2, 2, 2]);
        assert_eq!(sizes(10, 4), vec![3, 3, 2, 2]);
        assert_eq!(sizes(5, 5), vec![1; 5]);
        assert!(SegmentPlan::split(3, 4).is_err());
        assert!(SegmentPlan::split(3, 0).is_err());
    }

    #[test]
    fn split_covers() {
        let mut rng = Seed(3).stream(Purpose::Verify, &[]);
        for _ in 0..100 {
            let m = rng.random_range(1..40usize);
            let d = rng.random_range(m..400usize);
            let plan = SegmentPlan::split(d, m).unwrap();
            let mut next = 0;
            for r in plan.ranges() {
                assert_eq!(r.start, next);
                next = r.end;
            }
            assert_eq!(next, d);
            let lens: Vec<_> = plan.ranges().iter().map(|r| r.len()).collect();
            assert!(lens.iter().max().unwrap() - lens.iter().min().unwrap() <= 1);
        }
    }

    #[test]
    fn lossless_is_exact_sum() {
        let ups = random_updates(4, 10, 1);
        let plan = SegmentPlan::split(10, 4).unwrap();
        let out = quantized_ring_allreduce(&ups, Compressor::Lossless, &plan, Seed(0), 0).unwrap();
        for i in 0..10 {
            let exact: f64 = ups.iter().map(|u| u[i]).sum();
            assert!((out.sum[i] - exact).abs() < 1e-13);
        }
        assert_eq!(out.trace.hop_count(), 2 * 4 * 3);
        assert_eq!(out.trace.total_bits(), 32 * 10 * 3 * 2);
    }

    #[test]
    fn hop_structure() {
        let m = 5;
        let plan = SegmentPlan::split(13, m).unwrap();
        let out =
            quantized_ring_allreduce(&random_updates(m, 13, 2), Compressor::Qsgd { levels: 2 }, &plan, Seed(1), 3).unwrap();
        assert_eq!(out.trace.hop_count(), 2 * m * (m - 1));
        for h in &out.trace.hops {
            assert_eq!(h.receiver, (h.sender + m - 1) % m);
        }
        // Per step, each worker sends exactly one message.
        for step in 0..2 * (m - 1) {
            let mut senders: Vec<_> = out.trace.hops.iter().filter(|h| h.step == step).map(|h| h.sender).collect();
            senders.sort();
            assert_eq!(senders, (0..m).collect::<Vec<_>>());
        }
        // Segment j starts at worker j.
        for j in 0..m {
            let first = out.trace.hops.iter().find(|h| h.segment == j).unwrap();
            assert_eq!((first.step, first.sender), (0, j));
        }
        // All-gather forwards the final block unchanged.
        for j in 0..m {
            let final_bits = quant::encoded_len(out.final_blocks[j].as_ref().unwrap());
            for h in out.trace.hops.iter().filter(|h| h.segment == j && h.phase == Phase::AllGather) {
                assert_eq!(h.bits, final_bits);
            }
        }
    }

    #[test]
    fn final_segments_are_decoded_blocks() {
        let plan = SegmentPlan::split(17, 4).unwrap();
        let out =
            quantized_ring_allreduce(&random_updates(4, 17, 5), Compressor::Qsgd { levels: 3 }, &plan, Seed(9), 0).unwrap();
        for (j, block) in out.final_blocks.iter().enumerate() {
            let block = block.as_ref().unwrap();
            assert!(block.is_wire());
            assert_eq!(&out.sum[plan.range(j)], quant::dequantize(block).as_slice());
        }
    }

    #[test]
    fn single_worker_is_one_quantization() {
        let ups = random_updates(1, 6, 4);
        let plan = SegmentPlan::split(6, 1).unwrap();
        let out = quantized_ring_allreduce(&ups, Compressor::Qsgd { levels: 4 }, &plan, Seed(2), 7).unwrap();
        assert_eq!(out.trace.hop_count(), 0);
        let mut rng = Seed(2).stream(Purpose::RingQuantize, &[7, 0, 0]);
        let block = quant::quantize(&ups[0], 4, &mut rng).unwrap().to_wire().unwrap();
        assert_eq!(out.sum, quant::dequantize(&block));
    }

    #[test]
    fn replayable() {
        let ups = random_updates(4, 12, 8);
        let plan = SegmentPlan::split(12, 4).unwrap();
        let a = quantized_ring_allreduce(&ups, Compressor::Qsgd { levels: 2 }, &plan, Seed(5), 1).unwrap();
        let b = quantized_ring_allreduce(&ups, Compressor::Qsgd { levels: 2 }, &plan, Seed(5), 1).unwrap();
        let c = quantized_ring_allreduce(&ups, Compressor::Qsgd { levels: 2 }, &plan, Seed(5), 2).unwrap();
        assert_eq!(a.sum, b.sum);
        assert_eq!(a.trace, b.trace);
        assert_ne!(a.sum, c.sum);
    }

    #[test]
    fn trace_bits_match_blocks() {
        let plan = SegmentPlan::split(16, 4).unwrap();
        let out =
            quantized_ring_allreduce(&random_updates(4, 16, 6), Compressor::Qsgd { levels: 2 }, &plan, Seed(4), 0).unwrap();
        let gather: u64 = out.final_blocks.iter().map(|b| 3 * quant::encoded_len(b.as_ref().unwrap()) as u64).sum();
        let scatter: u64 = out.trace.hops.iter().filter(|h| h.phase == Phase::ReduceScatter).map(|h| h.bits as u64).sum();
        assert_eq!(out.trace.total_bits(), gather + scatter);
        assert_eq!(out.trace.step_max_bits().len(), 6);
        let mut csv = String::new();
        out.trace.write_csv_rows(0, &mut csv);
        assert_eq!(csv.lines().count(), 24);
    }

    #[test]
    fn rejects_bad_input() {
        let plan = SegmentPlan::split(8, 4).unwrap();
        let mut ups = random_updates(4, 8, 0);
        ups[2].pop();
        assert!(matches!(
            quantized_ring_allreduce(&ups, Compressor::Lossless, &plan, Seed(0), 0),
            Err(CollectiveError::LengthMismatch { worker: 2, .. })
        ));
        assert!(quantized_ring_allreduce(&ups[..3], Compressor::Lossless, &plan, Seed(0), 0).is_err());
    }

    #[test]
    fn pipeline_unbiased() {
        let ups = random_updates(4, 8, 11);
        let plan = SegmentPlan::split(8, 4).unwrap();
        let trials = 20_000;
        let mut s1 = [0.0; 8];
        let mut s2 = [0.0; 8];
        for t in 0..trials {
            let out = quantized_ring_allreduce(&ups, Compressor::Qsgd { levels: 2 }, &plan, Seed(12), t).unwrap();
            for i in 0..8 {
                s1[i] += out.sum[i];
                s2[i] += out.sum[i] * out.sum[i];
            }
        }
        let n = trials as f64;
        for i in 0..8 {
            let exact: f64 = ups.iter().map(|u| u[i]).sum();
            let mean = s1[i] / n;
            let se = ((s2[i] / n - mean * mean) / n).sqrt();
            // Allow for the binary32 norm narrowing on top of 4 standard errors.
            assert!((mean - exact).abs() < 4.0 * se + 1e-6 * exact.abs(), "coord {i}: {mean} vs {exact}");
        }
    }

    #[test]
    fn lemma1_small() {
        let r = verify_lemma1(8, 2, 4, 10_000, Seed(21)).unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.permutation_consistent, "{r:?}");
        let lossless = verify_lemma1(8, 1 << 20, 4, 10_000, Seed(21)).unwrap();
        assert!(lossless.empirical < 1e-9);
    }
}
