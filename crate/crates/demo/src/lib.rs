//! Browser bindings. Each export takes plain numbers or a JSON string and
//! returns a JSON string, so the page needs no generated types.

use qprsgd::algorithms::{
    run, Algorithm, Environment, ObjectiveSpec, Paradigm, RunConfig, RunStatus, Stepsize, TopologySpec,
};
use qprsgd::objectives::Batch;
use qprsgd::quant;
use qprsgd::rng::{Purpose, Seed};
use qprsgd::simnet::LinkModel;
use qprsgd::topology;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

const MAX_DRAWS: u32 = 200_000;
const MAX_DIM: usize = 4096;
const MAX_ROUNDS: usize = 5000;

#[derive(Debug, Serialize)]
pub struct CoordinateStats {
    pub value: f64,
    /// Probability of rounding up to the next level.
    pub p_up: f64,
    pub empirical_p_up: f64,
    pub lower: f64,
    pub upper: f64,
    pub mean: f64,
}

#[derive(Debug, Serialize)]
pub struct QuantizerDemo {
    pub norm: f64,
    pub levels: u32,
    pub draws: u32,
    pub coords: Vec<CoordinateStats>,
    pub mean_bits: f64,
    pub raw_bits: usize,
    pub mean_nonzeros: f64,
    pub sparsity_bound: f64,
    /// `E||Q(v) - v||^2 / ||v||^2` and its bound `d / 4s^2`.
    pub relative_error: f64,
    pub relative_error_bound: f64,
}

pub fn quantizer_demo(values: &[f64], levels: u32, draws: u32, seed: u64) -> Result<QuantizerDemo, String> {
    if values.is_empty() || values.len() > MAX_DIM {
        return Err(format!("need between 1 and {MAX_DIM} values"));
    }
    if levels == 0 || draws == 0 || draws > MAX_DRAWS {
        return Err(format!("levels must be positive and draws in 1..={MAX_DRAWS}"));
    }
    let d = values.len();
    let norm = values.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !norm.is_finite() {
        return Err("values must be finite".into());
    }
    let mut rng = Seed(seed).stream(Purpose::Verify, &[d as u64, levels as u64]);
    let step = if norm > 0.0 { norm / levels as f64 } else { 0.0 };
    let floors: Vec<u32> =
        values.iter().map(|x| if norm > 0.0 { ((x.abs() / norm).min(1.0) * levels as f64).floor() as u32 } else { 0 }).collect();
    let mut ups = vec![0u64; d];
    let mut sums = vec![0.0; d];
    let (mut bits, mut nonzeros, mut err) = (0.0, 0.0, 0.0);
    for _ in 0..draws {
        let block = quant::quantize(values, levels, &mut rng).map_err(|e| e.to_string())?;
        bits += quant::encoded_len(&block) as f64;
        nonzeros += block.nonzeros() as f64;
        let q = quant::dequantize(&block);
        for i in 0..d {
            ups[i] += u64::from(block.levels()[i] > floors[i]);
            sums[i] += q[i];
            err += (q[i] - values[i]) * (q[i] - values[i]);
        }
    }
    let n = draws as f64;
    let coords = values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let sign = if v < 0.0 { -1.0 } else { 1.0 };
            let scaled = if norm > 0.0 { (v.abs() / norm).min(1.0) * levels as f64 } else { 0.0 };
            CoordinateStats {
                value: v,
                p_up: scaled - scaled.floor(),
                empirical_p_up: ups[i] as f64 / n,
                lower: sign * step * floors[i] as f64,
                upper: sign * step * (floors[i] + 1).min(levels) as f64,
                mean: sums[i] / n,
            }
        })
        .collect();
    let norm_sq = norm * norm;
    Ok(QuantizerDemo {
        norm,
        levels,
        draws,
        coords,
        mean_bits: bits / n,
        raw_bits: 32 * d,
        mean_nonzeros: nonzeros / n,
        sparsity_bound: quant::sparsity_bound(d, levels),
        relative_error: if norm_sq > 0.0 { err / n / norm_sq } else { 0.0 },
        relative_error_bound: d as f64 / (4.0 * levels as f64 * levels as f64),
    })
}

#[derive(Debug, Serialize)]
pub struct DecayPoint {
    pub t: usize,
    pub deviation: f64,
    pub bound: f64,
}

#[derive(Debug, Serialize)]
pub struct MixingDemo {
    pub workers: usize,
    pub eigenvalues: Vec<f64>,
    pub rho: f64,
    pub mu: f64,
    pub decay: Vec<DecayPoint>,
    /// Worker values after each step, starting from the random draw.
    pub states: Vec<Vec<f64>>,
}

/// `topology_kind` is `ring` or `complete`.
pub fn mixing_demo(topology_kind: &str, workers: usize, self_weight: f64, steps: usize, seed: u64) -> Result<MixingDemo, String> {
    if !(1..=256).contains(&workers) || steps > 1000 {
        return Err("workers must be in 1..=256 and steps at most 1000".into());
    }
    let w = match topology_kind {
        "ring" => topology::ring_mixing(workers, self_weight),
        "complete" => topology::complete_mixing(workers),
        other => return Err(format!("unknown topology `{other}`")),
    }
    .map_err(|e| e.to_string())?;
    let mut rng = Seed(seed).stream(Purpose::Verify, &[workers as u64]);
    let x: Vec<f64> = (0..workers).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mean = x.iter().sum::<f64>() / workers as f64;
    let dev = |y: &[f64]| y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>().sqrt();
    let start = dev(&x);
    let rho = w.rho();
    let mut y = x.clone();
    let mut decay = vec![DecayPoint { t: 0, deviation: start, bound: start }];
    let mut states = vec![x];
    for t in 1..=steps {
        y = w.apply(&y);
        decay.push(DecayPoint { t, deviation: dev(&y), bound: rho.powi(t as i32) * start });
        states.push(y.clone());
    }
    Ok(MixingDemo { workers, eigenvalues: w.eigenvalues().to_vec(), rho, mu: w.mu(), decay, states })
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceRequest {
    pub algorithms: Vec<String>,
    #[serde(default = "four")]
    pub workers: usize,
    #[serde(default = "four")]
    pub local_steps: usize,
    pub rounds: usize,
    #[serde(default = "sixteen")]
    pub quant_levels: u32,
    pub dim: usize,
    pub gamma: f64,
    /// `quadratic` or `logreg`.
    #[serde(default = "quadratic")]
    pub objective: String,
    /// Run the baselines over the gossip ring instead of the all-reduce.
    #[serde(default)]
    pub gossip_baselines: bool,
    #[serde(default = "hundred")]
    pub bandwidth_mbps: f64,
    #[serde(default)]
    pub seed: u64,
}

fn four() -> usize {
    4
}
fn sixteen() -> u32 {
    16
}
fn hundred() -> f64 {
    100.0
}
fn quadratic() -> String {
    "quadratic".into()
}

#[derive(Debug, Serialize)]
pub struct Curve {
    pub name: String,
    pub status: String,
    pub round: Vec<usize>,
    pub loss: Vec<f64>,
    pub grad_norm_sq: Vec<f64>,
    pub cum_bits: Vec<u64>,
    pub sim_seconds: Vec<f64>,
}

pub fn convergence_demo(req: &ConvergenceRequest) -> Result<Vec<Curve>, String> {
    if req.dim == 0 || req.dim > MAX_DIM || req.rounds == 0 || req.rounds > MAX_ROUNDS {
        return Err(format!("dim must be in 1..={MAX_DIM} and rounds in 1..={MAX_ROUNDS}"));
    }
    let objective = match req.objective.as_str() {
        "quadratic" => ObjectiveSpec::Quadratic { dim: req.dim, samples_per_worker: 200, heterogeneity: 0.5 },
        "logreg" => ObjectiveSpec::Logreg { dim: req.dim, samples_per_worker: 200, separation: 2.0, skew: 0.0 },
        other => return Err(format!("unknown objective `{other}`")),
    };
    let link = LinkModel::from_mbps(req.bandwidth_mbps, 0.0, 1e-3).map_err(|e| e.to_string())?;
    let mut curves = Vec::with_capacity(req.algorithms.len());
    for name in &req.algorithms {
        let algorithm = Algorithm::parse(name).ok_or_else(|| format!("unknown algorithm `{name}`"))?;
        let cfg = RunConfig {
            algorithm,
            paradigm: Some(match algorithm {
                Algorithm::ArQprsgd => Paradigm::AllReduce,
                Algorithm::GQprsgd => Paradigm::Gossip,
                _ if req.gossip_baselines => Paradigm::Gossip,
                _ => Paradigm::AllReduce,
            }),
            workers: req.workers,
            local_steps: req.local_steps,
            rounds: req.rounds,
            quant_levels: req.quant_levels,
            stepsize: Stepsize::Constant(req.gamma),
            topology: TopologySpec::default(),
            objective: objective.clone(),
            batch: Batch::Minibatch(16),
            seed: req.seed,
            data_seed: None,
            link,
            metrics_every: 1,
            stop: None,
        };
        cfg.validate().map_err(|e| format!("{name}: {e}"))?;
        let env = Environment::prepare(&cfg).map_err(|e| format!("{name}: {e}"))?;
        let result = run(&cfg, &env).map_err(|e| format!("{name}: {e}"))?;
        let m = &result.metrics;
        curves.push(Curve {
            name: name.clone(),
            status: match result.status {
                RunStatus::Completed => "completed".into(),
                RunStatus::Stopped { round } => format!("stopped at round {round}"),
                RunStatus::Diverged { round } => format!("diverged at round {round}"),
            },
            round: m.iter().map(|r| r.round).collect(),
            loss: m.iter().map(|r| r.loss).collect(),
            grad_norm_sq: m.iter().map(|r| r.grad_norm_sq).collect(),
            cum_bits: m.iter().map(|r| r.cum_bits).collect(),
            sim_seconds: m.iter().map(|r| r.sim_seconds).collect(),
        });
    }
    Ok(curves)
}

fn to_json<T: Serialize>(value: Result<T, String>) -> Result<String, JsValue> {
    value.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string())).map_err(|e| JsValue::from_str(&e))
}

/// Quantize `values` `draws` times and summarize the outcomes.
#[wasm_bindgen(js_name = quantizerDistribution)]
pub fn quantizer_distribution(values: Vec<f64>, levels: u32, draws: u32, seed: u64) -> Result<String, JsValue> {
    to_json(quantizer_demo(&values, levels, draws, seed))
}

/// Spectrum of a mixing matrix and the consensus decay of a random start.
#[wasm_bindgen(js_name = mixingDecay)]
pub fn mixing_decay(topology_kind: &str, workers: usize, self_weight: f64, steps: usize, seed: u64) -> Result<String, JsValue> {
    to_json(mixing_demo(topology_kind, workers, self_weight, steps, seed))
}

/// Loss curves for the algorithms in a JSON request.
#[wasm_bindgen(js_name = convergenceCurves)]
pub fn convergence_curves(request: &str) -> Result<String, JsValue> {
    let req: Result<ConvergenceRequest, String> = serde_json::from_str(request).map_err(|e| e.to_string());
    to_json(req.and_then(|r| convergence_demo(&r)))
}
