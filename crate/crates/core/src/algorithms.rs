//! Training loops: AR-QPRSGD, G-QPRSGD and the PSGD / PR-SGD / QSGD
//! baselines, run round by round on the simulated network.
//!
//! A round is lockstep: every worker finishes its `K` local steps, then all
//! communication happens, then metrics are taken at the worker average.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::{self, ArStepRule, ProblemShape, TheoryParams};
use crate::collectives::{quantized_ring_allreduce, CollectiveError, SegmentPlan};
use crate::linalg;
use crate::objectives::{self, Batch, ObjectiveError, ObjectiveSuite, SmoothnessProfile};
use crate::quant::{self, Compressor, QuantError};
use crate::rng::{Purpose, Seed};
use crate::simnet::{self, Clock, LinkModel};
use crate::topology::{self, Graph, MixingMatrix, TopologyError};

#[derive(Debug, Error)]
pub enum AlgoError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Collective(#[from] CollectiveError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Codec(#[from] quant::CodecError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error("non-finite gradient on worker {worker} in round {round}")]
    NonFinite { worker: usize, round: usize },
    #[error("round {round}: worker {holder}'s replica of worker {owner} diverged")]
    ReplicaMismatch { round: usize, holder: usize, owner: usize },
    #[error("round {round}: workers disagree after all-reduce")]
    Disagreement { round: usize },
}

fn config_err(msg: impl Into<String>) -> AlgoError {
    AlgoError::Config(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    Psgd,
    Prsgd,
    Qsgd,
    ArQprsgd,
    GQprsgd,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Psgd => "psgd",
            Algorithm::Prsgd => "prsgd",
            Algorithm::Qsgd => "qsgd",
            Algorithm::ArQprsgd => "ar-qprsgd",
            Algorithm::GQprsgd => "g-qprsgd",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        [Algorithm::Psgd, Algorithm::Prsgd, Algorithm::Qsgd, Algorithm::ArQprsgd, Algorithm::GQprsgd]
            .into_iter()
            .find(|a| a.name() == name)
    }

    pub fn quantized(self) -> bool {
        matches!(self, Algorithm::Qsgd | Algorithm::ArQprsgd | Algorithm::GQprsgd)
    }

    /// PSGD and QSGD synchronize after every step.
    pub fn single_step(self) -> bool {
        matches!(self, Algorithm::Psgd | Algorithm::Qsgd)
    }
}

/// How workers aggregate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Paradigm {
    AllReduce,
    Gossip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum TopologySpec {
    Ring { self_weight: f64 },
    Complete,
    /// Edge list file; weights by the Metropolis rule.
    File { path: PathBuf },
}

impl Default for TopologySpec {
    fn default() -> Self {
        TopologySpec::Ring { self_weight: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum ObjectiveSpec {
    Quadratic {
        dim: usize,
        samples_per_worker: usize,
        #[serde(default)]
        heterogeneity: f64,
    },
    Logreg {
        dim: usize,
        samples_per_worker: usize,
        #[serde(default = "default_separation")]
        separation: f64,
        #[serde(default)]
        skew: f64,
    },
    /// A dataset file in the `worker,target,a0,...` format.
    Csv { path: PathBuf, loss: objectives::Loss },
}

fn default_separation() -> f64 {
    2.0
}

impl ObjectiveSpec {
    pub fn build(&self, workers: usize, seed: Seed) -> Result<ObjectiveSuite, AlgoError> {
        match *self {
            ObjectiveSpec::Quadratic { dim, samples_per_worker, heterogeneity } => {
                if dim == 0 || samples_per_worker == 0 {
                    return Err(config_err("objective dim and samples must be positive"));
                }
                Ok(objectives::make_quadratic(workers, dim, heterogeneity, samples_per_worker, seed))
            }
            ObjectiveSpec::Logreg { dim, samples_per_worker, separation, skew } => {
                if dim == 0 || samples_per_worker == 0 {
                    return Err(config_err("objective dim and samples must be positive"));
                }
                if !(0.0..1.0).contains(&skew) {
                    return Err(config_err("skew must be in [0, 1)"));
                }
                Ok(objectives::make_logreg_skewed(workers, dim, samples_per_worker, separation, skew, seed))
            }
            ObjectiveSpec::Csv { ref path, loss } => {
                let file = std::fs::File::open(path).map_err(ObjectiveError::from)?;
                let suite = ObjectiveSuite::read_csv(std::io::BufReader::new(file), loss)?;
                if suite.workers() != workers {
                    return Err(config_err(format!("dataset has {} workers, config has {workers}", suite.workers())));
                }
                Ok(suite)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StepRule {
    C1,
    C2,
    C3,
    Gossip,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stepsize {
    Constant(f64),
    Rule(StepRule),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopMetric {
    Loss,
    GradNormSq,
}

/// Stop at the first recorded round whose metric is at or below `below`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub metric: StopMetric,
    pub below: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    /// Aggregation for the baselines; fixed for the two QPRSGD variants.
    #[serde(default)]
    pub paradigm: Option<Paradigm>,
    pub workers: usize,
    pub local_steps: usize,
    pub rounds: usize,
    #[serde(default = "default_levels")]
    pub quant_levels: u32,
    pub stepsize: Stepsize,
    #[serde(default)]
    pub topology: TopologySpec,
    pub objective: ObjectiveSpec,
    #[serde(default)]
    pub batch: Batch,
    /// Drives minibatch sampling and quantization.
    pub seed: u64,
    /// Drives dataset generation; defaults to `seed`.
    #[serde(default)]
    pub data_seed: Option<u64>,
    #[serde(default)]
    pub link: LinkModel,
    #[serde(default = "default_every")]
    pub metrics_every: usize,
    #[serde(default)]
    pub stop: Option<StopRule>,
}

fn default_levels() -> u32 {
    16
}

fn default_every() -> usize {
    1
}

impl RunConfig {
    pub fn paradigm(&self) -> Paradigm {
        match self.algorithm {
            Algorithm::ArQprsgd => Paradigm::AllReduce,
            Algorithm::GQprsgd => Paradigm::Gossip,
            _ => self.paradigm.unwrap_or(Paradigm::AllReduce),
        }
    }

    pub fn effective_local_steps(&self) -> usize {
        if self.algorithm.single_step() {
            1
        } else {
            self.local_steps
        }
    }

    pub fn compressor(&self) -> Compressor {
        if self.algorithm.quantized() {
            Compressor::Qsgd { levels: self.quant_levels }
        } else {
            Compressor::Lossless
        }
    }

    pub fn data_seed(&self) -> Seed {
        Seed(self.data_seed.unwrap_or(self.seed))
    }

    pub fn dim(&self) -> Option<usize> {
        match self.objective {
            ObjectiveSpec::Quadratic { dim, .. } | ObjectiveSpec::Logreg { dim, .. } => Some(dim),
            ObjectiveSpec::Csv { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<(), AlgoError> {
        if self.workers == 0 {
            return Err(config_err("workers must be at least 1"));
        }
        if self.local_steps == 0 {
            return Err(config_err("local_steps must be at least 1"));
        }
        if self.rounds == 0 {
            return Err(config_err("rounds must be at least 1"));
        }
        if self.metrics_every == 0 {
            return Err(config_err("metrics_every must be at least 1"));
        }
        if self.algorithm.quantized() && self.quant_levels == 0 {
            return Err(config_err("quant_levels must be at least 1"));
        }
        if let Batch::Minibatch(0) = self.batch {
            return Err(config_err("batch size must be at least 1"));
        }
        if let Some(p) = self.paradigm {
            let fixed = match self.algorithm {
                Algorithm::ArQprsgd => Some(Paradigm::AllReduce),
                Algorithm::GQprsgd => Some(Paradigm::Gossip),
                _ => None,
            };
            if fixed.is_some_and(|f| f != p) {
                return Err(config_err(format!("{} cannot run with paradigm {p:?}", self.algorithm.name())));
            }
        }
        self.link.validate().map_err(|e| config_err(e.to_string()))?;
        match self.stepsize {
            Stepsize::Constant(g) if !(g > 0.0 && g.is_finite()) => {
                return Err(config_err(format!("stepsize must be positive, got {g}")));
            }
            Stepsize::Rule(StepRule::Gossip) if self.paradigm() != Paradigm::Gossip => {
                return Err(config_err("the gossip stepsize rule needs the gossip paradigm"));
            }
            Stepsize::Rule(StepRule::C1 | StepRule::C2 | StepRule::C3) if self.paradigm() != Paradigm::AllReduce => {
                return Err(config_err("c1/c2/c3 stepsize rules need the all-reduce paradigm"));
            }
            _ => {}
        }
        if let Some(dim) = self.dim() {
            if self.paradigm() == Paradigm::AllReduce && dim < self.workers {
                return Err(config_err(format!("all-reduce needs dim >= workers ({dim} < {})", self.workers)));
            }
        }
        Ok(())
    }
}

/// Everything a run needs beyond its config: data, mixing weights and the
/// resolved stepsize.
#[derive(Debug, Clone)]
pub struct Environment {
    pub objective: ObjectiveSuite,
    pub mixing: Option<MixingMatrix>,
    pub gamma: f64,
    pub warnings: Vec<String>,
}

/// Problems larger than this skip the optimum-based smoothness estimate.
const PROFILE_MAX_DIM: usize = 2048;

pub fn build_mixing(spec: &TopologySpec, workers: usize) -> Result<MixingMatrix, AlgoError> {
    Ok(match spec {
        TopologySpec::Ring { self_weight } => topology::ring_mixing(workers, *self_weight)?,
        TopologySpec::Complete => topology::complete_mixing(workers)?,
        TopologySpec::File { path } => {
            let graph = Graph::read(path)?;
            if graph.nodes() != workers {
                return Err(config_err(format!("topology has {} nodes, config has {workers} workers", graph.nodes())));
            }
            topology::metropolis_mixing(&graph)?
        }
    })
}

fn lipschitz(obj: &ObjectiveSuite) -> f64 {
    obj.exact_lipschitz().or_else(|| obj.logistic_lipschitz_bound()).expect("every loss has a Lipschitz estimate")
}

impl Environment {
    pub fn prepare(cfg: &RunConfig) -> Result<Self, AlgoError> {
        cfg.validate()?;
        let objective = cfg.objective.build(cfg.workers, cfg.data_seed())?;
        Self::with_objective(cfg, objective)
    }

    pub fn with_objective(cfg: &RunConfig, objective: ObjectiveSuite) -> Result<Self, AlgoError> {
        cfg.validate()?;
        if objective.workers() != cfg.workers {
            return Err(config_err("objective and config disagree on worker count"));
        }
        if cfg.paradigm() == Paradigm::AllReduce && objective.dim() < cfg.workers {
            return Err(config_err("all-reduce needs dim >= workers"));
        }
        let mixing = match cfg.paradigm() {
            Paradigm::Gossip => Some(build_mixing(&cfg.topology, cfg.workers)?),
            Paradigm::AllReduce => None,
        };
        let mut warnings = Vec::new();
        let gamma = match cfg.stepsize {
            Stepsize::Constant(g) => g,
            Stepsize::Rule(rule) => {
                let l = lipschitz(&objective);
                let k = cfg.effective_local_steps();
                let profile = if objective.dim() <= PROFILE_MAX_DIM {
                    Some(objectives::estimate_profile(&objective, 20, cfg.batch, cfg.data_seed().child(Purpose::Probe, 0))?)
                } else {
                    warnings.push(format!("dim {} too large for a smoothness estimate; preconditions unchecked", objective.dim()));
                    None
                };
                let levels = match cfg.compressor() {
                    Compressor::Qsgd { levels } => levels,
                    Compressor::Lossless => u32::MAX,
                };
                match rule {
                    StepRule::Gossip => {
                        let profile = profile.ok_or_else(|| config_err("the gossip rule needs sigma^2; use a constant stepsize"))?;
                        let w = mixing.as_ref().expect("gossip paradigm has a mixing matrix");
                        let p = theory_params(cfg, &objective, w, &profile, 0.0);
                        let gap = objective.global_loss(&vec![0.0; objective.dim()]) - objective.optimum().value;
                        let r = bounds::recommend_stepsize_gossip(&p, Some(gap)).map_err(|e| config_err(e.to_string()))?;
                        if !r.rounds_ok {
                            warnings.push(format!("N = {} below the rate's validity threshold {}", cfg.rounds, r.min_rounds));
                        }
                        if r.local_steps_ok == Some(false) {
                            warnings.push(format!("K = {k} above the rate's bound {:?}", r.max_local_steps));
                        }
                        r.gamma
                    }
                    StepRule::C1 | StepRule::C2 | StepRule::C3 => {
                        let variant = match rule {
                            StepRule::C1 => ArStepRule::C1,
                            StepRule::C2 => ArStepRule::C2,
                            _ => ArStepRule::C3,
                        };
                        let shape = profile.map(|p| ProblemShape {
                            dim: objective.dim(),
                            levels,
                            sigma2: p.sigma2,
                            kappa2: p.kappa2,
                        });
                        let r = bounds::recommend_stepsize_ar(variant, cfg.rounds, k, cfg.workers, l, shape);
                        warnings.extend(r.warnings().map(|w| format!("precondition fails: {w}")));
                        r.gamma
                    }
                }
            }
        };
        Ok(Environment { objective, mixing, gamma, warnings })
    }
}

/// Theory inputs for a config, with `gamma` as the candidate stepsize.
pub fn theory_params(
    cfg: &RunConfig,
    objective: &ObjectiveSuite,
    mixing: &MixingMatrix,
    profile: &SmoothnessProfile,
    gamma: f64,
) -> TheoryParams {
    TheoryParams {
        dim: objective.dim(),
        levels: match cfg.compressor() {
            Compressor::Qsgd { levels } => levels,
            Compressor::Lossless => u32::MAX,
        },
        workers: cfg.workers,
        local_steps: cfg.effective_local_steps(),
        rounds: cfg.rounds,
        lipschitz: profile.lipschitz,
        sigma2: profile.sigma2,
        kappa2: profile.kappa2,
        rho: mixing.rho(),
        mu: mixing.mu(),
        gamma,
    }
}

/// `K` local SGD steps from `x0`. The minibatch of step `k` comes from the
/// stream `(worker, round, k)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalEpoch {
    pub end: Vec<f64>,
    /// `x0 - x_K`
    pub update: Vec<f64>,
}

#[allow(clippy::too_many_arguments)]
pub fn local_epoch(
    obj: &ObjectiveSuite,
    worker: usize,
    x0: &[f64],
    local_steps: usize,
    gamma: f64,
    batch: Batch,
    seed: Seed,
    round: usize,
) -> Result<LocalEpoch, AlgoError> {
    let mut x = x0.to_vec();
    for k in 0..local_steps {
        let mut rng = seed.stream(Purpose::Minibatch, &[worker as u64, round as u64, k as u64]);
        let g = obj.stochastic_grad(worker, &x, batch, &mut rng);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(AlgoError::NonFinite { worker, round });
        }
        linalg::axpy(-gamma, &g, &mut x);
    }
    let update = linalg::sub(x0, &x);
    Ok(LocalEpoch { end: x, update })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub loss: f64,
    pub grad_norm_sq: f64,
    pub consensus: f64,
    pub cum_bits: u64,
    pub sim_seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum RunStatus {
    Completed,
    Stopped { round: usize },
    Diverged { round: usize },
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub metrics: Vec<RoundMetrics>,
    pub status: RunStatus,
    pub gamma: f64,
    pub final_average: Vec<f64>,
}

#[derive(Debug, Clone)]
enum State {
    /// Each worker's copy of the shared parameters.
    AllReduce { params: Vec<Vec<f64>>, plan: SegmentPlan },
    /// `replicas[m]` holds `(j, x~^(j))` for `j` in `m`'s closed
    /// neighbourhood, ordered by `j`.
    Gossip { replicas: Vec<Vec<(usize, Vec<f64>)>> },
}

/// One run, advanced a round at a time.
#[derive(Debug, Clone)]
pub struct Simulation<'a> {
    cfg: &'a RunConfig,
    env: &'a Environment,
    state: State,
    round: usize,
    clock: Clock,
    batch_seed: Seed,
    quant_seed: Seed,
}

impl<'a> Simulation<'a> {
    /// Start every worker at `x_1 = 0`.
    pub fn new(cfg: &'a RunConfig, env: &'a Environment) -> Result<Self, AlgoError> {
        let d = env.objective.dim();
        Self::from_point(cfg, env, vec![0.0; d])
    }

    pub fn from_point(cfg: &'a RunConfig, env: &'a Environment, x1: Vec<f64>) -> Result<Self, AlgoError> {
        let m = cfg.workers;
        if x1.len() != env.objective.dim() {
            return Err(config_err("initial point has the wrong dimension"));
        }
        let state = match cfg.paradigm() {
            Paradigm::AllReduce => {
                State::AllReduce { params: vec![x1; m], plan: SegmentPlan::split(env.objective.dim(), m)? }
            }
            Paradigm::Gossip => {
                let w = env.mixing.as_ref().ok_or_else(|| config_err("gossip needs a mixing matrix"))?;
                let replicas = (0..m)
                    .map(|i| (0..m).filter(|&j| j == i || w.weight(i, j) != 0.0).map(|j| (j, x1.clone())).collect())
                    .collect();
                State::Gossip { replicas }
            }
        };
        let base = Seed(cfg.seed);
        Ok(Simulation {
            cfg,
            env,
            state,
            round: 0,
            clock: Clock::default(),
            batch_seed: base,
            quant_seed: base,
        })
    }

    /// Replace the quantization stream, e.g. to replay a round.
    pub fn reseed_quantization(&mut self, seed: Seed) {
        self.quant_seed = seed;
    }

    pub fn rounds_done(&self) -> usize {
        self.round
    }

    pub fn clock(&self) -> Clock {
        self.clock
    }

    /// Worker `m`'s synchronized parameters.
    pub fn params(&self, m: usize) -> &[f64] {
        match &self.state {
            State::AllReduce { params, .. } => &params[m],
            State::Gossip { replicas } => own(&replicas[m], m),
        }
    }

    pub fn average(&self) -> Vec<f64> {
        let all: Vec<Vec<f64>> = (0..self.cfg.workers).map(|m| self.params(m).to_vec()).collect();
        linalg::mean(&all)
    }

    /// Worker `holder`'s copy of worker `owner`'s parameters, if it keeps one.
    pub fn replica(&self, holder: usize, owner: usize) -> Option<&[f64]> {
        match &self.state {
            State::AllReduce { .. } => None,
            State::Gossip { replicas } => replicas[holder].iter().find(|(j, _)| *j == owner).map(|(_, v)| v.as_slice()),
        }
    }

    pub fn metrics(&self) -> RoundMetrics {
        let avg = self.average();
        let obj = &self.env.objective;
        let consensus =
            (0..self.cfg.workers).map(|m| linalg::dist_sq(self.params(m), &avg)).sum::<f64>() / self.cfg.workers as f64;
        RoundMetrics {
            round: self.round,
            loss: obj.global_loss(&avg),
            grad_norm_sq: linalg::norm_sq(&obj.global_grad(&avg)),
            consensus,
            cum_bits: self.clock.bits,
            sim_seconds: self.clock.seconds,
        }
    }

    /// Run one synchronization round.
    pub fn step(&mut self) -> Result<(), AlgoError> {
        let round = self.round;
        let k = self.cfg.effective_local_steps();
        let m_count = self.cfg.workers;
        let gamma = self.env.gamma;
        let obj = &self.env.objective;
        let batch = self.cfg.batch;
        let compressor = self.cfg.compressor();
        let link = self.cfg.link;
        match &mut self.state {
            State::AllReduce { params, plan } => {
                let updates = (0..m_count)
                    .map(|m| local_epoch(obj, m, &params[m], k, gamma, batch, self.batch_seed, round).map(|e| e.update))
                    .collect::<Result<Vec<_>, _>>()?;
                let out = quantized_ring_allreduce(&updates, compressor, plan, self.quant_seed, round as u64)?;
                let inv = 1.0 / m_count as f64;
                for x in params.iter_mut() {
                    linalg::axpy(-inv, &out.sum, x);
                }
                if params.iter().any(|x| x != &params[0]) {
                    return Err(AlgoError::Disagreement { round });
                }
                let seconds = simnet::round_time_ar(k, &out.trace.step_max_bits(), &link);
                self.clock.advance(out.trace.total_bits(), seconds);
            }
            State::Gossip { replicas } => {
                let w = self.env.mixing.as_ref().expect("gossip state has mixing");
                let mut deltas = Vec::with_capacity(m_count);
                let mut message_bits = Vec::with_capacity(m_count);
                for (m, held) in replicas.iter().enumerate() {
                    let x0 = own(held, m);
                    let epoch = local_epoch(obj, m, x0, k, gamma, batch, self.batch_seed, round)?;
                    let mut half = vec![0.0; x0.len()];
                    for (j, xj) in held {
                        linalg::axpy(w.weight(m, *j), xj, &mut half);
                    }
                    linalg::axpy(-1.0, &epoch.update, &mut half);
                    let raw = linalg::sub(x0, &half);
                    let (delta, bits) = match compressor {
                        Compressor::Lossless => {
                            let bits = simnet::message_bits(simnet::Payload::Raw(&raw));
                            (raw, bits)
                        }
                        Compressor::Qsgd { levels } => {
                            let mut rng = self.quant_seed.stream(Purpose::GossipQuantize, &[round as u64, m as u64]);
                            let block = quant::quantize(&raw, levels, &mut rng)?;
                            let encoded = quant::encode_block(&block)?;
                            let received = quant::decode_block(&encoded, raw.len(), levels)?;
                            (quant::dequantize(&received), encoded.len())
                        }
                    };
                    deltas.push(delta);
                    message_bits.push(bits);
                }
                for holder in replicas.iter_mut() {
                    for (j, xj) in holder.iter_mut() {
                        linalg::axpy(-1.0, &deltas[*j], xj);
                    }
                }
                for (holder, list) in replicas.iter().enumerate() {
                    for (owner, copy) in list {
                        if copy != own(&replicas[*owner], *owner) {
                            return Err(AlgoError::ReplicaMismatch { round, holder, owner: *owner });
                        }
                    }
                }
                let mut total = 0u64;
                let mut bottleneck = 0usize;
                let mut degree = 0usize;
                for (m, &bits) in message_bits.iter().enumerate() {
                    let deg = replicas[m].len() - 1;
                    total += (deg * bits) as u64;
                    bottleneck = bottleneck.max(bits);
                    degree = degree.max(deg);
                }
                let seconds = simnet::round_time_gossip(k, degree, bottleneck, &link);
                self.clock.advance(total, seconds);
            }
        }
        self.round += 1;
        Ok(())
    }
}

fn own(list: &[(usize, Vec<f64>)], m: usize) -> &[f64] {
    &list.iter().find(|(j, _)| *j == m).expect("closed neighbourhood includes self").1
}

/// Run a config to completion, a stop rule, or divergence.
pub fn run(cfg: &RunConfig, env: &Environment) -> Result<RunResult, AlgoError> {
    let mut sim = Simulation::new(cfg, env)?;
    let initial = env.objective.global_loss(&sim.average());
    let mut metrics = Vec::with_capacity(cfg.rounds / cfg.metrics_every + 1);
    let mut status = RunStatus::Completed;
    for n in 1..=cfg.rounds {
        match sim.step() {
            Ok(()) => {}
            Err(AlgoError::NonFinite { .. }) => {
                status = RunStatus::Diverged { round: n };
                break;
            }
            Err(e) => return Err(e),
        }
        if n % cfg.metrics_every != 0 && n != cfg.rounds {
            continue;
        }
        let row = sim.metrics();
        metrics.push(row);
        if !row.loss.is_finite() || row.loss > 1e6 * initial.max(f64::MIN_POSITIVE) {
            status = RunStatus::Diverged { round: n };
            break;
        }
        if let Some(stop) = cfg.stop {
            let value = match stop.metric {
                StopMetric::Loss => row.loss,
                StopMetric::GradNormSq => row.grad_norm_sq,
            };
            if value <= stop.below {
                status = RunStatus::Stopped { round: n };
                break;
            }
        }
    }
    Ok(RunResult { metrics, status, gamma: env.gamma, final_average: sim.average() })
}

fn run_checked(cfg: &RunConfig, env: &Environment, expect: &[Algorithm]) -> Result<RunResult, AlgoError> {
    if !expect.contains(&cfg.algorithm) {
        return Err(config_err(format!("config runs {}", cfg.algorithm.name())));
    }
    run(cfg, env)
}

pub fn run_ar_qprsgd(cfg: &RunConfig, env: &Environment) -> Result<RunResult, AlgoError> {
    run_checked(cfg, env, &[Algorithm::ArQprsgd])
}

pub fn run_g_qprsgd(cfg: &RunConfig, env: &Environment) -> Result<RunResult, AlgoError> {
    run_checked(cfg, env, &[Algorithm::GQprsgd])
}

/// PSGD, PR-SGD or QSGD under `cfg.paradigm()`.
pub fn run_baseline(kind: Algorithm, cfg: &RunConfig, env: &Environment) -> Result<RunResult, AlgoError> {
    if !matches!(kind, Algorithm::Psgd | Algorithm::Prsgd | Algorithm::Qsgd) {
        return Err(config_err(format!("{} is not a baseline", kind.name())));
    }
    let cfg = RunConfig { algorithm: kind, ..cfg.clone() };
    run(&cfg, env)
}
