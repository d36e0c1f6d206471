use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qprsgd::algorithms::{Algorithm, ObjectiveSpec, Paradigm, RunConfig, StepRule, StopMetric, Stepsize, TopologySpec};
use qprsgd::objectives::Batch;
use qprsgd::runner::{self, Threshold};
use qprsgd::simnet::LinkModel;

#[derive(Debug, Parser)]
#[command(name = "qprsgd", version, about = "Simulate quantized parallel restarted SGD")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one config and write its metrics CSV.
    Run(RunCmd),
    /// Run several arms that differ in a declared set of fields.
    Compare(CompareCmd),
    /// Monte Carlo checks of the quantizer, codec, pipeline and mixing bounds.
    Verify(VerifyCmd),
    /// Theory constants and stepsize recommendations for a config.
    Bounds(BoundsCmd),
    /// Grid over local steps, workers, quantization levels and bandwidth.
    Sweep(SweepCmd),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ObjectiveKind {
    Quadratic,
    Logreg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GammaRule {
    C1,
    C2,
    C3,
    Gossip,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ParadigmArg {
    AllReduce,
    Gossip,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum MetricArg {
    Loss,
    GradNormSq,
}

impl From<MetricArg> for StopMetric {
    fn from(m: MetricArg) -> Self {
        match m {
            MetricArg::Loss => StopMetric::Loss,
            MetricArg::GradNormSq => StopMetric::GradNormSq,
        }
    }
}

/// Config flags. Each one given overrides the `--config` file, or the
/// built-in default when there is no file.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON run config to start from.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// psgd, prsgd, qsgd, ar-qprsgd or g-qprsgd.
    #[arg(long, value_parser = parse_algo)]
    pub algo: Option<Algorithm>,
    /// Aggregation for the baselines.
    #[arg(long, value_enum)]
    pub paradigm: Option<ParadigmArg>,
    #[arg(long)]
    pub workers: Option<usize>,
    #[arg(long)]
    pub local_steps: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub quant_levels: Option<u32>,
    /// ring, complete or file:<path>.
    #[arg(long)]
    pub topology: Option<String>,
    /// Diagonal weight of the ring mixing matrix.
    #[arg(long)]
    pub self_weight: Option<f64>,
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveKind>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub samples_per_worker: Option<usize>,
    /// Quadratic: spread of the per-worker optima. Logreg: label skew in [0, 1).
    #[arg(long)]
    pub heterogeneity: Option<f64>,
    /// Minibatch size, or `full`.
    #[arg(long, value_parser = parse_batch)]
    pub batch: Option<Batch>,
    #[arg(long, conflicts_with = "gamma_rule")]
    pub gamma: Option<f64>,
    #[arg(long, value_enum)]
    pub gamma_rule: Option<GammaRule>,
    #[arg(long)]
    pub bandwidth_mbps: Option<f64>,
    #[arg(long)]
    pub latency_ms: Option<f64>,
    /// Simulated compute time of one local step.
    #[arg(long)]
    pub compute_ms: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Dataset seed; defaults to --seed.
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Record metrics every n rounds (the last round is always recorded).
    #[arg(long)]
    pub metrics_every: Option<usize>,
}

fn parse_algo(s: &str) -> Result<Algorithm, String> {
    Algorithm::parse(s).ok_or_else(|| format!("unknown algorithm `{s}` (psgd, prsgd, qsgd, ar-qprsgd, g-qprsgd)"))
}

fn parse_batch(s: &str) -> Result<Batch, String> {
    if s == "full" {
        return Ok(Batch::Full);
    }
    s.parse().map(Batch::Minibatch).map_err(|_| format!("batch must be a positive integer or `full`, got `{s}`"))
}

pub fn default_config() -> RunConfig {
    RunConfig {
        algorithm: Algorithm::ArQprsgd,
        paradigm: None,
        workers: 4,
        local_steps: 4,
        rounds: 100,
        quant_levels: 16,
        stepsize: Stepsize::Constant(0.05),
        topology: TopologySpec::default(),
        objective: ObjectiveSpec::Quadratic { dim: 32, samples_per_worker: 200, heterogeneity: 0.0 },
        batch: Batch::default(),
        seed: 1,
        data_seed: None,
        link: LinkModel::default(),
        metrics_every: 1,
        stop: None,
    }
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<RunConfig, runner::RunnerError> {
        let mut cfg = match &self.config {
            Some(path) => runner::load_config(path)?,
            None => default_config(),
        };
        self.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&self, cfg: &mut RunConfig) -> Result<(), runner::RunnerError> {
        let bad = |msg: String| runner::RunnerError::Config(msg);
        if let Some(a) = self.algo {
            cfg.algorithm = a;
        }
        if let Some(p) = self.paradigm {
            cfg.paradigm = Some(match p {
                ParadigmArg::AllReduce => Paradigm::AllReduce,
                ParadigmArg::Gossip => Paradigm::Gossip,
            });
        }
        set(&mut cfg.workers, self.workers);
        set(&mut cfg.local_steps, self.local_steps);
        set(&mut cfg.rounds, self.rounds);
        set(&mut cfg.quant_levels, self.quant_levels);
        set(&mut cfg.batch, self.batch);
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.metrics_every, self.metrics_every);
        if self.data_seed.is_some() {
            cfg.data_seed = self.data_seed;
        }

        if let Some(t) = &self.topology {
            cfg.topology = match t.as_str() {
                "ring" => TopologySpec::Ring { self_weight: self.self_weight.unwrap_or(0.5) },
                "complete" => TopologySpec::Complete,
                other => match other.strip_prefix("file:") {
                    Some(path) if !path.is_empty() => TopologySpec::File { path: path.into() },
                    _ => return Err(bad(format!("topology must be ring, complete or file:<path>, got `{other}`"))),
                },
            };
        } else if let Some(w) = self.self_weight {
            match &mut cfg.topology {
                TopologySpec::Ring { self_weight } => *self_weight = w,
                _ => return Err(bad("--self-weight applies to the ring topology only".into())),
            }
        }

        if self.objective.is_some() || self.dim.is_some() || self.samples_per_worker.is_some() || self.heterogeneity.is_some() {
            let (dim0, n0) = match &cfg.objective {
                ObjectiveSpec::Quadratic { dim, samples_per_worker, .. } | ObjectiveSpec::Logreg { dim, samples_per_worker, .. } => {
                    (*dim, *samples_per_worker)
                }
                ObjectiveSpec::Csv { .. } => (32, 200),
            };
            let kind = self.objective.unwrap_or(match cfg.objective {
                ObjectiveSpec::Logreg { .. } => ObjectiveKind::Logreg,
                _ => ObjectiveKind::Quadratic,
            });
            let dim = self.dim.unwrap_or(dim0);
            let samples_per_worker = self.samples_per_worker.unwrap_or(n0);
            cfg.objective = match (kind, &cfg.objective) {
                (ObjectiveKind::Quadratic, old) => {
                    let h0 = match old {
                        ObjectiveSpec::Quadratic { heterogeneity, .. } => *heterogeneity,
                        _ => 0.0,
                    };
                    ObjectiveSpec::Quadratic { dim, samples_per_worker, heterogeneity: self.heterogeneity.unwrap_or(h0) }
                }
                (ObjectiveKind::Logreg, old) => {
                    let (sep, skew0) = match old {
                        ObjectiveSpec::Logreg { separation, skew, .. } => (*separation, *skew),
                        _ => (2.0, 0.0),
                    };
                    ObjectiveSpec::Logreg { dim, samples_per_worker, separation: sep, skew: self.heterogeneity.unwrap_or(skew0) }
                }
            };
        }

        if let Some(g) = self.gamma {
            cfg.stepsize = Stepsize::Constant(g);
        }
        if let Some(r) = self.gamma_rule {
            cfg.stepsize = Stepsize::Rule(match r {
                GammaRule::C1 => StepRule::C1,
                GammaRule::C2 => StepRule::C2,
                GammaRule::C3 => StepRule::C3,
                GammaRule::Gossip => StepRule::Gossip,
            });
        }

        let link = &mut cfg.link;
        if let Some(b) = self.bandwidth_mbps {
            link.bandwidth_bps = b * 1e6;
        }
        if let Some(l) = self.latency_ms {
            link.latency_s = l * 1e-3;
        }
        if let Some(c) = self.compute_ms {
            link.compute_per_step_s = c * 1e-3;
        }
        Ok(())
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

#[derive(Debug, Args)]
pub struct RunCmd {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Metrics CSV path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ThresholdArgs {
    /// Threshold for rounds/bits/time-to-threshold in the summary.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long, value_enum, default_value = "grad-norm-sq")]
    pub threshold_metric: MetricArg,
}

impl ThresholdArgs {
    pub fn get(&self) -> Option<Threshold> {
        self.threshold.map(|value| Threshold { metric: self.threshold_metric.into(), value })
    }
}

#[derive(Debug, Args)]
pub struct CompareCmd {
    /// Experiment spec JSON. Without it, arms are built from --algos over
    /// the config flags.
    #[arg(long, conflicts_with = "algos")]
    pub spec: Option<PathBuf>,
    /// Comma-separated algorithms, one arm each.
    #[arg(long, value_delimiter = ',', value_parser = parse_algo)]
    pub algos: Vec<Algorithm>,
    /// Arm the ratios are taken against; defaults to the first arm.
    #[arg(long)]
    pub baseline: Option<String>,
    /// Give every arm the base seed instead of a per-arm stream.
    #[arg(long)]
    pub shared_seed: bool,
    #[command(flatten)]
    pub threshold: ThresholdArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output directory for per-arm CSVs and summary.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepCmd {
    /// Sweep spec JSON. Without it, the grid comes from the list flags.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub local_steps_list: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub workers_list: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub quant_levels_list: Vec<u32>,
    #[arg(long, value_delimiter = ',')]
    pub bandwidth_mbps_list: Vec<f64>,
    #[command(flatten)]
    pub threshold: ThresholdArgs,
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BoundsCmd {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VerifyKind {
    Unbiased,
    SecondMoment,
    Sparsity,
    Codelen,
    Lemma1,
    MixingDecay,
}

#[derive(Debug, Args)]
pub struct VerifyCmd {
    #[arg(value_enum)]
    pub kind: VerifyKind,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long, default_value_t = 4)]
    pub quant_levels: u32,
    /// Monte Carlo draws (per vector for unbiased/second-moment).
    #[arg(long, default_value_t = 10_000)]
    pub trials: usize,
    /// Corpus size (unbiased, second-moment, mixing-decay).
    #[arg(long, default_value_t = 50)]
    pub vectors: usize,
    #[arg(long, default_value_t = 4)]
    pub workers: usize,
    #[arg(long, default_value_t = 0.5)]
    pub self_weight: f64,
    /// Mixing steps for mixing-decay.
    #[arg(long, default_value_t = 20)]
    pub steps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> ConfigArgs {
        let mut full = vec!["qprsgd", "run"];
        full.extend_from_slice(args);
        match Cli::try_parse_from(full).unwrap().command {
            Command::Run(r) => r.cfg,
            _ => unreachable!(),
        }
    }

    #[test]
    fn defaults_without_flags() {
        assert_eq!(parse(&[]).resolve().unwrap(), default_config());
    }

    #[test]
    fn topology_flags() {
        let cfg = parse(&["--algo", "g-qprsgd", "--topology", "ring", "--self-weight", "0.4"]).resolve().unwrap();
        assert_eq!(cfg.topology, TopologySpec::Ring { self_weight: 0.4 });
        let cfg = parse(&["--self-weight", "0.3"]).resolve().unwrap();
        assert_eq!(cfg.topology, TopologySpec::Ring { self_weight: 0.3 });
        let cfg = parse(&["--topology", "file:g.txt"]).resolve().unwrap();
        assert_eq!(cfg.topology, TopologySpec::File { path: "g.txt".into() });
        assert!(parse(&["--topology", "star"]).resolve().is_err());
        assert!(parse(&["--topology", "file:"]).resolve().is_err());
        assert!(parse(&["--topology", "complete", "--self-weight", "0.3"]).resolve().is_ok());
    }

    #[test]
    fn objective_flags_keep_unset_fields() {
        let cfg = parse(&["--objective", "logreg", "--dim", "7", "--heterogeneity", "0.25"]).resolve().unwrap();
        assert_eq!(cfg.objective, ObjectiveSpec::Logreg { dim: 7, samples_per_worker: 200, separation: 2.0, skew: 0.25 });
        let cfg = parse(&["--samples-per-worker", "50"]).resolve().unwrap();
        assert_eq!(cfg.objective, ObjectiveSpec::Quadratic { dim: 32, samples_per_worker: 50, heterogeneity: 0.0 });
    }

    #[test]
    fn stepsize_link_and_batch() {
        let cfg = parse(&["--gamma-rule", "c2", "--bandwidth-mbps", "5", "--latency-ms", "2", "--batch", "full"]).resolve().unwrap();
        assert_eq!(cfg.stepsize, Stepsize::Rule(StepRule::C2));
        assert_eq!(cfg.link.bandwidth_bps, 5e6);
        assert_eq!(cfg.link.latency_s, 2e-3);
        assert_eq!(cfg.batch, Batch::Full);
        assert!(Cli::try_parse_from(["qprsgd", "run", "--gamma", "0.1", "--gamma-rule", "c1"]).is_err());
        assert!(Cli::try_parse_from(["qprsgd", "run", "--batch", "many"]).is_err());
    }
}
