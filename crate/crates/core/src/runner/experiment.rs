use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::summary::{summarize, Summary, Threshold};
use super::{write_atomic, write_metrics, RunnerError};
use crate::algorithms::{run, Environment, RunConfig, RunResult};
use crate::rng::{Purpose, Seed};

/// One arm: the base config with some top-level fields replaced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmSpec {
    pub name: String,
    #[serde(default)]
    pub overrides: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub base: RunConfig,
    /// Top-level config fields arms may override. Anything else must match
    /// the base.
    pub vary: Vec<String>,
    pub arms: Vec<ArmSpec>,
    #[serde(default)]
    pub threshold: Option<Threshold>,
    #[serde(default)]
    pub baseline: Option<String>,
    /// Give every arm the base seed instead of a per-arm stream.
    #[serde(default)]
    pub shared_streams: bool,
}

#[derive(Debug, Clone)]
pub struct ArmOutcome {
    pub name: String,
    pub config: RunConfig,
    pub result: RunResult,
    pub warnings: Vec<String>,
}

fn merge(into: &mut Value, patch: &Value) {
    match (into, patch) {
        (Value::Object(a), Value::Object(b)) => {
            for (k, v) in b {
                merge(a.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

impl ExperimentSpec {
    /// Resolved per-arm configs. Arm `i` draws from the stream derived from
    /// the base seed and `i`; data always comes from the base data seed.
    pub fn arm_configs(&self) -> Result<Vec<(String, RunConfig)>, RunnerError> {
        if self.arms.is_empty() {
            return Err(RunnerError::Config("experiment has no arms".into()));
        }
        let mut names: Vec<&str> = self.arms.iter().map(|a| a.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(RunnerError::Config("arm names must be unique".into()));
        }
        if let Some(b) = &self.baseline {
            if !names.contains(&b.as_str()) {
                return Err(RunnerError::Config(format!("baseline `{b}` is not an arm")));
            }
        }
        let base = serde_json::to_value(&self.base)?;
        let mut out = Vec::with_capacity(self.arms.len());
        for (i, arm) in self.arms.iter().enumerate() {
            if let Some(key) = arm.overrides.keys().find(|k| !self.vary.contains(k)) {
                return Err(RunnerError::Config(format!("arm `{}` overrides `{key}`, which is not declared in vary", arm.name)));
            }
            let mut value = base.clone();
            merge(&mut value, &Value::Object(arm.overrides.clone()));
            let mut cfg: RunConfig = serde_json::from_value(value)
                .map_err(|e| RunnerError::Config(format!("arm `{}`: {e}", arm.name)))?;
            if !arm.overrides.contains_key("seed") && !self.shared_streams {
                cfg.seed = Seed(self.base.seed).child(Purpose::Arm, i as u64).0;
            }
            if !arm.overrides.contains_key("data_seed") {
                cfg.data_seed = Some(self.base.data_seed.unwrap_or(self.base.seed));
            }
            cfg.validate().map_err(|e| RunnerError::Config(format!("arm `{}`: {e}", arm.name)))?;
            out.push((arm.name.clone(), cfg));
        }
        Ok(out)
    }
}

pub fn run_single(cfg: &RunConfig) -> Result<(RunResult, Vec<String>), RunnerError> {
    let env = Environment::prepare(cfg)?;
    let result = run(cfg, &env)?;
    Ok((result, env.warnings))
}

/// Run every arm (concurrently), write `<name>.csv` per arm and
/// `summary.json` into `out_dir` when given.
pub fn compare(spec: &ExperimentSpec, out_dir: Option<&Path>) -> Result<(Vec<ArmOutcome>, Summary), RunnerError> {
    let configs = spec.arm_configs()?;
    let results: Vec<Result<(RunResult, Vec<String>), RunnerError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = configs.iter().map(|(_, cfg)| scope.spawn(move || run_single(cfg))).collect();
        handles.into_iter().map(|h| h.join().expect("arm thread panicked")).collect()
    });
    let mut outcomes = Vec::with_capacity(configs.len());
    for ((name, config), res) in configs.into_iter().zip(results) {
        let (result, warnings) = res?;
        outcomes.push(ArmOutcome { name, config, result, warnings });
    }
    let series: Vec<(String, Vec<_>)> = outcomes.iter().map(|o| (o.name.clone(), o.result.metrics.clone())).collect();
    let summary = summarize(&series, spec.threshold, spec.baseline.as_deref());
    if let Some(dir) = out_dir {
        for o in &outcomes {
            write_atomic(&dir.join(format!("{}.csv", o.name)), write_metrics(&o.result.metrics).as_bytes())?;
        }
        write_atomic(&dir.join("summary.json"), serde_json::to_string_pretty(&summary)?.as_bytes())?;
    }
    Ok((outcomes, summary))
}

/// Cartesian grid over local steps, workers, quantization levels and
/// bandwidth. Empty lists keep the base value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub base: RunConfig,
    #[serde(default)]
    pub local_steps: Vec<usize>,
    #[serde(default)]
    pub workers: Vec<usize>,
    #[serde(default)]
    pub quant_levels: Vec<u32>,
    #[serde(default)]
    pub bandwidth_mbps: Vec<f64>,
    #[serde(default)]
    pub threshold: Option<Threshold>,
}

impl SweepSpec {
    pub fn to_experiment(&self) -> ExperimentSpec {
        fn or_base<T: Clone>(list: &[T], base: T) -> Vec<T> {
            if list.is_empty() {
                vec![base]
            } else {
                list.to_vec()
            }
        }
        let mut vary = Vec::new();
        for (key, used) in [
            ("local_steps", !self.local_steps.is_empty()),
            ("workers", !self.workers.is_empty()),
            ("quant_levels", !self.quant_levels.is_empty()),
            ("link", !self.bandwidth_mbps.is_empty()),
        ] {
            if used {
                vary.push(key.to_string());
            }
        }
        let mut arms = Vec::new();
        for k in or_base(&self.local_steps, self.base.local_steps) {
            for m in or_base(&self.workers, self.base.workers) {
                for s in or_base(&self.quant_levels, self.base.quant_levels) {
                    for bw in or_base(&self.bandwidth_mbps, self.base.link.bandwidth_bps / 1e6) {
                        let mut overrides = Map::new();
                        if !self.local_steps.is_empty() {
                            overrides.insert("local_steps".into(), k.into());
                        }
                        if !self.workers.is_empty() {
                            overrides.insert("workers".into(), m.into());
                        }
                        if !self.quant_levels.is_empty() {
                            overrides.insert("quant_levels".into(), s.into());
                        }
                        if !self.bandwidth_mbps.is_empty() {
                            overrides.insert("link".into(), serde_json::json!({ "bandwidth_bps": bw * 1e6 }));
                        }
                        arms.push(ArmSpec { name: format!("K{k}-M{m}-s{s}-bw{bw}"), overrides });
                    }
                }
            }
        }
        ExperimentSpec {
            base: self.base.clone(),
            vary,
            arms,
            threshold: self.threshold,
            baseline: None,
            shared_streams: false,
        }
    }
}

pub fn sweep(spec: &SweepSpec, out_dir: Option<&Path>) -> Result<(Vec<ArmOutcome>, Summary), RunnerError> {
    compare(&spec.to_experiment(), out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::algorithms::{Algorithm, ObjectiveSpec, Stepsize, TopologySpec};
    use crate::objectives::Batch;
    use crate::simnet::LinkModel;

    fn base() -> RunConfig {
        RunConfig {
            algorithm: Algorithm::Prsgd,
            paradigm: None,
            workers: 4,
            local_steps: 2,
            rounds: 10,
            quant_levels: 8,
            stepsize: Stepsize::Constant(0.02),
            topology: TopologySpec::default(),
            objective: ObjectiveSpec::Quadratic { dim: 8, samples_per_worker: 32, heterogeneity: 0.0 },
            batch: Batch::Minibatch(4),
            seed: 11,
            data_seed: None,
            link: LinkModel::default(),
            metrics_every: 1,
            stop: None,
        }
    }

    fn arm(name: &str, algo: &str) -> ArmSpec {
        let mut overrides = Map::new();
        overrides.insert("algorithm".into(), algo.into());
        ArmSpec { name: name.into(), overrides }
    }

    fn spec(arms: Vec<ArmSpec>) -> ExperimentSpec {
        ExperimentSpec { base: base(), vary: vec!["algorithm".into()], arms, threshold: None, baseline: None, shared_streams: false }
    }

    #[test]
    fn undeclared_override_rejected() {
        let mut a = arm("x", "psgd");
        a.overrides.insert("rounds".into(), 5.into());
        assert!(matches!(spec(vec![a]).arm_configs(), Err(RunnerError::Config(_))));
    }

    #[test]
    fn adding_an_arm_keeps_existing_results() {
        let two = spec(vec![arm("a", "prsgd"), arm("b", "ar-qprsgd")]);
        let three = spec(vec![arm("a", "prsgd"), arm("b", "ar-qprsgd"), arm("c", "psgd")]);
        let (r2, _) = compare(&two, None).unwrap();
        let (r3, _) = compare(&three, None).unwrap();
        for i in 0..2 {
            assert_eq!(r2[i].result.metrics, r3[i].result.metrics);
        }
        assert_ne!(r3[0].config.seed, r3[1].config.seed);
        assert_eq!(r3[0].config.data_seed, r3[1].config.data_seed);
    }

    #[test]
    fn writes_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = spec(vec![arm("a", "prsgd"), arm("b", "ar-qprsgd")]);
        s.baseline = Some("a".into());
        compare(&s, Some(dir.path())).unwrap();
        assert!(dir.path().join("a.csv").exists());
        let summary: Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(summary["arms"][0]["ratios"]["total_bits"], 1.0);
    }

    #[test]
    fn bad_specs() {
        assert!(spec(vec![]).arm_configs().is_err());
        assert!(spec(vec![arm("a", "psgd"), arm("a", "prsgd")]).arm_configs().is_err());
        let mut s = spec(vec![arm("a", "psgd")]);
        s.baseline = Some("zzz".into());
        assert!(s.arm_configs().is_err());
        assert!(spec(vec![arm("a", "nope")]).arm_configs().is_err());
    }

    #[test]
    fn sweep_grid() {
        let s = SweepSpec {
            base: RunConfig { algorithm: Algorithm::ArQprsgd, ..base() },
            local_steps: vec![1, 2],
            workers: vec![],
            quant_levels: vec![2, 4, 8],
            bandwidth_mbps: vec![5.0],
            threshold: None,
        };
        let e = s.to_experiment();
        assert_eq!(e.arms.len(), 6);
        let cfgs = e.arm_configs().unwrap();
        assert_eq!(cfgs[0].1.link.bandwidth_bps, 5e6);
        assert_eq!(cfgs[0].1.link.compute_per_step_s, base().link.compute_per_step_s);
        assert_eq!(cfgs[5].1.quant_levels, 8);
        assert_eq!(cfgs[5].1.local_steps, 2);
    }
}
