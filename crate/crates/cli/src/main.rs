mod args;

use std::path::Path;
use std::process::ExitCode;

use clap::Parser;
use qprsgd::algorithms::{AlgoError, RunStatus};
use qprsgd::rng::Seed;
use qprsgd::runner::{self, verify, ArmSpec, ExperimentSpec, RunnerError, SweepSpec};
use serde_json::{json, Map, Value};

use args::{Cli, Command, CompareCmd, SweepCmd, VerifyCmd, VerifyKind};

const EXIT_CONFIG: u8 = 1;
const EXIT_VERIFY: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

enum Failure {
    Runner(RunnerError),
    Verify(String),
    Diverged(String),
}

impl From<RunnerError> for Failure {
    fn from(e: RunnerError) -> Self {
        Failure::Runner(e)
    }
}

fn exit_code(f: &Failure) -> u8 {
    match f {
        Failure::Runner(RunnerError::Algo(AlgoError::ReplicaMismatch { .. } | AlgoError::Disagreement { .. })) => EXIT_VERIFY,
        Failure::Runner(_) => EXIT_CONFIG,
        Failure::Verify(_) => EXIT_VERIFY,
        Failure::Diverged(_) => EXIT_DIVERGED,
    }
}

fn emit(text: &str, out: Option<&Path>) -> Result<(), Failure> {
    match out {
        Some(path) => runner::write_atomic(path, text.as_bytes())?,
        None => print!("{text}"),
    }
    Ok(())
}

fn pretty(value: &impl serde::Serialize) -> Result<String, Failure> {
    let mut s = serde_json::to_string_pretty(value).map_err(RunnerError::from)?;
    s.push('\n');
    Ok(s)
}

fn warn_all(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn check_diverged(name: &str, status: RunStatus) -> Result<(), Failure> {
    match status {
        RunStatus::Diverged { round } => Err(Failure::Diverged(format!("{name} diverged at round {round}"))),
        _ => Ok(()),
    }
}

fn cmd_run(cmd: &args::RunCmd) -> Result<(), Failure> {
    let cfg = cmd.cfg.resolve()?;
    let (result, warnings) = runner::run_single(&cfg)?;
    warn_all(&warnings);
    emit(&runner::write_metrics(&result.metrics), cmd.out.as_deref())?;
    check_diverged(cfg.algorithm.name(), result.status)
}

fn cmd_compare(cmd: &CompareCmd) -> Result<(), Failure> {
    let spec = match &cmd.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(RunnerError::from)?;
            serde_json::from_str::<ExperimentSpec>(&text)
                .map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))?
        }
        None => {
            if cmd.algos.is_empty() {
                return Err(RunnerError::Config("compare needs --spec or --algos".into()).into());
            }
            let base = cmd.cfg.resolve()?;
            let arms = cmd
                .algos
                .iter()
                .map(|a| {
                    let mut overrides = Map::new();
                    overrides.insert("algorithm".into(), Value::from(a.name()));
                    ArmSpec { name: a.name().into(), overrides }
                })
                .collect();
            ExperimentSpec {
                base,
                vary: vec!["algorithm".into()],
                arms,
                threshold: cmd.threshold.get(),
                baseline: Some(cmd.baseline.clone().unwrap_or_else(|| cmd.algos[0].name().into())),
                shared_streams: cmd.shared_seed,
            }
        }
    };
    let (outcomes, summary) = runner::compare(&spec, cmd.out.as_deref())?;
    for o in &outcomes {
        for w in &o.warnings {
            eprintln!("warning [{}]: {w}", o.name);
        }
    }
    if cmd.out.is_none() {
        emit(&pretty(&summary)?, None)?;
    }
    for o in &outcomes {
        check_diverged(&o.name, o.result.status)?;
    }
    Ok(())
}

fn cmd_sweep(cmd: &SweepCmd) -> Result<(), Failure> {
    let spec = match &cmd.spec {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(RunnerError::from)?;
            serde_json::from_str::<SweepSpec>(&text).map_err(|e| RunnerError::Config(format!("{}: {e}", path.display())))?
        }
        None => SweepSpec {
            base: cmd.cfg.resolve()?,
            local_steps: cmd.local_steps_list.clone(),
            workers: cmd.workers_list.clone(),
            quant_levels: cmd.quant_levels_list.clone(),
            bandwidth_mbps: cmd.bandwidth_mbps_list.clone(),
            threshold: cmd.threshold.get(),
        },
    };
    let (outcomes, summary) = runner::sweep(&spec, cmd.out.as_deref())?;
    if cmd.out.is_none() {
        emit(&pretty(&summary)?, None)?;
    }
    for o in &outcomes {
        check_diverged(&o.name, o.result.status)?;
    }
    Ok(())
}

fn cmd_bounds(cmd: &args::BoundsCmd) -> Result<(), Failure> {
    let cfg = cmd.cfg.resolve()?;
    let report = runner::bounds_report(&cfg)?;
    warn_all(&report.warnings);
    emit(&pretty(&report)?, cmd.out.as_deref())
}

fn cmd_verify(cmd: &VerifyCmd) -> Result<(), Failure> {
    let seed = Seed(cmd.seed);
    let config = |msg: String| Failure::Runner(RunnerError::Config(msg));
    if cmd.trials == 0 || cmd.quant_levels == 0 || cmd.dim == 0 {
        return Err(config("--trials, --quant-levels and --dim must be positive".into()));
    }
    let (value, pass) = match cmd.kind {
        VerifyKind::Unbiased | VerifyKind::SecondMoment => {
            if cmd.vectors == 0 {
                return Err(config("--vectors must be positive".into()));
            }
            let r = verify::verify_quantizer(cmd.dim, cmd.quant_levels, cmd.vectors, cmd.trials, seed);
            let pass = match cmd.kind {
                VerifyKind::Unbiased => r.unbiased,
                _ => r.moment_bounded,
            };
            (serde_json::to_value(&r).map_err(RunnerError::from)?, pass)
        }
        VerifyKind::Sparsity => {
            let r = verify::verify_sparsity(cmd.dim, cmd.quant_levels, cmd.trials, seed);
            (serde_json::to_value(&r).map_err(RunnerError::from)?, r.pass)
        }
        VerifyKind::Codelen => {
            let r = verify::verify_code_length(cmd.dim, cmd.quant_levels, cmd.trials, seed);
            let rt = verify::verify_codec_roundtrip(cmd.trials, seed);
            let pass = r.pass && rt.pass;
            (json!({ "code_length": r, "roundtrip": rt, "pass": pass }), pass)
        }
        VerifyKind::Lemma1 => {
            let r = verify::verify_lemma1(cmd.dim, cmd.quant_levels, cmd.workers, cmd.trials, seed).map_err(RunnerError::from)?;
            (serde_json::to_value(&r).map_err(RunnerError::from)?, r.pass)
        }
        VerifyKind::MixingDecay => {
            let r = verify::verify_mixing_decay(cmd.workers, cmd.self_weight, cmd.steps, cmd.vectors, seed)
                .map_err(|e| config(e.to_string()))?;
            (serde_json::to_value(&r).map_err(RunnerError::from)?, r.pass)
        }
    };
    emit(&pretty(&value)?, cmd.out.as_deref())?;
    if pass {
        Ok(())
    } else {
        Err(Failure::Verify(format!("{:?} check failed", cmd.kind)))
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Run(c) => cmd_run(c),
        Command::Compare(c) => cmd_compare(c),
        Command::Verify(c) => cmd_verify(c),
        Command::Bounds(c) => cmd_bounds(c),
        Command::Sweep(c) => cmd_sweep(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Runner(e) => eprintln!("error: {e}"),
                Failure::Verify(msg) | Failure::Diverged(msg) => eprintln!("error: {msg}"),
            }
            ExitCode::from(exit_code(&f))
        }
    }
}
