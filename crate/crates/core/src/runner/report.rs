use serde::Serialize;

use super::RunnerError;
use crate::algorithms::{build_mixing, theory_params, Environment, Paradigm, RunConfig};
use crate::bounds::{self, ArStepRule, GossipConstants, GossipStepsize, ProblemShape, StepsizeRecommendation, Theorem1Report};
use crate::objectives::{self, SmoothnessProfile};
use crate::quant::Compressor;
use crate::rng::Purpose;
use crate::topology::GossipFeasibility;

#[derive(Debug, Clone, Serialize)]
pub struct ArSection {
    pub c1: Option<f64>,
    pub c1_error: Option<String>,
    pub worker_bound: Option<f64>,
    pub theorem1: Option<Theorem1Report>,
    pub stepsize_c1: StepsizeRecommendation,
    pub stepsize_c2: StepsizeRecommendation,
    pub stepsize_c3: StepsizeRecommendation,
}

#[derive(Debug, Clone, Serialize)]
pub struct GossipSection {
    pub rho: f64,
    pub mu: f64,
    pub feasibility: GossipFeasibility,
    pub constants: Option<GossipConstants>,
    pub constants_error: Option<String>,
    pub stepsize: Option<GossipStepsize>,
    pub stepsize_error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BoundsReport {
    pub dim: usize,
    pub levels: Option<u32>,
    pub workers: usize,
    pub local_steps: usize,
    pub rounds: usize,
    pub gamma: f64,
    pub profile: Option<SmoothnessProfile>,
    pub all_reduce: Option<ArSection>,
    pub gossip: Option<GossipSection>,
    pub warnings: Vec<String>,
}

const PROFILE_MAX_DIM: usize = 2048;

/// Theory constants for a config, evaluated at its resolved stepsize.
pub fn bounds_report(cfg: &RunConfig) -> Result<BoundsReport, RunnerError> {
    let env = Environment::prepare(cfg)?;
    let obj = &env.objective;
    let d = obj.dim();
    let levels = match cfg.compressor() {
        Compressor::Qsgd { levels } => Some(levels),
        Compressor::Lossless => None,
    };
    let k = cfg.effective_local_steps();
    let profile = if d <= PROFILE_MAX_DIM {
        Some(
            objectives::estimate_profile(obj, 20, cfg.batch, cfg.data_seed().child(Purpose::Probe, 0))
                .map_err(|e| RunnerError::Config(e.to_string()))?,
        )
    } else {
        None
    };
    let lipschitz = profile
        .map(|p| p.lipschitz)
        .or_else(|| obj.exact_lipschitz())
        .or_else(|| obj.logistic_lipschitz_bound())
        .unwrap_or(f64::NAN);

    let all_reduce = (cfg.paradigm() == Paradigm::AllReduce).then(|| {
        let s = levels.unwrap_or(u32::MAX);
        let c1 = bounds::c1(d, s, cfg.workers);
        let shape = profile.map(|p| ProblemShape { dim: d, levels: s, sigma2: p.sigma2, kappa2: p.kappa2 });
        let rec = |r| bounds::recommend_stepsize_ar(r, cfg.rounds, k, cfg.workers, lipschitz, shape);
        ArSection {
            c1: c1.as_ref().ok().copied(),
            c1_error: c1.as_ref().err().map(|e| e.to_string()),
            worker_bound: bounds::worker_bound(d, s).ok(),
            theorem1: c1.ok().map(|c| bounds::validate_theorem1(k, lipschitz, env.gamma, c)),
            stepsize_c1: rec(ArStepRule::C1),
            stepsize_c2: rec(ArStepRule::C2),
            stepsize_c3: rec(ArStepRule::C3),
        }
    });

    let gossip = match cfg.paradigm() {
        Paradigm::AllReduce => None,
        Paradigm::Gossip => {
            let w = build_mixing(&cfg.topology, cfg.workers)?;
            let s = levels.unwrap_or(u32::MAX);
            let mut section = GossipSection {
                rho: w.rho(),
                mu: w.mu(),
                feasibility: w.gossip_feasibility(d, s),
                constants: None,
                constants_error: None,
                stepsize: None,
                stepsize_error: None,
            };
            match profile {
                Some(p) => {
                    let params = theory_params(cfg, obj, &w, &p, env.gamma);
                    match bounds::gossip_constants(&params) {
                        Ok(c) => section.constants = Some(c),
                        Err(e) => section.constants_error = Some(e.to_string()),
                    }
                    let gap = obj.global_loss(&vec![0.0; d]) - obj.optimum().value;
                    match bounds::recommend_stepsize_gossip(&params, Some(gap)) {
                        Ok(r) => section.stepsize = Some(r),
                        Err(e) => section.stepsize_error = Some(e.to_string()),
                    }
                }
                None => section.constants_error = Some("no smoothness profile for this dimension".into()),
            }
            Some(section)
        }
    };

    Ok(BoundsReport {
        dim: d,
        levels,
        workers: cfg.workers,
        local_steps: k,
        rounds: cfg.rounds,
        gamma: env.gamma,
        profile,
        all_reduce,
        gossip,
        warnings: env.warnings,
    })
}
