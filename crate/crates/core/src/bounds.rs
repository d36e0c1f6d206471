//! Closed-form constants and stepsize rules from the convergence analysis.
//!
//! Everything here is a pure function of its arguments. Exponentials of
//! `d / 4s^2` are evaluated through `expm1`/`ln_1p` so that the lossless
//! limit (`s` large) does not cancel catastrophically, and in log space with
//! an explicit overflow error when `d / 4s^2` is large.

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BoundsError {
    #[error("{0} must be at least 1")]
    NonPositive(&'static str),
    #[error("{0} overflows f64")]
    Overflow(&'static str),
    #[error("constraint violated: {name} (value {value})")]
    Constraint { name: &'static str, value: f64 },
    #[error("gossip stepsize needs sigma > 0")]
    ZeroSigma,
}

/// `x = d / (4 s^2)`, the per-hop variance factor of the quantizer.
pub fn variance_factor(d: usize, s: u32) -> f64 {
    d as f64 / (4.0 * s as f64 * s as f64)
}

/// Recursive-compression constant
/// `C1 = exp(x)/M + (1/x)(x/M + 1)^(M-1) - (1/x + 1)`, `x = d/4s^2`.
pub fn c1(d: usize, s: u32, workers: usize) -> Result<f64, BoundsError> {
    if d == 0 {
        return Err(BoundsError::NonPositive("d"));
    }
    if s == 0 {
        return Err(BoundsError::NonPositive("s"));
    }
    if workers == 0 {
        return Err(BoundsError::NonPositive("M"));
    }
    let x = variance_factor(d, s);
    let m = workers as f64;
    let growth = (m - 1.0) * (x / m).ln_1p();
    if x < 1.0 {
        // Rearranged so the O(1/x) terms cancel exactly:
        // (1/M) expm1(x) + expm1(growth)/x + 1/M - 1
        let value = x.exp_m1() / m + growth.exp_m1() / x + 1.0 / m - 1.0;
        return Ok(value);
    }
    let first = (x - m.ln()).exp();
    let second = (growth - x.ln()).exp();
    if !first.is_finite() {
        return Err(BoundsError::Overflow("exp(d/4s^2)/M"));
    }
    if !second.is_finite() {
        return Err(BoundsError::Overflow("(d/4s^2M + 1)^(M-1) 4s^2/d"));
    }
    Ok(first + second - (1.0 / x + 1.0))
}

/// Largest worker count for which the all-reduce analysis gives linear
/// speedup: `d (1 + x) / (exp(x) - x - 1)` with `x = d/4s^2`.
pub fn worker_bound(d: usize, s: u32) -> Result<f64, BoundsError> {
    if d == 0 {
        return Err(BoundsError::NonPositive("d"));
    }
    if s == 0 {
        return Err(BoundsError::NonPositive("s"));
    }
    let x = variance_factor(d, s);
    let denom = if x < 1e-3 {
        x * x * (0.5 + x * (1.0 / 6.0 + x * (1.0 / 24.0 + x / 120.0)))
    } else {
        x.exp_m1() - x
    };
    if denom.is_infinite() {
        return Ok(0.0);
    }
    if denom <= 0.0 {
        return Err(BoundsError::Constraint { name: "exp(x) - x - 1 > 0", value: denom });
    }
    Ok(d as f64 * (1.0 + x) / denom)
}

/// Inputs shared by the convergence constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct TheoryParams {
    pub dim: usize,
    pub levels: u32,
    pub workers: usize,
    pub local_steps: usize,
    pub rounds: usize,
    pub lipschitz: f64,
    pub sigma2: f64,
    pub kappa2: f64,
    pub rho: f64,
    pub mu: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GossipConstants {
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub d4: f64,
    pub d5: f64,
    pub d6: f64,
}

fn positive(name: &'static str, value: f64) -> Result<f64, BoundsError> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(BoundsError::Constraint { name, value })
    }
}

/// `D2' = (d(1-rho)^2 + 2 d mu^2) / (2 (s^2 (1-rho)^2 - d mu^2))`.
/// Depends only on the quantizer and the topology.
pub fn gossip_noise_constant(dim: usize, levels: u32, rho: f64, mu: f64) -> Result<f64, BoundsError> {
    let (d, s) = (dim as f64, levels as f64);
    let gap = (1.0 - rho) * (1.0 - rho);
    let denom = positive("s^2 (1-rho)^2 - d mu^2 > 0", s * s * gap - d * mu * mu)?;
    Ok((d * gap + 2.0 * d * mu * mu) / (2.0 * denom))
}

/// `D3' = D2'/(1 - rho^2) + 1/(1 - rho)^2`.
pub fn gossip_consensus_constant(d2: f64, rho: f64) -> Result<f64, BoundsError> {
    positive("1 - rho > 0", 1.0 - rho)?;
    Ok(d2 / (1.0 - rho * rho) + 1.0 / ((1.0 - rho) * (1.0 - rho)))
}

/// The six constants of the gossip convergence analysis, failing with the
/// name of the first constraint whose denominator is not positive.
pub fn gossip_constants(p: &TheoryParams) -> Result<GossipConstants, BoundsError> {
    let k = p.local_steps as f64;
    let l = p.lipschitz;
    let g = p.gamma;
    let m = p.workers as f64;
    let gl2 = g * g * l * l;

    let steps_margin = positive("1 - 12 gamma^2 L^2 (K+1)(K-2) > 0", 1.0 - 12.0 * gl2 * (k + 1.0) * (k - 2.0))?;
    let d1 = (2.0 * k + 24.0 * gl2 - 1.0) / steps_margin;
    let d2 = gossip_noise_constant(p.dim, p.levels, p.rho, p.mu)?;
    let d3 = gossip_consensus_constant(d2, p.rho)?;
    let d4 = 2.0 * g * l * k * d3 + g * l * (k - 1.0) / 2.0 + d2 / (2.0 * m);
    let consensus_margin = positive("1 - 8 L^2 gamma^2 K D1' D3' > 0", 1.0 - 8.0 * gl2 * k * d1 * d3)?;
    let d5 = 2.0 * k * l * g * d4 / consensus_margin;
    let d6 = 1.0 - 4.0 * k * (k - 1.0) * gl2 * d5 - 2.0 * g * k * l;
    Ok(GossipConstants { d1, d2, d3, d4, d5, d6 })
}

/// Whether a stepsize satisfies all three gossip stepsize constraints.
pub fn gossip_stepsize_admissible(p: &TheoryParams) -> bool {
    gossip_constants(p).map(|c| c.d6 > 0.0).unwrap_or(false)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InequalityCheck {
    pub lhs: f64,
    pub pass: bool,
}

/// Outcome of checking the all-reduce stepsize constraints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Theorem1Report {
    /// `2(K+1)(K-2) L^2 gamma^2 <= 1 - delta`
    pub contraction: InequalityCheck,
    /// `(8 C1 L^2 g^2 + (K-1) L g + 2 C1) K L g / (1 - 2(K+1)(K-2) L^2 g^2) <= (1 - eps)/2`
    pub noise: InequalityCheck,
    /// `1 - L g - (4 K L g C1 + 1)(K-1) K L^2 g^2 / (1 - 2(K+1)(K-2) L^2 g^2) > 0`
    pub descent: InequalityCheck,
    /// Largest feasible witnesses, clamped to `[0, 1]`.
    pub delta: f64,
    pub epsilon: f64,
    pub pass: bool,
}

pub fn validate_theorem1(local_steps: usize, lipschitz: f64, gamma: f64, c1: f64) -> Theorem1Report {
    let k = local_steps as f64;
    let lg = lipschitz * gamma;
    let a = 2.0 * (k + 1.0) * (k - 2.0) * lg * lg;
    let denom = 1.0 - a;

    let delta = (1.0 - a).clamp(0.0, 1.0);
    let contraction = InequalityCheck { lhs: a, pass: delta > 0.0 };

    let (noise_lhs, descent_lhs) = if denom > 0.0 {
        (
            (8.0 * c1 * lg * lg + (k - 1.0) * lg + 2.0 * c1) * k * lg / denom,
            1.0 - lg - (4.0 * k * lg * c1 + 1.0) * (k - 1.0) * k * lg * lg / denom,
        )
    } else {
        (f64::INFINITY, f64::NEG_INFINITY)
    };
    let epsilon = (1.0 - 2.0 * noise_lhs).clamp(0.0, 1.0);
    let noise = InequalityCheck { lhs: noise_lhs, pass: epsilon > 0.0 };
    let descent = InequalityCheck { lhs: descent_lhs, pass: descent_lhs > 0.0 };
    Theorem1Report { contraction, noise, descent, delta, epsilon, pass: contraction.pass && noise.pass && descent.pass }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArStepRule {
    /// `1 / (L K sqrt(N))`
    C1,
    /// `1 / (L sqrt(N K))`, needs `K <= sigma^2 / 2 kappa^2`
    C2,
    /// `sqrt(M) / (L sqrt(N K))`, needs the worker bound and a K bound
    C3,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Precondition {
    pub name: String,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepsizeRecommendation {
    pub gamma: f64,
    pub checks: Vec<Precondition>,
}

impl StepsizeRecommendation {
    pub fn warnings(&self) -> impl Iterator<Item = &str> {
        self.checks.iter().filter(|c| !c.holds).map(|c| c.name.as_str())
    }
}

/// Problem constants used to check the stepsize rules' preconditions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ProblemShape {
    pub dim: usize,
    pub levels: u32,
    pub sigma2: f64,
    pub kappa2: f64,
}

pub fn recommend_stepsize_ar(
    rule: ArStepRule,
    rounds: usize,
    local_steps: usize,
    workers: usize,
    lipschitz: f64,
    shape: Option<ProblemShape>,
) -> StepsizeRecommendation {
    let (n, k, m, l) = (rounds as f64, local_steps as f64, workers as f64, lipschitz);
    let gamma = match rule {
        ArStepRule::C1 => 1.0 / (l * k * n.sqrt()),
        ArStepRule::C2 => 1.0 / (l * (n * k).sqrt()),
        ArStepRule::C3 => m.sqrt() / (l * (n * k).sqrt()),
    };
    let mut checks = Vec::new();
    if let Some(p) = shape {
        let k_cap = if p.kappa2 > 0.0 { p.sigma2 / (2.0 * p.kappa2) } else { f64::INFINITY };
        match rule {
            ArStepRule::C1 => {}
            ArStepRule::C2 => checks.push(Precondition { name: format!("K <= sigma^2/2kappa^2 = {k_cap}"), holds: k <= k_cap }),
            ArStepRule::C3 => {
                let wb = worker_bound(p.dim, p.levels).unwrap_or(0.0);
                checks.push(Precondition { name: format!("M <= worker bound {wb}"), holds: m <= wb });
                let cap = k_cap * (1.0 + 2.0 * (-variance_factor(p.dim, p.levels)).exp());
                checks.push(Precondition {
                    name: format!("K <= (sigma^2/2kappa^2)(1 + 2 exp(-d/4s^2)) = {cap}"),
                    holds: k <= cap,
                });
            }
        }
    }
    StepsizeRecommendation { gamma, checks }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GossipStepsize {
    pub gamma: f64,
    /// Smallest round count for which the rate holds.
    pub min_rounds: f64,
    pub rounds_ok: bool,
    /// Largest admissible `K`, when the initial suboptimality is known.
    pub max_local_steps: Option<f64>,
    pub local_steps_ok: Option<bool>,
}

/// `gamma = (sigma sqrt(N/M) + 3 K L cbrt(D2') + 16 K L D3' + 6 K L)^-1`.
///
/// `D2'` and `D3'` do not depend on the stepsize, so no bootstrap is needed.
/// `initial_gap` is `F(x_1) - F_*` when known.
pub fn recommend_stepsize_gossip(p: &TheoryParams, initial_gap: Option<f64>) -> Result<GossipStepsize, BoundsError> {
    let sigma = p.sigma2.sqrt();
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(BoundsError::ZeroSigma);
    }
    let d2 = gossip_noise_constant(p.dim, p.levels, p.rho, p.mu)?;
    let d3 = gossip_consensus_constant(d2, p.rho)?;
    let (n, m, k, l) = (p.rounds as f64, p.workers as f64, p.local_steps as f64, p.lipschitz);
    let gamma = 1.0 / (sigma * (n / m).sqrt() + 3.0 * k * l * d2.cbrt() + 16.0 * k * l * d3 + 6.0 * k * l);
    let min_rounds = l * l * m / p.sigma2
        * (k * k * m * m * (4.0 * d3 + 1.0).powi(2) / (d2 * d2)).max(6.0 * (k - 1.0) * (2.0 * k - 1.0));
    let max_local_steps = initial_gap.map(|gap| (gap * p.sigma2 / (l * d2 * (p.sigma2 + 4.0 * p.kappa2))).sqrt());
    Ok(GossipStepsize {
        gamma,
        min_rounds,
        rounds_ok: n >= min_rounds,
        max_local_steps,
        local_steps_ok: max_local_steps.map(|cap| k <= cap),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> TheoryParams {
        TheoryParams {
            dim: 16,
            levels: 16,
            workers: 4,
            local_steps: 4,
            rounds: 1000,
            lipschitz: 1.0,
            sigma2: 1.0,
            kappa2: 0.0,
            rho: 0.5,
            mu: 1.0,
            gamma: 0.01,
        }
    }

    #[test]
    fn c1_reference_value() {
        // 40-digit evaluation: 0.85914091422952261768...
        assert!((c1(4, 1, 2).unwrap() - 0.859_140_914_229_522_6).abs() < 1e-14);
        assert!((c1(8, 2, 4).unwrap() - 0.259_836_567_675_032_04).abs() < 1e-14);
        assert!((c1(16, 4, 8).unwrap() - 0.121_942_932_016_292_54).abs() < 1e-14);
    }

    #[test]
    fn c1_single_worker_collapses() {
        for (d, s) in [(4, 1), (10, 3), (100, 2), (7, 7)] {
            let x = variance_factor(d, s);
            assert!((c1(d, s, 1).unwrap() - x.exp_m1()).abs() < 1e-12 * (1.0 + x.exp()));
        }
    }

    #[test]
    fn c1_lossless_limit() {
        let v = c1(64, 1_000_000, 8).unwrap();
        assert!(v < 1e-9 && v > 0.0);
        // Reference 7.2500000000335e-12; the O(1) terms cancel, leaving
        // absolute error near machine epsilon.
        assert!((v - 7.250_000_000_033_5e-12).abs() < 1e-15, "{v:e}");
    }

    #[test]
    fn c1_positive_on_grid() {
        for d in 1..=256 {
            for s in 1..=32 {
                for m in 1..=32 {
                    let v = c1(d, s, m).unwrap();
                    assert!(v > 0.0, "c1({d},{s},{m}) = {v}");
                }
            }
        }
    }

    #[test]
    fn c1_overflow_and_errors() {
        assert!(matches!(c1(100_000, 1, 4), Err(BoundsError::Overflow(_))));
        assert!(c1(0, 1, 1).is_err());
        assert!(c1(1, 0, 1).is_err());
        assert!(c1(1, 1, 0).is_err());
        // Large but representable.
        assert!(c1(2000, 1, 4).unwrap().is_finite());
    }

    #[test]
    fn worker_bound_values() {
        assert!((worker_bound(4, 1).unwrap() - 11.137_689_529_418_662).abs() < 1e-12);
        let b = worker_bound(64, 1000).unwrap();
        assert!(b > 64.0);
        assert!((b / 500_005_333_294.222_3 - 1.0).abs() < 1e-9);
        assert_eq!(worker_bound(1_000_000, 1).unwrap(), 0.0);
        assert!(3.0 <= worker_bound(4, 1).unwrap());
        assert!(12.0 > worker_bound(4, 1).unwrap());
    }

    #[test]
    fn gossip_fixture() {
        let c = gossip_constants(&fixture()).unwrap();
        assert!((c.d1 - 7.087_449_392_712_551).abs() < 1e-13);
        assert_eq!(c.d2, 0.375);
        assert!((c.d3 - 4.5).abs() < 1e-15);
        assert!((c.d4 - 0.421_875).abs() < 1e-15);
        assert!((c.d5 - 0.037_585_999_743_182_06).abs() < 1e-15);
        assert!((c.d6 - 0.919_819_587_201_232_7).abs() < 1e-14);
        assert!(gossip_stepsize_admissible(&fixture()));
    }

    #[test]
    fn gossip_single_local_step() {
        for g in [0.001, 0.01, 0.05] {
            let p = TheoryParams { local_steps: 1, gamma: g, lipschitz: 2.0, ..fixture() };
            let c = gossip_constants(&p).unwrap();
            assert!((c.d6 - (1.0 - 2.0 * g * 2.0)).abs() < 1e-15);
        }
    }

    #[test]
    fn gossip_small_stepsize_trend() {
        let mut prev: Option<GossipConstants> = None;
        for e in 2..=9 {
            let g = 10f64.powi(-e);
            let c = gossip_constants(&TheoryParams { gamma: g, ..fixture() }).unwrap();
            if let Some(p) = prev {
                assert!(c.d5 < p.d5 && c.d5 > 0.0);
                assert!(c.d6 > p.d6 && c.d6 < 1.0);
            }
            prev = Some(c);
        }
        assert!(prev.unwrap().d5 < 1e-6);
    }

    #[test]
    fn gossip_named_violations() {
        let infeasible = TheoryParams { dim: 1024, levels: 4, ..fixture() };
        assert!(matches!(
            gossip_constants(&infeasible),
            Err(BoundsError::Constraint { name, .. }) if name.starts_with("s^2")
        ));
        let big_step = TheoryParams { gamma: 0.2, ..fixture() };
        assert!(matches!(gossip_constants(&big_step), Err(BoundsError::Constraint { .. })));
    }

    #[test]
    fn theorem1_fixture() {
        let r = validate_theorem1(4, 1.0, 0.05, 0.859);
        assert!((r.contraction.lhs - 0.05).abs() < 1e-15);
        assert!((r.delta - 0.95).abs() < 1e-15);
        assert!((r.noise.lhs - 0.39688).abs() < 1e-12);
        assert!((r.epsilon - 0.20624).abs() < 1e-12);
        assert!((r.descent.lhs - 0.89672).abs() < 1e-12);
        assert!(r.pass);
    }

    #[test]
    fn theorem1_limits() {
        let r = validate_theorem1(4, 1.0, 1e-9, 0.859);
        assert!(r.pass);
        assert!(r.delta > 1.0 - 1e-12 && r.epsilon > 1.0 - 1e-6);
        // K = 1: the contraction coefficient is negative for every stepsize.
        for g in [0.1, 1.0, 10.0] {
            let r = validate_theorem1(1, 1.0, g, 0.5);
            assert!(r.contraction.pass && r.contraction.lhs < 0.0);
        }
    }

    #[test]
    fn theorem1_pass_region_is_an_interval() {
        let (k, l, c) = (4, 1.0, 0.859);
        let pass = |g: f64| validate_theorem1(k, l, g, c).pass;
        let (mut lo, mut hi) = (1e-6, 1.0);
        assert!(pass(lo) && !pass(hi));
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if pass(mid) {
                lo = mid
            } else {
                hi = mid
            }
        }
        for i in 1..200 {
            let g = lo * i as f64 / 200.0;
            assert!(pass(g), "gamma {g} below threshold {lo} fails");
        }
        for i in 1..50 {
            assert!(!pass(hi * (1.0 + i as f64 / 10.0)));
        }
    }

    #[test]
    fn ar_rules() {
        let r = recommend_stepsize_ar(ArStepRule::C1, 100, 4, 8, 2.0, None);
        assert!((r.gamma - 0.0125).abs() < 1e-15);
        for k in 1..10 {
            for m in 1..10 {
                let g1 = recommend_stepsize_ar(ArStepRule::C1, 100, k, m, 1.5, None).gamma;
                let g2 = recommend_stepsize_ar(ArStepRule::C2, 100, k, m, 1.5, None).gamma;
                let g3 = recommend_stepsize_ar(ArStepRule::C3, 100, k, m, 1.5, None).gamma;
                assert!(g1 <= g2 * (1.0 + 1e-15));
                assert!(g2 <= g3 * (m as f64).sqrt());
                if m == 1 {
                    assert_eq!(g2, g3);
                }
            }
        }
    }

    #[test]
    fn ar_preconditions_warn() {
        let shape = ProblemShape { dim: 4, levels: 1, sigma2: 1.0, kappa2: 1.0 };
        let r = recommend_stepsize_ar(ArStepRule::C3, 100, 4, 20, 1.0, Some(shape));
        assert_eq!(r.warnings().count(), 2);
        let shape = ProblemShape { dim: 4, levels: 1, sigma2: 100.0, kappa2: 1.0 };
        let r = recommend_stepsize_ar(ArStepRule::C3, 100, 4, 8, 1.0, Some(shape));
        assert_eq!(r.warnings().count(), 0);
        let r = recommend_stepsize_ar(ArStepRule::C2, 100, 4, 8, 1.0, Some(ProblemShape { kappa2: 0.0, ..shape }));
        assert!(r.checks[0].holds);
    }

    #[test]
    fn gossip_rule_fixture() {
        let r = recommend_stepsize_gossip(&fixture(), Some(1.0)).unwrap();
        // 40-digit evaluation: 0.0029720783428919174122
        assert!((r.gamma - 0.002_972_078_342_891_917_4).abs() < 1e-17);
        assert!(r.max_local_steps.is_some());
    }

    #[test]
    fn gossip_rule_limits() {
        let base = fixture();
        assert_eq!(recommend_stepsize_gossip(&TheoryParams { sigma2: 0.0, ..base }, None), Err(BoundsError::ZeroSigma));
        let huge = recommend_stepsize_gossip(&TheoryParams { sigma2: 1e16, ..base }, None).unwrap();
        let asymptote = (4.0f64 / 1000.0).sqrt() / 1e8;
        assert!((huge.gamma / asymptote - 1.0).abs() < 1e-5);
        let m4 = recommend_stepsize_gossip(&base, None).unwrap().gamma;
        let m8 = recommend_stepsize_gossip(&TheoryParams { workers: 8, ..base }, None).unwrap().gamma;
        assert!(m8 > m4);
    }

    #[test]
    fn deterministic() {
        assert_eq!(c1(37, 3, 5).unwrap().to_bits(), c1(37, 3, 5).unwrap().to_bits());
        assert_eq!(gossip_constants(&fixture()).unwrap(), gossip_constants(&fixture()).unwrap());
    }
}
