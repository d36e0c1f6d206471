use serde::{Deserialize, Serialize};

use crate::algorithms::{RoundMetrics, StopMetric};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Threshold {
    pub metric: StopMetric,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Ratios {
    pub rounds_to_threshold: Option<f64>,
    pub bits_to_threshold: Option<f64>,
    pub time_to_threshold: Option<f64>,
    pub total_bits: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub name: String,
    pub rounds: usize,
    pub final_loss: Option<f64>,
    pub final_grad_norm_sq: Option<f64>,
    pub total_bits: u64,
    pub total_seconds: f64,
    /// Interpolated crossing; `None` if the arm never reaches the threshold.
    pub rounds_to_threshold: Option<f64>,
    pub bits_to_threshold: Option<f64>,
    pub time_to_threshold: Option<f64>,
    /// Relative to the baseline arm (`arm / baseline`).
    pub ratios: Ratios,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub threshold: Option<Threshold>,
    pub baseline: Option<String>,
    pub arms: Vec<ArmSummary>,
}

fn metric(row: &RoundMetrics, m: StopMetric) -> f64 {
    match m {
        StopMetric::Loss => row.loss,
        StopMetric::GradNormSq => row.grad_norm_sq,
    }
}

/// `(round, bits, seconds)` where the metric first reaches the threshold,
/// linearly interpolated from the previous recorded row.
fn crossing(rows: &[RoundMetrics], t: Threshold) -> Option<(f64, f64, f64)> {
    let i = rows.iter().position(|r| metric(r, t.metric) <= t.value)?;
    let cur = &rows[i];
    let at = (cur.round as f64, cur.cum_bits as f64, cur.sim_seconds);
    if i == 0 {
        return Some(at);
    }
    let prev = &rows[i - 1];
    let (a, b) = (metric(prev, t.metric), metric(cur, t.metric));
    let frac = if a > b { ((a - t.value) / (a - b)).clamp(0.0, 1.0) } else { 1.0 };
    let lerp = |p: f64, q: f64| p + frac * (q - p);
    Some((
        lerp(prev.round as f64, at.0),
        lerp(prev.cum_bits as f64, at.1),
        lerp(prev.sim_seconds, at.2),
    ))
}

fn ratio(a: Option<f64>, b: Option<f64>) -> Option<f64> {
    match (a, b) {
        (Some(a), Some(b)) if b != 0.0 => Some(a / b),
        (Some(a), Some(b)) if a == b => Some(1.0),
        _ => None,
    }
}

pub fn summarize(arms: &[(String, Vec<RoundMetrics>)], threshold: Option<Threshold>, baseline: Option<&str>) -> Summary {
    let mut out: Vec<ArmSummary> = arms
        .iter()
        .map(|(name, rows)| {
            let last = rows.last();
            let hit = threshold.and_then(|t| crossing(rows, t));
            ArmSummary {
                name: name.clone(),
                rounds: last.map_or(0, |r| r.round),
                final_loss: last.map(|r| r.loss),
                final_grad_norm_sq: last.map(|r| r.grad_norm_sq),
                total_bits: last.map_or(0, |r| r.cum_bits),
                total_seconds: last.map_or(0.0, |r| r.sim_seconds),
                rounds_to_threshold: hit.map(|h| h.0),
                bits_to_threshold: hit.map(|h| h.1),
                time_to_threshold: hit.map(|h| h.2),
                ratios: Ratios::default(),
            }
        })
        .collect();
    if let Some(base) = baseline.and_then(|b| out.iter().find(|a| a.name == b).cloned()) {
        for arm in &mut out {
            arm.ratios = Ratios {
                rounds_to_threshold: ratio(arm.rounds_to_threshold, base.rounds_to_threshold),
                bits_to_threshold: ratio(arm.bits_to_threshold, base.bits_to_threshold),
                time_to_threshold: ratio(arm.time_to_threshold, base.time_to_threshold),
                total_bits: ratio(Some(arm.total_bits as f64), Some(base.total_bits as f64)),
            };
        }
    }
    Summary { threshold, baseline: baseline.map(str::to_owned), arms: out }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(losses: &[f64]) -> Vec<RoundMetrics> {
        losses
            .iter()
            .enumerate()
            .map(|(i, &loss)| RoundMetrics {
                round: i + 1,
                loss,
                grad_norm_sq: loss,
                consensus: 0.0,
                cum_bits: 100 * (i as u64 + 1),
                sim_seconds: 0.5 * (i + 1) as f64,
            })
            .collect()
    }

    fn t(v: f64) -> Option<Threshold> {
        Some(Threshold { metric: StopMetric::Loss, value: v })
    }

    #[test]
    fn identical_arms_ratio_one() {
        let r = rows(&[4.0, 2.0, 1.0]);
        let s = summarize(&[("a".into(), r.clone()), ("b".into(), r)], t(1.5), Some("a"));
        let b = &s.arms[1].ratios;
        assert_eq!(b.rounds_to_threshold, Some(1.0));
        assert_eq!(b.bits_to_threshold, Some(1.0));
        assert_eq!(b.time_to_threshold, Some(1.0));
        assert_eq!(b.total_bits, Some(1.0));
    }

    #[test]
    fn interpolates() {
        let s = summarize(&[("a".into(), rows(&[4.0, 2.0, 1.0]))], t(1.5), None);
        let a = &s.arms[0];
        assert_eq!(a.rounds_to_threshold, Some(2.5));
        assert_eq!(a.bits_to_threshold, Some(250.0));
        assert_eq!(a.time_to_threshold, Some(1.25));
        let s = summarize(&[("a".into(), rows(&[1.0, 0.5]))], t(2.0), None);
        assert_eq!(s.arms[0].rounds_to_threshold, Some(1.0));
    }

    #[test]
    fn never_crossing_is_null() {
        let s = summarize(
            &[("base".into(), rows(&[3.0, 1.0])), ("slow".into(), rows(&[3.0, 2.5]))],
            t(1.5),
            Some("base"),
        );
        let slow = &s.arms[1];
        assert_eq!(slow.rounds_to_threshold, None);
        assert_eq!(slow.rounds, 2);
        assert_eq!(slow.ratios.rounds_to_threshold, None);
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.contains("\"rounds_to_threshold\":null"));
    }
}
