use std::fmt::Write as _;

use super::RunnerError;
use crate::algorithms::RoundMetrics;

pub const METRICS_HEADER: &str = "round,loss,grad_norm_sq,consensus,cum_bits,sim_seconds";

/// Reals are written with 17 significant digits, so they parse back to the
/// same `f64`.
pub fn write_metrics(rows: &[RoundMetrics]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.16e},{:.16e},{:.16e},{},{:.16e}",
            r.round, r.loss, r.grad_norm_sq, r.consensus, r.cum_bits, r.sim_seconds
        );
    }
    out
}

pub fn read_metrics(text: &str) -> Result<Vec<RoundMetrics>, RunnerError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == METRICS_HEADER => {}
        _ => return Err(RunnerError::Metrics { line: 1, msg: format!("expected header `{METRICS_HEADER}`") }),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| RunnerError::Metrics { line: i + 1, msg };
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", fields.len())));
        }
        let real = |s: &str| s.trim().parse::<f64>().map_err(|e| bad(format!("{s}: {e}")));
        rows.push(RoundMetrics {
            round: fields[0].trim().parse().map_err(|e| bad(format!("round: {e}")))?,
            loss: real(fields[1])?,
            grad_norm_sq: real(fields[2])?,
            consensus: real(fields[3])?,
            cum_bits: fields[4].trim().parse().map_err(|e| bad(format!("cum_bits: {e}")))?,
            sim_seconds: real(fields[5])?,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows() -> Vec<RoundMetrics> {
        vec![
            RoundMetrics { round: 1, loss: 0.1 + 0.2, grad_norm_sq: 1e-300, consensus: 0.0, cum_bits: 123, sim_seconds: 1.0 / 3.0 },
            RoundMetrics { round: 2, loss: 12345.678, grad_norm_sq: 5e-324, consensus: 2.5, cum_bits: u64::MAX, sim_seconds: 7.0 },
        ]
    }

    #[test]
    fn header_and_rows() {
        let text = write_metrics(&rows());
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("1,3.0000000000000004e-1,"));
    }

    #[test]
    fn roundtrip_exact() {
        assert_eq!(read_metrics(&write_metrics(&rows())).unwrap(), rows());
        assert!(read_metrics(&write_metrics(&[])).unwrap().is_empty());
    }

    #[test]
    fn rejects_malformed() {
        assert!(read_metrics("round,loss\n").is_err());
        assert!(read_metrics(&format!("{METRICS_HEADER}\n1,2,3\n")).is_err());
        assert!(read_metrics(&format!("{METRICS_HEADER}\n1,x,3,4,5,6\n")).is_err());
    }
}
