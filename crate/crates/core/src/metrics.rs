//! Per-round evaluation quantities and their CSV form.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::problems::MinimaxProblem;

pub const CSV_HEADER: [&str; 9] = [
    "round",
    "grad_x_sq",
    "grad_y_sq",
    "consensus_x",
    "consensus_y",
    "oracle_max",
    "oracle_mean",
    "pi",
    "wallclock_us",
];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: usize,
    /// `|grad_x J(x_c, y_c)|^2` with the exact gradient at the centroid.
    pub grad_x_sq: f64,
    pub grad_y_sq: f64,
    /// `|X - 1 x_c^T|_F^2`.
    pub consensus_x: f64,
    pub consensus_y: f64,
    pub oracle_max: u64,
    pub oracle_mean: f64,
    /// Large-batch draw of this round (0 for the warm start).
    pub pi: u8,
    pub wallclock_us: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RunStatus {
    Completed,
    /// An iterate left the finite range or exceeded the divergence threshold
    /// while computing `round`.
    Diverged { round: usize, norm: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunLog {
    pub rows: Vec<MetricsRow>,
    pub status: RunStatus,
}

impl RunLog {
    pub fn new() -> Self {
        Self { rows: Vec::new(), status: RunStatus::Completed }
    }

    pub fn diverged(&self) -> bool {
        matches!(self.status, RunStatus::Diverged { .. })
    }

    pub fn last(&self) -> Option<&MetricsRow> {
        self.rows.last()
    }

    /// First recorded round at which both squared gradient norms are at most `eps^2`.
    pub fn first_stationary_round(&self, eps: f64) -> Option<usize> {
        let tol = eps * eps;
        self.rows.iter().find(|r| r.grad_x_sq <= tol && r.grad_y_sq <= tol).map(|r| r.round)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.round.to_string(),
                format!("{:e}", r.grad_x_sq),
                format!("{:e}", r.grad_y_sq),
                format!("{:e}", r.consensus_x),
                format!("{:e}", r.consensus_y),
                r.oracle_max.to_string(),
                format!("{:e}", r.oracle_mean),
                r.pi.to_string(),
                r.wallclock_us.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    /// Reads rows written by [`RunLog::write_csv`]. The status is not part of
    /// the CSV and comes back as `Completed`.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let header: Vec<String> = r.headers()?.iter().map(str::to_owned).collect();
        if header != CSV_HEADER {
            return Err(Error::InvalidParameter(format!("unexpected metrics header {header:?}")));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let f = |i: usize| -> Result<&str> {
                rec.get(i).ok_or_else(|| Error::InvalidParameter(format!("short metrics row {rec:?}")))
            };
            let bad = |i: usize| Error::InvalidParameter(format!("bad `{}` in {rec:?}", CSV_HEADER[i]));
            let float = |i: usize| f(i)?.parse::<f64>().map_err(|_| bad(i));
            let int = |i: usize| f(i)?.parse::<u64>().map_err(|_| bad(i));
            rows.push(MetricsRow {
                round: int(0)? as usize,
                grad_x_sq: float(1)?,
                grad_y_sq: float(2)?,
                consensus_x: float(3)?,
                consensus_y: float(4)?,
                oracle_max: int(5)?,
                oracle_mean: float(6)?,
                pi: int(7)? as u8,
                wallclock_us: int(8)?,
            });
        }
        Ok(Self { rows, status: RunStatus::Completed })
    }
}

impl Default for RunLog {
    fn default() -> Self {
        Self::new()
    }
}

/// Mean of the agent rows of a `K x d` block.
pub fn centroid(x: &DMatrix<f64>) -> nalgebra::DVector<f64> {
    x.row_mean().transpose()
}

/// `|X - 1 x_c^T|_F^2`.
pub fn consensus_error(x: &DMatrix<f64>) -> f64 {
    let c = x.row_mean();
    x.row_iter().map(|r| (r - &c).norm_squared()).sum()
}

/// One metrics row for the network state `(X, Y)`.
pub fn record<P: MinimaxProblem + ?Sized>(
    problem: &P,
    round: usize,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    oracle_counts: &[u64],
    pi: bool,
    wallclock_us: u64,
) -> MetricsRow {
    let (gx, gy) = problem.global_grad(&centroid(x), &centroid(y));
    let oracle_max = oracle_counts.iter().copied().max().unwrap_or(0);
    let oracle_mean = if oracle_counts.is_empty() {
        0.0
    } else {
        oracle_counts.iter().map(|&c| c as f64).sum::<f64>() / oracle_counts.len() as f64
    };
    MetricsRow {
        round,
        grad_x_sq: gx.norm_squared(),
        grad_y_sq: gy.norm_squared(),
        consensus_x: consensus_error(x),
        consensus_y: consensus_error(y),
        oracle_max,
        oracle_mean,
        pi: pi as u8,
        wallclock_us,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{make_quadratic, QuadraticConfig};

    fn row(round: usize, gx: f64, gy: f64) -> MetricsRow {
        MetricsRow {
            round,
            grad_x_sq: gx,
            grad_y_sq: gy,
            consensus_x: 0.0,
            consensus_y: 0.0,
            oracle_max: round as u64,
            oracle_mean: round as f64,
            pi: 0,
            wallclock_us: 0,
        }
    }

    #[test]
    fn antipodal_pair_consensus() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, -2.0, -1.0, -2.0, 2.0]);
        assert!((consensus_error(&x) - 2.0 * 9.0).abs() < 1e-12);
    }

    #[test]
    fn consensus_state_has_zero_error() {
        let x = DMatrix::from_fn(5, 3, |_, j| j as f64 * 0.7 - 1.0);
        assert_eq!(consensus_error(&x), 0.0);
    }

    #[test]
    fn saddle_consensus_state_is_stationary() {
        let p = make_quadratic(&QuadraticConfig::desk_scale(3)).unwrap();
        let (xs, ys) = p.saddle_point().unwrap();
        let x = DMatrix::from_fn(8, 16, |_, j| xs[j]);
        let y = DMatrix::from_fn(8, 16, |_, j| ys[j]);
        let r = record(&p, 0, &x, &y, &[1, 2, 3], false, 0);
        assert!(r.grad_x_sq <= 1e-8 && r.grad_y_sq <= 1e-8);
        assert!(r.consensus_x <= 1e-20);
        assert_eq!((r.oracle_max, r.oracle_mean), (3, 2.0));
    }

    #[test]
    fn stationary_round_matches_scan() {
        let mut log = RunLog::new();
        for (i, v) in [1.0, 0.5, 0.2, 0.009, 0.3, 0.001].iter().enumerate() {
            log.rows.push(row(i, *v, v / 2.0));
        }
        let brute = |eps: f64| log.rows.iter().position(|r| r.grad_x_sq <= eps * eps && r.grad_y_sq <= eps * eps);
        for eps in [2.0, 0.5, 0.1, 0.05, 0.01, 1e-4] {
            assert_eq!(log.first_stationary_round(eps), brute(eps));
        }
    }

    #[test]
    fn csv_round_trip_and_header() {
        let mut log = RunLog::new();
        log.rows.push(row(0, 1.5, 2.25e-7));
        log.rows.push(row(1, 0.1, 3.0));
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("round,grad_x_sq,grad_y_sq,consensus_x,consensus_y,oracle_max,oracle_mean,pi,wallclock_us\n"));
        assert!(text.contains("\n0,1.5e0,2.25e-7,0e0,0e0,0,0e0,0,0\n"));
        let back = RunLog::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn wrong_header_rejected() {
        assert!(RunLog::read_csv("a,b\n1,2\n".as_bytes()).is_err());
    }
}
