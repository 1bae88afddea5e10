//! The six-matrix description of a decentralized strategy.
//!
//! Every block matrix of the form `M ⊗ I_d` is stored only through its
//! `K x K` factor `M`; block products act on stacked agent matrices (one row
//! per agent) as `M * X`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};
use crate::topology::{stochasticity_residual, symmetry_residual, MixingMatrix};

const COMMUTE_TOL: f64 = 1e-10;
const SQRT_TOL: f64 = 1e-10;
const NULLSPACE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StrategyKind {
    Ed,
    Extra,
    AtcGt,
    SemiAtcGt,
    NonAtcGt,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Ed,
        StrategyKind::Extra,
        StrategyKind::AtcGt,
        StrategyKind::SemiAtcGt,
        StrategyKind::NonAtcGt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Ed => "ED",
            StrategyKind::Extra => "EXTRA",
            StrategyKind::AtcGt => "ATC_GT",
            StrategyKind::SemiAtcGt => "SEMI_ATC_GT",
            StrategyKind::NonAtcGt => "NON_ATC_GT",
        }
    }

    /// Eigenvalues `(a, b, c)` of the strategy matrices as functions of an
    /// eigenvalue `lambda` of `W`.
    pub fn eigen_map(self, lambda: f64) -> (f64, f64, f64) {
        let sqrt_gap = (1.0 - lambda).max(0.0).sqrt();
        match self {
            StrategyKind::Ed => (lambda, sqrt_gap, 1.0),
            StrategyKind::Extra => (1.0, sqrt_gap, lambda),
            StrategyKind::AtcGt => (lambda * lambda, 1.0 - lambda, 1.0),
            StrategyKind::SemiAtcGt => (lambda, 1.0 - lambda, lambda),
            StrategyKind::NonAtcGt => (1.0, 1.0 - lambda, lambda * lambda),
        }
    }

    /// Gradient-tracking family, whose node-level form needs a consensus start.
    pub fn is_tracking(self) -> bool {
        matches!(self, StrategyKind::AtcGt | StrategyKind::SemiAtcGt | StrategyKind::NonAtcGt)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown strategy `{s}`")))
    }
}

/// `K x K` factors of `A`, `B`, `B^2` and `C` for one strategy.
#[derive(Debug, Clone)]
pub struct StrategySet {
    pub kind: StrategyKind,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub b_sq: DMatrix<f64>,
    pub c: DMatrix<f64>,
    /// Eigenvalues of `a`, `b`, `c` in the eigenbasis of `W` (index 0 is the
    /// Perron direction).
    pub lambda_a: DVector<f64>,
    pub lambda_b: DVector<f64>,
    pub lambda_c: DVector<f64>,
    pub mixing: MixingMatrix,
}

/// Builds the matrix choices of one strategy from a mixing matrix.
///
/// `a`, `c` and `b_sq` are formed as matrix polynomials of `W`; `b` for ED and
/// EXTRA is the PSD square root of `I - W` assembled in the eigenbasis of `W`.
pub fn build_strategy(kind: StrategyKind, mixing: &MixingMatrix) -> StrategySet {
    let w = mixing.matrix();
    let k = mixing.size();
    let eye = DMatrix::<f64>::identity(k, k);
    let gap = &eye - w;
    let w_sq = w * w;
    let spec = mixing.spectral();

    let mut lambda_a = DVector::zeros(k);
    let mut lambda_b = DVector::zeros(k);
    let mut lambda_c = DVector::zeros(k);
    for (i, &lam) in spec.eigenvalues.iter().enumerate() {
        let (la, lb, lc) = kind.eigen_map(lam);
        lambda_a[i] = la;
        lambda_b[i] = lb;
        lambda_c[i] = lc;
    }
    // Perron direction: exact values regardless of rounding in eigenvalues[0].
    lambda_a[0] = 1.0;
    lambda_b[0] = 0.0;
    lambda_c[0] = 1.0;

    let (a, c, b) = match kind {
        StrategyKind::Ed => (w.clone(), eye.clone(), eigen_sqrt(mixing, &lambda_b)),
        StrategyKind::Extra => (eye.clone(), w.clone(), eigen_sqrt(mixing, &lambda_b)),
        StrategyKind::AtcGt => (w_sq.clone(), eye.clone(), gap.clone()),
        StrategyKind::SemiAtcGt => (w.clone(), w.clone(), gap.clone()),
        StrategyKind::NonAtcGt => (eye.clone(), w_sq.clone(), gap.clone()),
    };
    let b_sq = match kind {
        StrategyKind::Ed | StrategyKind::Extra => gap,
        _ => &b * &b,
    };

    StrategySet { kind, a, b, b_sq, c, lambda_a, lambda_b, lambda_c, mixing: mixing.clone() }
}

fn eigen_sqrt(mixing: &MixingMatrix, lambda_b: &DVector<f64>) -> DMatrix<f64> {
    let u = &mixing.spectral().u;
    let m = u * DMatrix::from_diagonal(lambda_b) * u.transpose();
    (&m + m.transpose()) * 0.5
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    fn push_max(&mut self, name: &'static str, residual: f64, tolerance: f64) {
        let passed = residual.is_finite() && residual <= tolerance;
        self.checks.push(CheckResult { name, residual, tolerance, passed });
    }

    fn push_min(&mut self, name: &'static str, value: f64, floor: f64) {
        let passed = value.is_finite() && value > floor;
        self.checks.push(CheckResult { name, residual: value, tolerance: floor, passed });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn max_residual(&self) -> f64 {
        self.checks
            .iter()
            .filter(|c| !c.name.ends_with("_positive"))
            .fold(0.0, |m, c| m.max(c.residual))
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            let status = if c.passed { "ok  " } else { "FAIL" };
            writeln!(f, "{status} {:<28} residual={:.3e} tol={:.1e}", c.name, c.residual, c.tolerance)?;
        }
        Ok(())
    }
}

fn commutator(x: &DMatrix<f64>, y: &DMatrix<f64>) -> f64 {
    (x * y - y * x).amax()
}

/// Checks the combination-matrix requirements on a strategy set: `a` and `c`
/// symmetric doubly stochastic, `b_sq` PSD with null space exactly `span(1)`,
/// `b * b = b_sq`, and every factor commuting with `W`.
pub fn validate_assumption4(s: &StrategySet) -> ValidationReport {
    let mut r = ValidationReport::default();
    let w = s.mixing.matrix();
    let k = w.nrows();

    r.push_max("a_symmetric", symmetry_residual(&s.a), crate::topology::STOCHASTIC_TOL);
    r.push_max("a_doubly_stochastic", stochasticity_residual(&s.a), crate::topology::STOCHASTIC_TOL);
    r.push_max("c_symmetric", symmetry_residual(&s.c), crate::topology::STOCHASTIC_TOL);
    r.push_max("c_doubly_stochastic", stochasticity_residual(&s.c), crate::topology::STOCHASTIC_TOL);
    r.push_max("b_sq_symmetric", symmetry_residual(&s.b_sq), NULLSPACE_TOL);

    let ones = DVector::from_element(k, 1.0);
    r.push_max("b_annihilates_ones", (&s.b * &ones).amax(), NULLSPACE_TOL);

    let sym_b_sq = (&s.b_sq + s.b_sq.transpose()) * 0.5;
    let mut eig: Vec<f64> = SymmetricEigen::new(sym_b_sq).eigenvalues.iter().copied().collect();
    eig.sort_by(f64::total_cmp);
    r.push_max("b_sq_psd", (-eig[0]).max(0.0), NULLSPACE_TOL);
    if k > 1 {
        r.push_min("b_sq_second_eig_positive", eig[1], NULLSPACE_TOL);
    }

    r.push_max("b_squared_matches", (&s.b * &s.b - &s.b_sq).norm(), SQRT_TOL);
    r.push_max("a_commutes_w", commutator(&s.a, w), COMMUTE_TOL);
    r.push_max("b_sq_commutes_w", commutator(&s.b_sq, w), COMMUTE_TOL);
    r.push_max("c_commutes_w", commutator(&s.c, w), COMMUTE_TOL);
    r.push_max("b_commutes_w", commutator(&s.b, w), COMMUTE_TOL);
    r
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StrategyDiagnostics {
    /// Largest `|eigenvalue|` of `a` off the consensus direction.
    pub lambda_a_only: f64,
    /// Largest eigenvalue of `b` off the consensus direction.
    pub lambda_b_only: f64,
    /// `max(lambda_a_only, lambda_b_only)`.
    pub lambda_a: f64,
    /// Smallest eigenvalue of `b_sq` off the consensus direction.
    pub min_nonzero_eig_bsq: f64,
}

pub fn strategy_diagnostics(s: &StrategySet) -> StrategyDiagnostics {
    let k = s.lambda_a.len();
    let off = 1..k;
    let lambda_a_only = off.clone().fold(0.0_f64, |m, i| m.max(s.lambda_a[i].abs()));
    let lambda_b_only = off.clone().fold(0.0_f64, |m, i| m.max(s.lambda_b[i].abs()));
    let min_nonzero_eig_bsq = off.fold(f64::INFINITY, |m, i| m.min(s.lambda_b[i] * s.lambda_b[i]));
    StrategyDiagnostics {
        lambda_a_only,
        lambda_b_only,
        lambda_a: lambda_a_only.max(lambda_b_only),
        min_nonzero_eig_bsq,
    }
}
