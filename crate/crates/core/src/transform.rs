//! Transformed recursion: the change of variables that splits a general-form
//! run into an exact centroid update and a coupled error system
//! `e+ = T e - (mu / tau) Q^{-1} [0; drive]` with block-diagonal `T`.
//!
//! In the eigenbasis of `W` (without the Perron direction) the stacked
//! disagreement `s = [U^T X; Λ_b^{-1} U^T Z]`, with
//! `Z = mu A M + B D - B^2 X`, evolves under
//! `P = [[Λ_a Λ_c - Λ_b^2, -Λ_b], [Λ_b, I]]`. Interleaving coordinates turns
//! `P` into 2x2 blocks `G_i = [[a c - b^2, -b], [b, 1]]`, each factored as
//! `V_i T_i V_i^{-1}` (diagonal, real rotation-scaling, or scaled Jordan).

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, Matrix2};

use crate::engine::Trajectory;
use crate::error::{Error, Result};
use crate::metrics::centroid;
use crate::strategy::StrategySet;

/// Reassembly residual above which a factorization is rejected.
pub const REASSEMBLY_TOL: f64 = 1e-8;

/// Relative size of the discriminant below which a block is treated as
/// defective. A relative eigenvalue gap of `2 sqrt(1e-12) = 2e-6`.
pub const JORDAN_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlockCase {
    /// Distinct real eigenvalues.
    Distinct,
    /// Eigenvalues `alpha ± i omega`; `T_i = [[alpha, omega], [-omega, alpha]]`.
    Complex,
    /// Repeated eigenvalue `gamma`; `T_i = [[gamma, eps], [0, gamma]]`.
    Jordan { eps: f64 },
}

#[derive(Debug, Clone)]
pub struct BlockFactor {
    pub g: Matrix2<f64>,
    pub v: Matrix2<f64>,
    pub v_inv: Matrix2<f64>,
    pub t: Matrix2<f64>,
    pub case: BlockCase,
    pub t_norm: f64,
}

fn spectral_norm2(m: &Matrix2<f64>) -> f64 {
    m.singular_values().max()
}

/// Factors `g = V T V^{-1}`.
pub fn factor_block(g: Matrix2<f64>) -> Result<BlockFactor> {
    let half_tr = 0.5 * g.trace();
    let det = g.determinant();
    let disc = half_tr * half_tr - det;
    let scale = half_tr.abs().max(1.0).powi(2);
    let (q, r) = (g[(0, 1)], g[(1, 0)]);

    // An eigenvector of `g` for eigenvalue `lambda` (real part when complex).
    let eigvec = |lam: f64| {
        if q.abs() >= r.abs() {
            nalgebra::Vector2::new(q, lam - g[(0, 0)])
        } else {
            nalgebra::Vector2::new(lam - g[(1, 1)], r)
        }
    };

    let (v, t, case) = if q == 0.0 && r == 0.0 {
        (Matrix2::identity(), Matrix2::new(g[(0, 0)], 0.0, 0.0, g[(1, 1)]), BlockCase::Distinct)
    } else if disc.abs() <= JORDAN_TOL * scale {
        let gamma = half_tr;
        let n = g - Matrix2::identity() * gamma;
        let e1 = nalgebra::Vector2::new(1.0, 0.0);
        let e2 = nalgebra::Vector2::new(0.0, 1.0);
        let v2 = if (n * e1).norm() >= (n * e2).norm() { e1 } else { e2 };
        let v1 = n * v2;
        if v1.norm() == 0.0 {
            // g is a multiple of the identity: already diagonal.
            (Matrix2::identity(), Matrix2::identity() * gamma, BlockCase::Distinct)
        } else {
            let eps = if gamma.abs() < 1.0 { 0.5 * (1.0 - gamma.abs()) } else { 0.5 };
            let v = Matrix2::from_columns(&[v1, v2 * eps]);
            (v, Matrix2::new(gamma, eps, 0.0, gamma), BlockCase::Jordan { eps })
        }
    } else if disc > 0.0 {
        let root = disc.sqrt();
        let (l1, l2) = (half_tr + root, half_tr - root);
        let v = Matrix2::from_columns(&[eigvec(l1), eigvec(l2)]);
        (v, Matrix2::new(l1, 0.0, 0.0, l2), BlockCase::Distinct)
    } else {
        let omega = (-disc).sqrt();
        let alpha = half_tr;
        // Eigenvector p + i q for alpha + i omega gives g [p q] = [p q] [[alpha, omega], [-omega, alpha]].
        let (p, qv) = if q.abs() >= r.abs() {
            (nalgebra::Vector2::new(q, alpha - g[(0, 0)]), nalgebra::Vector2::new(0.0, omega))
        } else {
            (nalgebra::Vector2::new(alpha - g[(1, 1)], r), nalgebra::Vector2::new(omega, 0.0))
        };
        let v = Matrix2::from_columns(&[p, qv]);
        (v, Matrix2::new(alpha, omega, -omega, alpha), BlockCase::Complex)
    };

    let v_inv = v
        .try_inverse()
        .ok_or_else(|| Error::Numeric(format!("singular eigenvector basis for block {g:?}")))?;
    let residual = (g - v * t * v_inv).norm();
    if !(residual <= REASSEMBLY_TOL * g.norm().max(1.0)) {
        return Err(Error::Numeric(format!("block reassembly residual {residual:e} for {g:?}")));
    }
    Ok(BlockFactor { g, v, v_inv, t, case, t_norm: spectral_norm2(&t) })
}

/// Block factorization `P = Q T Q^{-1}` for one strategy.
#[derive(Debug, Clone)]
pub struct TransitionFactorization {
    pub blocks: Vec<BlockFactor>,
    /// `‖T‖`: largest block spectral norm.
    pub t_norm: f64,
    /// Eigenvectors of `W` orthogonal to the all-ones vector, `K x (K-1)`.
    pub uhat: DMatrix<f64>,
    pub lambda_a: Vec<f64>,
    pub lambda_b: Vec<f64>,
    pub p: DMatrix<f64>,
    pub t: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub q_inv: DMatrix<f64>,
    /// `‖P - Q T Q^{-1}‖_F`.
    pub reassembly_residual: f64,
}

impl TransitionFactorization {
    pub fn build(s: &StrategySet) -> Result<Self> {
        let k = s.a.nrows();
        if k < 2 {
            return Err(Error::TooFewAgents(k));
        }
        let n = k - 1;
        let uhat = s.mixing.spectral().uhat();
        let la: Vec<f64> = (1..k).map(|i| s.lambda_a[i]).collect();
        let lb: Vec<f64> = (1..k).map(|i| s.lambda_b[i]).collect();
        let lc: Vec<f64> = (1..k).map(|i| s.lambda_c[i]).collect();
        if let Some(i) = lb.iter().position(|&b| !(b.abs() > 1e-14)) {
            return Err(Error::Numeric(format!("lambda_b vanishes on the disagreement subspace (index {})", i + 1)));
        }

        let mut blocks = Vec::with_capacity(n);
        for i in 0..n {
            let g = Matrix2::new(la[i] * lc[i] - lb[i] * lb[i], -lb[i], lb[i], 1.0);
            blocks.push(factor_block(g)?);
        }

        // s = [X-part (n rows); Z-part (n rows)]; interleaved index 2i / 2i+1.
        let m = 2 * n;
        let mut p = DMatrix::zeros(m, m);
        let mut v_blk = DMatrix::zeros(m, m);
        let mut v_inv_blk = DMatrix::zeros(m, m);
        let mut t = DMatrix::zeros(m, m);
        let mut perm = DMatrix::zeros(m, m);
        for (i, b) in blocks.iter().enumerate() {
            p[(i, i)] = b.g[(0, 0)];
            p[(i, n + i)] = b.g[(0, 1)];
            p[(n + i, i)] = b.g[(1, 0)];
            p[(n + i, n + i)] = b.g[(1, 1)];
            for r in 0..2 {
                for c in 0..2 {
                    v_blk[(2 * i + r, 2 * i + c)] = b.v[(r, c)];
                    v_inv_blk[(2 * i + r, 2 * i + c)] = b.v_inv[(r, c)];
                    t[(2 * i + r, 2 * i + c)] = b.t[(r, c)];
                }
            }
            perm[(2 * i, i)] = 1.0;
            perm[(2 * i + 1, n + i)] = 1.0;
        }
        let q = perm.transpose() * v_blk;
        let q_inv = v_inv_blk * perm;
        let reassembly_residual = (&p - &q * &t * &q_inv).norm();
        if !(reassembly_residual <= REASSEMBLY_TOL) {
            return Err(Error::Numeric(format!("reassembly residual {reassembly_residual:e}")));
        }
        let t_norm = blocks.iter().map(|b| b.t_norm).fold(0.0, f64::max);
        Ok(Self { blocks, t_norm, uhat, lambda_a: la, lambda_b: lb, p, t, q, q_inv, reassembly_residual })
    }

    pub fn disagreement_dim(&self) -> usize {
        self.lambda_b.len()
    }

    /// `s = [U^T X; Λ_b^{-1} U^T Z]`.
    pub fn stacked(&self, x: &DMatrix<f64>, z: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.disagreement_dim();
        let ux = self.uhat.tr_mul(x);
        let mut uz = self.uhat.tr_mul(z);
        for i in 0..n {
            uz.row_mut(i).scale_mut(1.0 / self.lambda_b[i]);
        }
        let mut s = DMatrix::zeros(2 * n, x.ncols());
        s.rows_mut(0, n).copy_from(&ux);
        s.rows_mut(n, n).copy_from(&uz);
        s
    }

    /// Driving term `Q^{-1} [0; Λ_b^{-1} Λ_a U^T (M_i - M_{i+1})]`, before the
    /// `mu / tau` factor.
    pub fn driving_term(&self, m_now: &DMatrix<f64>, m_next: &DMatrix<f64>) -> DMatrix<f64> {
        let n = self.disagreement_dim();
        let mut um = self.uhat.tr_mul(&(m_now - m_next));
        for i in 0..n {
            um.row_mut(i).scale_mut(self.lambda_a[i] / self.lambda_b[i]);
        }
        let mut v = DMatrix::zeros(2 * n, m_now.ncols());
        v.rows_mut(n, n).copy_from(&um);
        &self.q_inv * v
    }
}

/// `Z_x = mu_x A Mx + B Dx - B^2 X` and `Z_y = -mu_y A My + B Dy - B^2 Y`.
#[allow(clippy::too_many_arguments)]
pub fn auxiliary(
    s: &StrategySet,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    dx: &DMatrix<f64>,
    dy: &DMatrix<f64>,
    mx: &DMatrix<f64>,
    my: &DMatrix<f64>,
    mu_x: f64,
    mu_y: f64,
) -> (DMatrix<f64>, DMatrix<f64>) {
    let zx = &s.a * mx * mu_x + &s.b * dx - &s.b_sq * x;
    let zy = &s.a * my * (-mu_y) + &s.b * dy - &s.b_sq * y;
    (zx, zy)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledError {
    pub e_x: DMatrix<f64>,
    pub e_y: DMatrix<f64>,
    pub tau_x: f64,
    pub tau_y: f64,
}

impl CoupledError {
    pub fn norm(&self) -> f64 {
        (self.e_x.norm_squared() + self.e_y.norm_squared()).sqrt()
    }
}

/// `e = (1/tau) Q^{-1} s` for both variables.
#[allow(clippy::too_many_arguments)]
pub fn compute_error_vectors(
    s: &StrategySet,
    fact: &TransitionFactorization,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    dx: &DMatrix<f64>,
    dy: &DMatrix<f64>,
    mx: &DMatrix<f64>,
    my: &DMatrix<f64>,
    mu_x: f64,
    mu_y: f64,
    tau_x: f64,
    tau_y: f64,
) -> Result<CoupledError> {
    if !(tau_x > 0.0 && tau_y > 0.0) {
        return Err(Error::InvalidParameter("tau must be positive".into()));
    }
    let (zx, zy) = auxiliary(s, x, y, dx, dy, mx, my, mu_x, mu_y);
    Ok(CoupledError {
        e_x: &fact.q_inv * fact.stacked(x, &zx) / tau_x,
        e_y: &fact.q_inv * fact.stacked(y, &zy) / tau_y,
        tau_x,
        tau_y,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundResidual {
    pub round: usize,
    /// Max-abs residual of `x_c+ = x_c - (mu_x/K) sum g` (resp. y with `+`).
    pub centroid_x: f64,
    pub centroid_y: f64,
    /// Frobenius residual of the coupled-error recursion.
    pub error_x: f64,
    pub error_y: f64,
    /// `‖e_i‖`.
    pub error_norm: f64,
    /// `‖e_{i+1} + driving‖ - ‖T‖ ‖e_i‖`; nonpositive up to rounding.
    pub contraction_excess: f64,
}

#[derive(Debug, Clone)]
pub struct VerificationReport {
    pub t_norm: f64,
    pub reassembly_residual: f64,
    pub rows: Vec<RoundResidual>,
}

impl VerificationReport {
    fn max_of(&self, f: impl Fn(&RoundResidual) -> f64) -> f64 {
        self.rows.iter().map(f).fold(0.0, f64::max)
    }

    pub fn max_centroid_residual(&self) -> f64 {
        self.max_of(|r| r.centroid_x.max(r.centroid_y))
    }

    pub fn max_error_residual(&self) -> f64 {
        self.max_of(|r| r.error_x.max(r.error_y))
    }

    pub fn max_contraction_excess(&self) -> f64 {
        self.rows.iter().map(|r| r.contraction_excess).fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn passed(&self, centroid_tol: f64, error_tol: f64, contraction_tol: f64) -> bool {
        self.max_centroid_residual() <= centroid_tol
            && self.max_error_residual() <= error_tol
            && self.max_contraction_excess() <= contraction_tol
    }

    /// Per-round residual table.
    pub fn write_text<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "{self}")
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "# |T| = {:e}", self.t_norm)?;
        writeln!(f, "# reassembly residual = {:e}", self.reassembly_residual)?;
        writeln!(f, "# max centroid residual = {:e}", self.max_centroid_residual())?;
        writeln!(f, "# max error residual = {:e}", self.max_error_residual())?;
        writeln!(f, "# max contraction excess = {:e}", self.max_contraction_excess())?;
        writeln!(f, "round\tcentroid_x\tcentroid_y\terror_x\terror_y\terror_norm\tcontraction_excess")?;
        for r in &self.rows {
            writeln!(
                f,
                "{}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}\t{:e}",
                r.round, r.centroid_x, r.centroid_y, r.error_x, r.error_y, r.error_norm, r.contraction_excess
            )?;
        }
        Ok(())
    }
}

/// Checks a recorded general-form run against the transformed recursion,
/// round by round.
pub fn verify_transformed_dynamics(
    traj: &Trajectory,
    s: &StrategySet,
    fact: &TransitionFactorization,
    mu_x: f64,
    mu_y: f64,
    tau: f64,
) -> Result<VerificationReport> {
    let rounds = traj.x.len();
    if [traj.y.len(), traj.dx.len(), traj.dy.len(), traj.mx.len(), traj.my.len()].iter().any(|&l| l != rounds) {
        return Err(Error::ShapeMismatch("trajectory fields have different lengths".into()));
    }
    let errors: Vec<CoupledError> = (0..rounds)
        .map(|i| {
            compute_error_vectors(
                s, fact, &traj.x[i], &traj.y[i], &traj.dx[i], &traj.dy[i], &traj.mx[i], &traj.my[i], mu_x, mu_y, tau,
                tau,
            )
        })
        .collect::<Result<_>>()?;

    let mut rows = Vec::new();
    for i in 0..rounds.saturating_sub(1) {
        let cx = centroid(&traj.x[i]) - centroid(&traj.mx[i]) * mu_x;
        let cy = centroid(&traj.y[i]) + centroid(&traj.my[i]) * mu_y;
        let centroid_x = (centroid(&traj.x[i + 1]) - cx).amax();
        let centroid_y = (centroid(&traj.y[i + 1]) - cy).amax();

        let drive_x = fact.driving_term(&traj.mx[i], &traj.mx[i + 1]) * (mu_x / tau);
        let drive_y = fact.driving_term(&traj.my[i], &traj.my[i + 1]) * (mu_y / tau);
        let free_x = &fact.t * &errors[i].e_x;
        let free_y = &fact.t * &errors[i].e_y;
        let error_x = (&errors[i + 1].e_x - (&free_x - &drive_x)).norm();
        let error_y = (&errors[i + 1].e_y - (&free_y + &drive_y)).norm();

        let homog_next = ((&errors[i + 1].e_x + &drive_x).norm_squared()
            + (&errors[i + 1].e_y - &drive_y).norm_squared())
        .sqrt();
        let contraction_excess = homog_next - fact.t_norm * errors[i].norm();

        rows.push(RoundResidual {
            round: i,
            centroid_x,
            centroid_y,
            error_x,
            error_y,
            error_norm: errors[i].norm(),
            contraction_excess,
        });
    }
    Ok(VerificationReport { t_norm: fact.t_norm, reassembly_residual: fact.reassembly_residual, rows })
}
