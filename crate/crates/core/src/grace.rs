//! GRACE: a Bernoulli switch between a large-batch gradient and a corrected
//! momentum update on a small minibatch.
//!
//! With probability `p` an agent refreshes its estimate with a large batch;
//! otherwise
//!
//! ```text
//! g <- (1 - beta) [g_prev - (1/b) sum correction] + (beta / b) sum grad Q(z_new; xi)
//! ```
//!
//! where the correction is either the gradient difference at the previous
//! and current points on the same sample, or its Hessian-vector surrogate.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng;

use crate::error::{Error, Result};
use crate::problems::MinimaxProblem;

/// How many samples a batch draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BatchSize {
    /// The whole local dataset. Not available to streaming agents.
    Full,
    Samples(usize),
}

impl fmt::Display for BatchSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BatchSize::Full => f.write_str("full"),
            BatchSize::Samples(n) => write!(f, "{n}"),
        }
    }
}

impl FromStr for BatchSize {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("full") {
            return Ok(BatchSize::Full);
        }
        match s.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(BatchSize::Samples(n)),
            _ => Err(Error::InvalidParameter(format!("batch size must be a positive integer or `full`, got `{s}`"))),
        }
    }
}

/// Drift correction applied to the running estimate on the minibatch branch.
/// Gradient-difference and Hessian corrections are alternatives; there is no
/// way to request both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Correction {
    /// Plain (heavy-ball) momentum.
    #[default]
    None,
    /// `grad Q(z_prev; xi) - grad Q(z_new; xi)` on the same sample.
    GradientDifference,
    /// `H(z_new; xi) (z_prev - z_new)`.
    Hessian,
}

impl Correction {
    /// Maps the `(gamma1, gamma2)` switches to a correction.
    pub fn from_gammas(gamma1: u8, gamma2: u8) -> Result<Self> {
        match (gamma1, gamma2) {
            (0, 0) => Ok(Correction::None),
            (1, 0) => Ok(Correction::GradientDifference),
            (0, 1) => Ok(Correction::Hessian),
            (1, 1) => Err(Error::InvalidParameter("gamma1 and gamma2 cannot both be 1".into())),
            _ => Err(Error::InvalidParameter(format!("gammas must be 0 or 1, got ({gamma1}, {gamma2})"))),
        }
    }

    pub fn gammas(self) -> (u8, u8) {
        match self {
            Correction::None => (0, 0),
            Correction::GradientDifference => (1, 0),
            Correction::Hessian => (0, 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraceConfig {
    /// Probability of the large-batch branch.
    pub p: f64,
    pub beta_x: f64,
    pub beta_y: f64,
    /// Minibatch size of the momentum branch.
    pub b: usize,
    /// Large batch. Agents with a finite dataset always use the full batch.
    pub big_batch: BatchSize,
    /// Warm-up batch.
    pub b0: BatchSize,
    pub correction: Correction,
    /// Draw the x- and y-minibatches independently (ablation; doubles the
    /// sample count of that branch).
    pub independent_batches: bool,
}

impl Default for GraceConfig {
    fn default() -> Self {
        specialize(EstimatorName::Grace, 1)
    }
}

impl GraceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::InvalidParameter(format!("p must lie in [0, 1], got {}", self.p)));
        }
        for (name, beta) in [("beta_x", self.beta_x), ("beta_y", self.beta_y)] {
            if !(0.0..=1.0).contains(&beta) {
                return Err(Error::InvalidParameter(format!("{name} must lie in [0, 1], got {beta}")));
            }
        }
        if self.b == 0 {
            return Err(Error::InvalidParameter("minibatch size b must be >= 1".into()));
        }
        for (name, batch) in [("big_batch", self.big_batch), ("b0", self.b0)] {
            if batch == BatchSize::Samples(0) {
                return Err(Error::InvalidParameter(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    /// Checks the configuration against what `problem` can provide.
    pub fn validate_for<P: MinimaxProblem>(&self, problem: &P) -> Result<()> {
        self.validate()?;
        if self.correction == Correction::Hessian && !problem.has_hessian() {
            return Err(Error::MissingHessian);
        }
        for k in 0..problem.agent_count() {
            match problem.local_size(k) {
                Some(n) => {
                    if let BatchSize::Samples(b0) = self.b0 {
                        if b0 > n {
                            return Err(Error::InvalidParameter(format!(
                                "b0 = {b0} exceeds the {n} samples of agent {k}"
                            )));
                        }
                    }
                }
                None => {
                    if self.b0 == BatchSize::Full || self.big_batch == BatchSize::Full {
                        return Err(Error::InvalidParameter(format!(
                            "agent {k} streams samples; b0 and big_batch need explicit sizes"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Samples consumed by one minibatch-branch step.
    pub fn minibatch_cost(&self) -> u64 {
        let b = self.b as u64;
        if self.independent_batches { 2 * b } else { b }
    }
}

/// Named estimators obtained by fixing GRACE hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorName {
    Gda,
    Sgda,
    HeavyBall,
    Storm,
    HcMomentum,
    LooplessSarah,
    Page,
    Grace,
}

impl EstimatorName {
    pub const ALL: [EstimatorName; 8] = [
        EstimatorName::Gda,
        EstimatorName::Sgda,
        EstimatorName::HeavyBall,
        EstimatorName::Storm,
        EstimatorName::HcMomentum,
        EstimatorName::LooplessSarah,
        EstimatorName::Page,
        EstimatorName::Grace,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorName::Gda => "GDA",
            EstimatorName::Sgda => "SGDA",
            EstimatorName::HeavyBall => "HB",
            EstimatorName::Storm => "STORM",
            EstimatorName::HcMomentum => "HC_MOMENTUM",
            EstimatorName::LooplessSarah => "LOOPLESS_SARAH",
            EstimatorName::Page => "PAGE",
            EstimatorName::Grace => "GRACE",
        }
    }
}

impl fmt::Display for EstimatorName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        EstimatorName::ALL
            .into_iter()
            .find(|e| e.name() == norm)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown estimator `{s}`")))
    }
}

/// Hyperparameters of a named estimator. `n` is the local dataset size (or
/// the large-batch size for streaming agents); only PAGE depends on it.
pub fn specialize(name: EstimatorName, n: usize) -> GraceConfig {
    let base = GraceConfig {
        p: 0.0,
        beta_x: 0.0,
        beta_y: 0.0,
        b: 1,
        big_batch: BatchSize::Full,
        b0: BatchSize::Full,
        correction: Correction::None,
        independent_batches: false,
    };
    let beta = |v: f64| GraceConfig { beta_x: v, beta_y: v, ..base.clone() };
    match name {
        EstimatorName::Gda => GraceConfig { p: 1.0, ..base },
        EstimatorName::Sgda => beta(1.0),
        EstimatorName::HeavyBall => beta(0.1),
        EstimatorName::Storm => GraceConfig { correction: Correction::GradientDifference, ..beta(0.01) },
        EstimatorName::HcMomentum => GraceConfig { correction: Correction::Hessian, ..beta(0.01) },
        EstimatorName::LooplessSarah => GraceConfig { p: 0.1, correction: Correction::GradientDifference, ..base },
        EstimatorName::Page => GraceConfig {
            p: 0.1,
            b: ((n as f64).sqrt().round() as usize).max(1),
            correction: Correction::GradientDifference,
            ..base
        },
        EstimatorName::Grace => GraceConfig {
            p: 0.1,
            b: 5,
            correction: Correction::GradientDifference,
            ..beta(0.01)
        },
    }
}

/// Running gradient estimates of one agent.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    pub g_x: DVector<f64>,
    pub g_y: DVector<f64>,
    pub prev_x: DVector<f64>,
    pub prev_y: DVector<f64>,
    /// Samples drawn so far.
    pub oracle_count: u64,
}

fn batch_average<P: MinimaxProblem, R: Rng + ?Sized>(
    problem: &P,
    k: usize,
    x: &DVector<f64>,
    y: &DVector<f64>,
    batch: BatchSize,
    rng: &mut R,
) -> (DVector<f64>, DVector<f64>, u64) {
    match (batch, problem.local_size(k)) {
        (BatchSize::Full, Some(n)) => {
            let (gx, gy) = problem.local_grad(k, x, y);
            (gx, gy, n as u64)
        }
        (BatchSize::Samples(m), Some(n)) if m == n => {
            let (gx, gy) = problem.local_grad(k, x, y);
            (gx, gy, n as u64)
        }
        (BatchSize::Samples(m), _) => {
            let (d1, d2) = problem.dims();
            let mut sx = DVector::zeros(d1);
            let mut sy = DVector::zeros(d2);
            for _ in 0..m {
                let s = problem.draw_sample(k, rng);
                let (gx, gy) = problem.grad_loss(k, x, y, &s);
                sx += gx;
                sy += gy;
            }
            let inv = 1.0 / m as f64;
            (sx * inv, sy * inv, m as u64)
        }
        (BatchSize::Full, None) => unreachable!("validated: streaming agents need explicit batch sizes"),
    }
}

/// Initial estimate from the `b0` warm-up batch at `(x0, y0)`.
pub fn warm_start<P: MinimaxProblem, R: Rng + ?Sized>(
    problem: &P,
    k: usize,
    x0: &DVector<f64>,
    y0: &DVector<f64>,
    config: &GraceConfig,
    rng: &mut R,
) -> Result<EstimatorState> {
    if let (BatchSize::Samples(b0), Some(n)) = (config.b0, problem.local_size(k)) {
        if b0 > n {
            return Err(Error::InvalidParameter(format!("b0 = {b0} exceeds the {n} samples of agent {k}")));
        }
    }
    if config.b0 == BatchSize::Full && problem.local_size(k).is_none() {
        return Err(Error::InvalidParameter("streaming agent needs an explicit b0".into()));
    }
    let (g_x, g_y, count) = batch_average(problem, k, x0, y0, config.b0, rng);
    Ok(EstimatorState { g_x, g_y, prev_x: x0.clone(), prev_y: y0.clone(), oracle_count: count })
}

/// Sums over one minibatch of the fresh gradients and of the corrections.
struct MinibatchSums {
    fresh: DVector<f64>,
    correction: DVector<f64>,
}

fn minibatch_sums<P: MinimaxProblem, R: Rng + ?Sized>(
    problem: &P,
    k: usize,
    state: &EstimatorState,
    x: &DVector<f64>,
    y: &DVector<f64>,
    config: &GraceConfig,
    rng: &mut R,
) -> Result<[MinibatchSums; 2]> {
    let (d1, d2) = problem.dims();
    let mut out = [
        MinibatchSums { fresh: DVector::zeros(d1), correction: DVector::zeros(d1) },
        MinibatchSums { fresh: DVector::zeros(d2), correction: DVector::zeros(d2) },
    ];
    let dx = &state.prev_x - x;
    let dy = &state.prev_y - y;
    // One pass when both variables share the batch, otherwise one per variable.
    let passes: &[Option<usize>] = if config.independent_batches { &[Some(0), Some(1)] } else { &[None] };
    for &only in passes {
        for _ in 0..config.b {
            let s = problem.draw_sample(k, rng);
            let (gx, gy) = problem.grad_loss(k, x, y, &s);
            let corr = match config.correction {
                Correction::None => None,
                Correction::GradientDifference => {
                    let (px, py) = problem.grad_loss(k, &state.prev_x, &state.prev_y, &s);
                    Some((px - &gx, py - &gy))
                }
                Correction::Hessian => Some(
                    problem
                        .hessian_product(k, x, y, &s, &dx, &dy)
                        .ok_or(Error::MissingHessian)?,
                ),
            };
            let parts = [(gx, corr.as_ref().map(|c| &c.0)), (gy, corr.as_ref().map(|c| &c.1))];
            for (w, (fresh, c)) in parts.into_iter().enumerate() {
                if only.is_some_and(|o| o != w) {
                    continue;
                }
                out[w].fresh += fresh;
                if let Some(c) = c {
                    out[w].correction += c;
                }
            }
        }
    }
    Ok(out)
}

fn momentum_update(g_prev: &DVector<f64>, sums: &MinibatchSums, beta: f64, b: usize, corrected: bool) -> DVector<f64> {
    let fresh = &sums.fresh * (beta / b as f64);
    if beta == 1.0 {
        return fresh;
    }
    let history = if corrected { g_prev - &sums.correction * (1.0 / b as f64) } else { g_prev.clone() };
    history * (1.0 - beta) + fresh
}

/// Advances one agent's estimate to the new point `(x, y)`. `pi` is the
/// network-wide Bernoulli draw of this round.
#[allow(clippy::too_many_arguments)]
pub fn grace_step<P: MinimaxProblem, R: Rng + ?Sized>(
    state: &mut EstimatorState,
    config: &GraceConfig,
    problem: &P,
    k: usize,
    x: &DVector<f64>,
    y: &DVector<f64>,
    pi: bool,
    rng: &mut R,
) -> Result<()> {
    if config.correction == Correction::Hessian && !problem.has_hessian() {
        return Err(Error::MissingHessian);
    }
    if pi {
        let (gx, gy, count) = batch_average(problem, k, x, y, large_batch(config, problem, k)?, rng);
        state.g_x = gx;
        state.g_y = gy;
        state.oracle_count += count;
    } else {
        let [sx, sy] = minibatch_sums(problem, k, state, x, y, config, rng)?;
        let corrected = config.correction != Correction::None;
        state.g_x = momentum_update(&state.g_x, &sx, config.beta_x, config.b, corrected);
        state.g_y = momentum_update(&state.g_y, &sy, config.beta_y, config.b, corrected);
        state.oracle_count += config.minibatch_cost();
    }
    state.prev_x.copy_from(x);
    state.prev_y.copy_from(y);
    Ok(())
}

fn large_batch<P: MinimaxProblem>(config: &GraceConfig, problem: &P, k: usize) -> Result<BatchSize> {
    match problem.local_size(k) {
        Some(_) => Ok(BatchSize::Full),
        None if config.big_batch == BatchSize::Full => {
            Err(Error::InvalidParameter("streaming agent needs an explicit large batch".into()))
        }
        None => Ok(config.big_batch),
    }
}

/// Samples consumed by the large-batch branch for agent `k`.
pub fn large_batch_cost<P: MinimaxProblem>(config: &GraceConfig, problem: &P, k: usize) -> Result<u64> {
    Ok(match (large_batch(config, problem, k)?, problem.local_size(k)) {
        (BatchSize::Full, Some(n)) => n as u64,
        (BatchSize::Samples(m), _) => m as u64,
        (BatchSize::Full, None) => unreachable!(),
    })
}
