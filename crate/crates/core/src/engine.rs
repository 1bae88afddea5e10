//! DAMA driver: gradient estimation with GRACE followed by one communication
//! round of a unified strategy, either in the general primal-dual form or in
//! the node-level difference form.
//!
//! Agent vectors are stacked as the rows of a `K x d` matrix so that a block
//! product `(M ⊗ I_d) X` is just `M * X`.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grace::{grace_step, warm_start, EstimatorState, GraceConfig};
use crate::metrics::{record, RunLog, RunStatus};
use crate::problems::MinimaxProblem;
use crate::strategy::{build_strategy, StrategyKind, StrategySet};
use crate::topology::MixingMatrix;

pub const DEFAULT_DIVERGENCE_THRESHOLD: f64 = 1e12;

fn check_blocks(x: &DMatrix<f64>, m: &DMatrix<f64>, what: &str) -> Result<()> {
    if x.shape() != m.shape() {
        return Err(Error::ShapeMismatch(format!("{what}: iterate {:?} vs gradient {:?}", x.shape(), m.shape())));
    }
    Ok(())
}

/// `X+ = A(C X - mu_x Mx) - B Dx`, `Y+ = A(C Y + mu_y My) - B Dy`,
/// `D+ = D + B X+`, with zero initial duals.
#[derive(Debug, Clone)]
pub struct GeneralForm {
    strategy: StrategySet,
    pub dx: DMatrix<f64>,
    pub dy: DMatrix<f64>,
}

impl GeneralForm {
    pub fn new(strategy: StrategySet, d1: usize, d2: usize) -> Self {
        let k = strategy.a.nrows();
        Self { strategy, dx: DMatrix::zeros(k, d1), dy: DMatrix::zeros(k, d2) }
    }

    pub fn strategy(&self) -> &StrategySet {
        &self.strategy
    }

    pub fn step(
        &mut self,
        x: &mut DMatrix<f64>,
        y: &mut DMatrix<f64>,
        mu_x: f64,
        mu_y: f64,
        mx: &DMatrix<f64>,
        my: &DMatrix<f64>,
    ) -> Result<()> {
        check_blocks(x, mx, "x")?;
        check_blocks(y, my, "y")?;
        if x.nrows() != self.dx.nrows() || x.ncols() != self.dx.ncols() || y.shape() != self.dy.shape() {
            return Err(Error::ShapeMismatch("state does not match the dual blocks".into()));
        }
        let s = &self.strategy;
        let xn = &s.a * (&s.c * &*x - mx * mu_x) - &s.b * &self.dx;
        let yn = &s.a * (&s.c * &*y + my * mu_y) - &s.b * &self.dy;
        self.dx += &s.b * &xn;
        self.dy += &s.b * &yn;
        *x = xn;
        *y = yn;
        Ok(())
    }
}

/// Neighbor-sum implementation of the difference recursions, with
/// `x_{-1} = x_0` and `g_{-1} = 0`.
///
/// ATC-GT keeps explicit trackers `m = W(m_prev - g_prev + g)`,
/// `x+ = W(x - mu m)`. The tracking variants agree with the general form
/// only from a consensus start; ED and EXTRA agree from any start.
#[derive(Debug, Clone)]
pub struct NodeLevelForm {
    kind: StrategyKind,
    mixing: MixingMatrix,
    prev: Option<[DMatrix<f64>; 4]>,
    /// ATC-GT trackers.
    pub tracker_x: Option<DMatrix<f64>>,
    pub tracker_y: Option<DMatrix<f64>>,
}

impl NodeLevelForm {
    pub fn new(kind: StrategyKind, mixing: MixingMatrix) -> Self {
        Self { kind, mixing, prev: None, tracker_x: None, tracker_y: None }
    }

    /// `sum_l w_kl v_l` for every agent `k`.
    fn combine(&self, v: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(v.nrows(), v.ncols());
        for k in 0..v.nrows() {
            for &(l, w) in self.mixing.neighbors(k) {
                let mut row = out.row_mut(k);
                row += v.row(l) * w;
            }
        }
        out
    }

    pub fn step(
        &mut self,
        x: &mut DMatrix<f64>,
        y: &mut DMatrix<f64>,
        mu_x: f64,
        mu_y: f64,
        mx: &DMatrix<f64>,
        my: &DMatrix<f64>,
    ) -> Result<()> {
        check_blocks(x, mx, "x")?;
        check_blocks(y, my, "y")?;
        if x.nrows() != self.mixing.size() {
            return Err(Error::ShapeMismatch(format!("{} agents, mixing matrix of size {}", x.nrows(), self.mixing.size())));
        }
        let [x_prev, y_prev, mx_prev, my_prev] = match self.prev.take() {
            Some(p) => p,
            None => [x.clone(), y.clone(), DMatrix::zeros(mx.nrows(), mx.ncols()), DMatrix::zeros(my.nrows(), my.ncols())],
        };
        let xn = self.update(x, &x_prev, mx, &mx_prev, -mu_x, true);
        let yn = self.update(y, &y_prev, my, &my_prev, mu_y, false);
        self.prev = Some([x.clone(), y.clone(), mx.clone(), my.clone()]);
        *x = xn;
        *y = yn;
        Ok(())
    }

    /// One variable; `step` already carries the sign (`-mu_x` or `+mu_y`).
    fn update(
        &mut self,
        x: &DMatrix<f64>,
        x_prev: &DMatrix<f64>,
        g: &DMatrix<f64>,
        g_prev: &DMatrix<f64>,
        step: f64,
        is_x: bool,
    ) -> DMatrix<f64> {
        let dg = g - g_prev;
        match self.kind {
            // W(2x - x_prev + step (g - g_prev))
            StrategyKind::Ed => self.combine(&(x * 2.0 - x_prev + dg * step)),
            // W(2x - x_prev) + step (g - g_prev)
            StrategyKind::Extra => self.combine(&(x * 2.0 - x_prev)) + dg * step,
            StrategyKind::AtcGt => {
                let slot = if is_x { &mut self.tracker_x } else { &mut self.tracker_y };
                let m_prev = slot.take().unwrap_or_else(|| DMatrix::zeros(g.nrows(), g.ncols()));
                let m = self.combine(&(m_prev + dg));
                let xn = self.combine(&(x + &m * step));
                if is_x {
                    self.tracker_x = Some(m);
                } else {
                    self.tracker_y = Some(m);
                }
                xn
            }
            // W(2x - W x_prev + step dg)
            StrategyKind::SemiAtcGt => self.combine(&(x * 2.0 - self.combine(x_prev) + dg * step)),
            // W(2x - W x_prev) + step dg
            StrategyKind::NonAtcGt => self.combine(&(x * 2.0 - self.combine(x_prev))) + dg * step,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum UpdateForm {
    #[default]
    General,
    NodeLevel,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub enum InitialPoint {
    #[default]
    Zero,
    /// Every agent starts at the same point.
    Consensus { x: nalgebra::DVector<f64>, y: nalgebra::DVector<f64> },
    /// Explicit `K x d1` and `K x d2` blocks.
    PerAgent { x: DMatrix<f64>, y: DMatrix<f64> },
    /// Independent `N(0, scale^2)` entries per agent.
    Random { scale: f64, seed: u64 },
}

impl InitialPoint {
    pub fn materialize(&self, k: usize, d1: usize, d2: usize) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        match self {
            InitialPoint::Zero => Ok((DMatrix::zeros(k, d1), DMatrix::zeros(k, d2))),
            InitialPoint::Consensus { x, y } => {
                if x.len() != d1 || y.len() != d2 {
                    return Err(Error::ShapeMismatch("consensus initial point has wrong dimensions".into()));
                }
                Ok((DMatrix::from_fn(k, d1, |_, j| x[j]), DMatrix::from_fn(k, d2, |_, j| y[j])))
            }
            InitialPoint::PerAgent { x, y } => {
                if x.shape() != (k, d1) || y.shape() != (k, d2) {
                    return Err(Error::ShapeMismatch("per-agent initial blocks have wrong shape".into()));
                }
                Ok((x.clone(), y.clone()))
            }
            InitialPoint::Random { scale, seed } => {
                let normal = Normal::new(0.0, *scale)
                    .map_err(|e| Error::InvalidParameter(format!("initial scale: {e}")))?;
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let x = DMatrix::from_fn(k, d1, |_, _| normal.sample(&mut rng));
                let y = DMatrix::from_fn(k, d2, |_, _| normal.sample(&mut rng));
                Ok((x, y))
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mu_x: f64,
    pub mu_y: f64,
    pub rounds: usize,
    pub strategy: StrategyKind,
    pub grace: GraceConfig,
    pub form: UpdateForm,
    pub estimator_seed: u64,
    pub bernoulli_seed: u64,
    /// Record every `cadence`-th round (the first and last are always kept).
    pub cadence: usize,
    pub divergence_threshold: f64,
    pub init: InitialPoint,
    /// Fill `wallclock_us`; off by default so logs are reproducible byte for byte.
    pub record_wallclock: bool,
    /// Keep every state and gradient block (general form only), for the
    /// transformed-recursion check.
    pub record_trajectory: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            mu_x: 1e-3,
            mu_y: 1e-2,
            rounds: 100,
            strategy: StrategyKind::Ed,
            grace: GraceConfig::default(),
            form: UpdateForm::General,
            estimator_seed: 0,
            bernoulli_seed: 1,
            cadence: 1,
            divergence_threshold: DEFAULT_DIVERGENCE_THRESHOLD,
            init: InitialPoint::Zero,
            record_wallclock: false,
            record_trajectory: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, mu) in [("mu_x", self.mu_x), ("mu_y", self.mu_y)] {
            if !(mu >= 0.0 && mu.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name} must be finite and >= 0, got {mu}")));
            }
        }
        if self.cadence == 0 {
            return Err(Error::InvalidParameter("cadence must be >= 1".into()));
        }
        if !(self.divergence_threshold > 0.0) {
            return Err(Error::InvalidParameter("divergence threshold must be positive".into()));
        }
        self.grace.validate()
    }
}

/// States `X_i, Y_i, Dx_i, Dy_i` and gradient blocks `Mx_i, My_i` for every
/// round `i` of a general-form run.
#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub x: Vec<DMatrix<f64>>,
    pub y: Vec<DMatrix<f64>>,
    pub dx: Vec<DMatrix<f64>>,
    pub dy: Vec<DMatrix<f64>>,
    pub mx: Vec<DMatrix<f64>>,
    pub my: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub log: RunLog,
    pub x: DMatrix<f64>,
    pub y: DMatrix<f64>,
    pub estimators: Vec<EstimatorState>,
    pub trajectory: Option<Trajectory>,
}

enum Form {
    General(GeneralForm),
    NodeLevel(NodeLevelForm),
    Centralized,
}

impl Form {
    fn step(
        &mut self,
        x: &mut DMatrix<f64>,
        y: &mut DMatrix<f64>,
        mu_x: f64,
        mu_y: f64,
        mx: &DMatrix<f64>,
        my: &DMatrix<f64>,
    ) -> Result<()> {
        match self {
            Form::General(f) => f.step(x, y, mu_x, mu_y, mx, my),
            Form::NodeLevel(f) => f.step(x, y, mu_x, mu_y, mx, my),
            Form::Centralized => {
                *x -= mx * mu_x;
                *y += my * mu_y;
                Ok(())
            }
        }
    }
}

/// Per-agent estimator stream `k` under `seed`.
pub fn agent_rng(seed: u64, k: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    rng
}

fn gradient_blocks(states: &[EstimatorState]) -> (DMatrix<f64>, DMatrix<f64>) {
    let k = states.len();
    let d1 = states[0].g_x.len();
    let d2 = states[0].g_y.len();
    (
        DMatrix::from_fn(k, d1, |a, j| states[a].g_x[j]),
        DMatrix::from_fn(k, d2, |a, j| states[a].g_y[j]),
    )
}

/// Runs warm start plus `cfg.rounds` rounds over the network `mixing`.
///
/// A single agent (`MixingMatrix::single_agent()`) runs the centralized
/// two-time-scale update. Divergence is not an error: the log is cut at the
/// offending round and its status says so.
pub fn run<P: MinimaxProblem>(problem: &P, mixing: &MixingMatrix, cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    cfg.grace.validate_for(problem)?;
    let k = problem.agent_count();
    if mixing.size() != k {
        return Err(Error::ShapeMismatch(format!("problem has {k} agents, mixing matrix has size {}", mixing.size())));
    }
    if cfg.mu_x > cfg.mu_y {
        log::warn!("mu_x = {} exceeds mu_y = {}; the two-time-scale analysis assumes mu_x <= mu_y", cfg.mu_x, cfg.mu_y);
    }
    let (d1, d2) = problem.dims();
    let (mut x, mut y) = cfg.init.materialize(k, d1, d2)?;

    let mut form = if k == 1 {
        Form::Centralized
    } else {
        match cfg.form {
            UpdateForm::General => Form::General(GeneralForm::new(build_strategy(cfg.strategy, mixing), d1, d2)),
            UpdateForm::NodeLevel => Form::NodeLevel(NodeLevelForm::new(cfg.strategy, mixing.clone())),
        }
    };
    let mut trajectory = (cfg.record_trajectory && matches!(form, Form::General(_))).then(Trajectory::default);

    let start = Instant::now();
    let clock = |on: bool| if on { start.elapsed().as_micros() as u64 } else { 0 };

    let mut rngs: Vec<ChaCha8Rng> = (0..k).map(|a| agent_rng(cfg.estimator_seed, a)).collect();
    let mut bernoulli = ChaCha8Rng::seed_from_u64(cfg.bernoulli_seed);
    let mut states = Vec::with_capacity(k);
    for a in 0..k {
        let xa = x.row(a).transpose();
        let ya = y.row(a).transpose();
        states.push(warm_start(problem, a, &xa, &ya, &cfg.grace, &mut rngs[a])?);
    }
    let counts = |s: &[EstimatorState]| s.iter().map(|e| e.oracle_count).collect::<Vec<_>>();

    let mut log = RunLog::new();
    log.rows.push(record(problem, 0, &x, &y, &counts(&states), false, clock(cfg.record_wallclock)));
    let (mut mx, mut my) = gradient_blocks(&states);
    let snapshot = |t: &mut Trajectory, form: &Form, x: &DMatrix<f64>, y: &DMatrix<f64>, mx: &DMatrix<f64>, my: &DMatrix<f64>| {
        if let Form::General(g) = form {
            t.x.push(x.clone());
            t.y.push(y.clone());
            t.dx.push(g.dx.clone());
            t.dy.push(g.dy.clone());
            t.mx.push(mx.clone());
            t.my.push(my.clone());
        }
    };
    if let Some(t) = trajectory.as_mut() {
        snapshot(t, &form, &x, &y, &mx, &my);
    }

    for round in 1..=cfg.rounds {
        form.step(&mut x, &mut y, cfg.mu_x, cfg.mu_y, &mx, &my)?;
        let norm = x.norm().max(y.norm());
        if !norm.is_finite() || norm > cfg.divergence_threshold {
            log::warn!("diverged at round {round}: iterate norm {norm:e}");
            log.status = RunStatus::Diverged { round, norm };
            break;
        }
        let pi = bernoulli.random_bool(cfg.grace.p);
        for a in 0..k {
            let xa = x.row(a).transpose();
            let ya = y.row(a).transpose();
            grace_step(&mut states[a], &cfg.grace, problem, a, &xa, &ya, pi, &mut rngs[a])?;
        }
        (mx, my) = gradient_blocks(&states);
        if let Some(t) = trajectory.as_mut() {
            snapshot(t, &form, &x, &y, &mx, &my);
        }
        if round % cfg.cadence == 0 || round == cfg.rounds {
            log.rows.push(record(problem, round, &x, &y, &counts(&states), pi, clock(cfg.record_wallclock)));
        }
    }

    Ok(RunOutput { log, x, y, estimators: states, trajectory })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grace::{specialize, EstimatorName};
    use crate::problems::BilinearSaddle;
    use crate::topology::{build_graph, GraphKind};

    fn ring(k: usize) -> MixingMatrix {
        MixingMatrix::metropolis(&build_graph(GraphKind::Ring, k, 0).unwrap()).unwrap()
    }

    #[test]
    fn uniform_ed_first_step_broadcasts_centroid() {
        let w = MixingMatrix::uniform(4).unwrap();
        let mut f = GeneralForm::new(build_strategy(StrategyKind::Ed, &w), 2, 1);
        let mut x = DMatrix::from_fn(4, 2, |i, j| (i * 2 + j) as f64);
        let mut y = DMatrix::zeros(4, 1);
        let mx = DMatrix::from_fn(4, 2, |i, j| (i as f64 - j as f64) * 0.5);
        let my = DMatrix::zeros(4, 1);
        let expect = crate::metrics::centroid(&(&x - &mx * 0.1));
        f.step(&mut x, &mut y, 0.1, 0.1, &mx, &my).unwrap();
        for r in x.row_iter() {
            assert!((r.transpose() - &expect).amax() < 1e-12);
        }
    }

    #[test]
    fn zero_steps_keep_consensus_fixed() {
        let w = ring(5);
        for kind in StrategyKind::ALL {
            let mut f = GeneralForm::new(build_strategy(kind, &w), 3, 2);
            let x0 = DMatrix::from_fn(5, 3, |_, j| j as f64 + 0.5);
            let y0 = DMatrix::from_fn(5, 2, |_, j| -(j as f64));
            let (mut x, mut y) = (x0.clone(), y0.clone());
            let mx = DMatrix::from_fn(5, 3, |i, j| (i + j) as f64);
            let my = DMatrix::from_fn(5, 2, |i, j| (i * j) as f64);
            for _ in 0..5 {
                f.step(&mut x, &mut y, 0.0, 0.0, &mx, &my).unwrap();
            }
            assert!((&x - &x0).amax() < 1e-12, "{kind}");
            assert!((&y - &y0).amax() < 1e-12, "{kind}");
        }
    }

    #[test]
    fn node_level_first_steps() {
        let w = ring(4);
        let wm = w.matrix().clone();
        let x0 = DMatrix::from_fn(4, 2, |i, j| ((i + 1) * (j + 2)) as f64);
        let y0 = DMatrix::zeros(4, 1);
        let g = DMatrix::from_fn(4, 2, |i, j| (i as f64) - (j as f64));
        let gy = DMatrix::zeros(4, 1);

        let mut ed = NodeLevelForm::new(StrategyKind::Ed, w.clone());
        let (mut x, mut y) = (x0.clone(), y0.clone());
        ed.step(&mut x, &mut y, 0.1, 0.1, &g, &gy).unwrap();
        assert!((x - &wm * (&x0 - &g * 0.1)).amax() < 1e-12);

        let mut extra = NodeLevelForm::new(StrategyKind::Extra, w.clone());
        let (mut x, mut y) = (x0.clone(), y0.clone());
        extra.step(&mut x, &mut y, 0.1, 0.1, &g, &gy).unwrap();
        assert!((x - (&wm * &x0 - &g * 0.1)).amax() < 1e-12);
    }

    #[test]
    fn atc_trackers_constant_under_constant_gradients() {
        let w = ring(4);
        let x0 = DMatrix::from_element(4, 2, 1.0);
        let y0 = DMatrix::from_element(4, 1, -1.0);
        let g = DMatrix::zeros(4, 2);
        let gy = DMatrix::zeros(4, 1);
        let mut f = NodeLevelForm::new(StrategyKind::AtcGt, w);
        let (mut x, mut y) = (x0.clone(), y0.clone());
        for _ in 0..4 {
            f.step(&mut x, &mut y, 0.1, 0.1, &g, &gy).unwrap();
            assert!((&x - &x0).amax() < 1e-14);
            assert!(f.tracker_x.as_ref().unwrap().amax() == 0.0);
        }
    }

    #[test]
    fn zero_rounds_logs_initial_row() {
        let p = BilinearSaddle::random(3, 2, 2, 5, 1.0, 0).unwrap();
        let cfg = RunConfig { rounds: 0, grace: specialize(EstimatorName::Gda, 5), ..Default::default() };
        let out = run(&p, &ring(3), &cfg).unwrap();
        assert_eq!(out.log.rows.len(), 1);
        assert_eq!(out.log.rows[0].oracle_max, 5);
    }

    #[test]
    fn single_agent_is_centralized_gda() {
        let p = BilinearSaddle::random(1, 2, 2, 4, 1.0, 3).unwrap();
        let cfg = RunConfig {
            rounds: 3,
            mu_x: 0.1,
            mu_y: 0.2,
            grace: specialize(EstimatorName::Gda, 4),
            init: InitialPoint::Random { scale: 1.0, seed: 1 },
            ..Default::default()
        };
        let out = run(&p, &MixingMatrix::single_agent(), &cfg).unwrap();
        let (mut x, mut y) = cfg.init.materialize(1, 2, 2).unwrap();
        for _ in 0..3 {
            let (gx, gy) = p.local_grad(0, &x.row(0).transpose(), &y.row(0).transpose());
            x -= gx.transpose() * 0.1;
            y += gy.transpose() * 0.2;
        }
        assert!((out.x - x).amax() < 1e-14);
        assert!((out.y - y).amax() < 1e-14);
    }

    #[test]
    fn divergence_is_reported() {
        let p = BilinearSaddle::random(4, 2, 2, 5, 1.0, 0).unwrap();
        let cfg = RunConfig {
            rounds: 500,
            mu_x: 50.0,
            mu_y: 50.0,
            strategy: StrategyKind::Extra,
            grace: specialize(EstimatorName::Gda, 5),
            init: InitialPoint::Random { scale: 1.0, seed: 0 },
            ..Default::default()
        };
        let out = run(&p, &ring(4), &cfg).unwrap();
        match out.log.status {
            RunStatus::Diverged { round, norm } => {
                assert!(round <= 500);
                assert!(!(norm <= 1e12));
                assert_eq!(out.log.rows.len(), round);
            }
            RunStatus::Completed => panic!("expected divergence"),
        }
    }

    #[test]
    fn mismatched_network_rejected() {
        let p = BilinearSaddle::random(3, 2, 2, 5, 1.0, 0).unwrap();
        assert!(run(&p, &ring(4), &RunConfig::default()).is_err());
    }

    #[test]
    fn cadence_keeps_first_and_last() {
        let p = BilinearSaddle::random(3, 2, 2, 5, 1.0, 0).unwrap();
        let cfg = RunConfig { rounds: 10, cadence: 4, grace: specialize(EstimatorName::Storm, 5), ..Default::default() };
        let out = run(&p, &ring(3), &cfg).unwrap();
        let rounds: Vec<usize> = out.log.rows.iter().map(|r| r.round).collect();
        assert_eq!(rounds, vec![0, 4, 8, 10]);
    }
}
