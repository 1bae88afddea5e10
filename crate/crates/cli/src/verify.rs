//! Oracle suite on a shrunken copy of a spec.

use std::fmt;

use anyhow::{bail, Result};
use dama::engine::{run, InitialPoint, NodeLevelForm, RunConfig, UpdateForm};
use dama::grace::BatchSize;
use dama::strategy::{build_strategy, validate_assumption4, StrategyKind};
use dama::topology::{GraphKind, MixingMatrix};
use dama::transform::{verify_transformed_dynamics, TransitionFactorization, REASSEMBLY_TOL};

use crate::experiment::{network, with_problem, Problem};
use crate::spec::{ExperimentSpec, Fault};

pub const MAX_AGENTS: usize = 8;
pub const MAX_DIM: usize = 8;
pub const MAX_ROUNDS: usize = 100;
pub const MAX_SAMPLES: usize = 64;

pub const FORM_TOL: f64 = 1e-9;
pub const CENTROID_TOL: f64 = 1e-9;
pub const RECURSION_TOL: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Check {
    pub invariant: &'static str,
    pub scope: String,
    pub value: f64,
    /// `None` when the check is pass/fail only or has per-part tolerances.
    pub tol: Option<f64>,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {} [{}]", self.invariant, self.scope)?;
        match self.tol {
            Some(t) => write!(f, " {:.3e} <= {t:.0e}", self.value)?,
            None if self.value.is_finite() => write!(f, " {:.3e}", self.value)?,
            None => {}
        }
        if !self.detail.is_empty() {
            write!(f, " ({})", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<Check>,
    /// `‖T‖` per (strategy, topology); informative only.
    pub contraction: Vec<(StrategyKind, GraphKind, f64)>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(f, "{c}")?;
        }
        for (s, t, n) in &self.contraction {
            writeln!(f, "INFO |T| [{s}/{}] = {n:.6}", t.label())?;
        }
        let failed = self.failures().count();
        writeln!(f, "{} checks, {} failed", self.checks.len(), failed)
    }
}

/// The spec with sizes clamped to `K <= 8`, `d <= 8`, `T <= 100`, `N <= 64`.
pub fn shrink(spec: &ExperimentSpec) -> ExperimentSpec {
    let mut s = spec.clone();
    let q = &mut s.quadratic;
    q.agents = q.agents.min(MAX_AGENTS);
    q.dim_x = q.dim_x.min(MAX_DIM);
    q.dim_y = q.dim_y.min(MAX_DIM);
    q.samples_per_agent = q.samples_per_agent.map(|n| n.min(MAX_SAMPLES));
    s.rounds = s.rounds.min(MAX_ROUNDS);
    let clamp = |b: BatchSize, n: Option<usize>| match (b, n) {
        (BatchSize::Samples(m), Some(n)) => BatchSize::Samples(m.min(n)),
        (b, _) => b,
    };
    let n = q.samples_per_agent;
    for e in &mut s.estimators {
        e.config.b0 = clamp(e.config.b0, n);
        e.config.big_batch = clamp(e.config.big_batch, n);
    }
    s
}

/// A random point shared by every agent.
fn consensus_init(seed: u64, d1: usize, d2: usize) -> Result<InitialPoint> {
    let (x, y) = InitialPoint::Random { scale: 1.0, seed }.materialize(1, d1, d2)?;
    Ok(InitialPoint::Consensus { x: x.row(0).transpose(), y: y.row(0).transpose() })
}

/// Runs the suite on `shrink(spec)`: mixing-matrix validity, Assumption 4,
/// form equivalence and the transformed recursion for all five strategies
/// on every topology and estimator of the spec.
pub fn verify(spec: &ExperimentSpec) -> Result<VerifyReport> {
    let spec = shrink(spec);
    let problem = Problem::build(&spec)?;
    let agents = problem.agent_count();
    if agents < 2 {
        bail!("verify needs at least two agents");
    }
    let (d1, d2) = (spec.quadratic.dim_x, spec.quadratic.dim_y);
    let mut report = VerifyReport::default();

    for &topology in &spec.topologies {
        let built = network(&spec, topology, agents)?;
        let mut raw = built.matrix().clone();
        if spec.inject == Some(Fault::CorruptMixing) {
            raw[(0, 1)] += 0.05;
        }
        let w = match MixingMatrix::new(raw) {
            Ok(w) => {
                report.checks.push(Check {
                    invariant: "mixing-matrix",
                    scope: topology.label().into(),
                    value: f64::NAN,
                    tol: None,
                    passed: true,
                    detail: String::new(),
                });
                w
            }
            Err(e) => {
                report.checks.push(Check {
                    invariant: "mixing-matrix",
                    scope: topology.label().into(),
                    value: f64::NAN,
                    tol: None,
                    passed: false,
                    detail: e.to_string(),
                });
                continue;
            }
        };

        for kind in StrategyKind::ALL {
            let scope = format!("{kind}/{}", topology.label());
            let s = build_strategy(kind, &w);
            let a4 = validate_assumption4(&s);
            let detail = a4.failures().map(|c| c.name.to_string()).collect::<Vec<_>>().join(", ");
            report.checks.push(Check {
                invariant: "assumption-4",
                scope: scope.clone(),
                value: a4.max_residual(),
                tol: None,
                passed: a4.passed(),
                detail,
            });
            let fact = match TransitionFactorization::build(&s) {
                Ok(f) => f,
                Err(e) => {
                    report.checks.push(Check {
                        invariant: "factorization",
                        scope,
                        value: f64::NAN,
                        tol: Some(REASSEMBLY_TOL),
                        passed: false,
                        detail: e.to_string(),
                    });
                    continue;
                }
            };
            report.contraction.push((kind, topology, fact.t_norm));

            for est in &spec.estimators {
                let scope = format!("{}/{kind}/{}", est.name, topology.label());
                let cfg = RunConfig {
                    mu_x: spec.mu_x,
                    mu_y: spec.mu_y,
                    rounds: spec.rounds,
                    strategy: kind,
                    grace: est.config.clone(),
                    form: UpdateForm::General,
                    estimator_seed: spec.estimator_seed(0),
                    bernoulli_seed: spec.bernoulli_seed(0),
                    // Tracking strategies match their node-level forms from a consensus start.
                    init: consensus_init(spec.seed, d1, d2)?,
                    record_trajectory: true,
                    ..Default::default()
                };
                let out = with_problem!(&problem, p => run(p, &w, &cfg))?;
                let traj = out.trajectory.as_ref().expect("trajectory requested");

                // Replay the recorded gradient blocks through the node-level recursion.
                let mut node = NodeLevelForm::new(kind, w.clone());
                let (mut x, mut y) = (traj.x[0].clone(), traj.y[0].clone());
                let mut gap: f64 = 0.0;
                let mut scale: f64 = 1.0;
                for i in 1..traj.x.len() {
                    node.step(&mut x, &mut y, spec.mu_x, spec.mu_y, &traj.mx[i - 1], &traj.my[i - 1])?;
                    gap = gap.max((&x - &traj.x[i]).amax()).max((&y - &traj.y[i]).amax());
                    scale = scale.max(traj.x[i].amax()).max(traj.y[i].amax());
                }
                report.checks.push(Check {
                    invariant: "form-equivalence",
                    scope: scope.clone(),
                    value: gap / scale,
                    tol: Some(FORM_TOL),
                    passed: gap <= FORM_TOL * scale,
                    detail: String::new(),
                });

                let rep = verify_transformed_dynamics(traj, &s, &fact, spec.mu_x, spec.mu_y, 1.0)?;
                let centroid = rep.max_centroid_residual() / scale;
                report.checks.push(Check {
                    invariant: "centroid-recursion",
                    scope: scope.clone(),
                    value: centroid,
                    tol: Some(CENTROID_TOL),
                    passed: centroid <= CENTROID_TOL,
                    detail: String::new(),
                });
                let err_scale = rep.rows.iter().map(|r| r.error_norm).fold(1.0, f64::max);
                let recursion = rep.max_error_residual() / err_scale;
                report.checks.push(Check {
                    invariant: "transformed-recursion",
                    scope,
                    value: recursion,
                    tol: Some(RECURSION_TOL),
                    passed: recursion <= RECURSION_TOL,
                    detail: String::new(),
                });
            }
        }
    }
    Ok(report)
}
