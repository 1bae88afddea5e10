//! Grid runs: estimator × strategy × topology × repetition.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use dama::engine::{run, RunConfig};
use dama::metrics::{RunLog, RunStatus};
use dama::problems::{make_quadratic, BilinearSaddle, MinimaxProblem, QuadraticMinimax, WithoutHessian};
use dama::strategy::StrategyKind;
use dama::topology::{build_graph, GraphKind, MixingMatrix};
use rayon::prelude::*;

use crate::spec::{EstimatorCell, ExperimentSpec, ProblemKind};

pub const SUMMARY_FILE: &str = "summary.csv";

pub const SUMMARY_HEADER: [&str; 14] = [
    "estimator",
    "strategy",
    "topology",
    "rep",
    "status",
    "diverged_round",
    "last_round",
    "final_grad_x_sq",
    "final_grad_y_sq",
    "final_consensus_x",
    "final_consensus_y",
    "oracle_max",
    "oracle_mean",
    "oracle_total",
];

/// The problem instance of a spec.
pub enum Problem {
    Quadratic(QuadraticMinimax),
    QuadraticNoHessian(WithoutHessian<QuadraticMinimax>),
    Bilinear(BilinearSaddle),
    BilinearNoHessian(WithoutHessian<BilinearSaddle>),
}

/// Runs `$body` with `$p` bound to the concrete problem.
macro_rules! with_problem {
    ($problem:expr, $p:ident => $body:expr) => {
        match $problem {
            Problem::Quadratic($p) => $body,
            Problem::QuadraticNoHessian($p) => $body,
            Problem::Bilinear($p) => $body,
            Problem::BilinearNoHessian($p) => $body,
        }
    };
}
pub(crate) use with_problem;

impl Problem {
    pub fn build(spec: &ExperimentSpec) -> Result<Self> {
        let q = &spec.quadratic;
        Ok(match (spec.problem, spec.hessian_products) {
            (ProblemKind::Quadratic, h) => {
                let p = make_quadratic(q).context("building the quadratic problem")?;
                if h {
                    Problem::Quadratic(p)
                } else {
                    Problem::QuadraticNoHessian(WithoutHessian(p))
                }
            }
            (ProblemKind::Bilinear, h) => {
                let n = q.samples_per_agent.context("the bilinear problem needs finite samples")?;
                let p = BilinearSaddle::random(q.agents, q.dim_x, q.dim_y, n, q.nu, q.seed)
                    .context("building the bilinear problem")?;
                if h {
                    Problem::Bilinear(p)
                } else {
                    Problem::BilinearNoHessian(WithoutHessian(p))
                }
            }
        })
    }

    pub fn agent_count(&self) -> usize {
        with_problem!(self, p => p.agent_count())
    }
}

/// Combination matrix of `topology` for a spec. One agent gets the trivial matrix.
pub fn network(spec: &ExperimentSpec, topology: GraphKind, agents: usize) -> Result<MixingMatrix> {
    if agents == 1 {
        return Ok(MixingMatrix::single_agent());
    }
    let g = build_graph(topology, agents, spec.seed).with_context(|| format!("building the {topology} graph"))?;
    spec.mixing.apply(&g).with_context(|| format!("weighting the {topology} graph"))
}

#[derive(Debug, Clone)]
pub struct Cell {
    pub estimator: EstimatorCell,
    pub strategy: StrategyKind,
    pub topology: GraphKind,
    pub rep: usize,
}

impl Cell {
    pub fn file_name(&self) -> String {
        format!("{}_{}_{}_rep{}.csv", self.estimator.name.name(), self.strategy.name(), self.topology.label(), self.rep)
    }
}

pub fn cells(spec: &ExperimentSpec) -> Vec<Cell> {
    let mut out = Vec::new();
    for est in &spec.estimators {
        for &strategy in &spec.strategies {
            for &topology in &spec.topologies {
                for rep in 0..spec.repetitions {
                    out.push(Cell { estimator: est.clone(), strategy, topology, rep });
                }
            }
        }
    }
    out
}

pub fn run_config(spec: &ExperimentSpec, cell: &Cell) -> RunConfig {
    RunConfig {
        mu_x: spec.mu_x,
        mu_y: spec.mu_y,
        rounds: spec.rounds,
        strategy: cell.strategy,
        grace: cell.estimator.config.clone(),
        form: spec.form,
        estimator_seed: spec.estimator_seed(cell.rep),
        bernoulli_seed: spec.bernoulli_seed(cell.rep),
        cadence: spec.cadence,
        divergence_threshold: spec.divergence_threshold,
        init: spec.init.clone(),
        record_wallclock: spec.record_wallclock,
        record_trajectory: false,
    }
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub cell: Cell,
    pub log: RunLog,
    pub oracle_total: u64,
    pub path: PathBuf,
}

impl CellResult {
    pub fn diverged(&self) -> bool {
        self.log.diverged()
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub results: Vec<CellResult>,
    pub summary_path: PathBuf,
}

impl ExperimentOutcome {
    pub fn all_diverged(&self) -> bool {
        !self.results.is_empty() && self.results.iter().all(CellResult::diverged)
    }

    pub fn diverged_count(&self) -> usize {
        self.results.iter().filter(|r| r.diverged()).count()
    }
}

/// Writes `bytes` to `path` via a temporary file in the same directory.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating a file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn run_cell(spec: &ExperimentSpec, problem: &Problem, mixing: &MixingMatrix, cell: Cell, out: &Path) -> Result<CellResult> {
    let cfg = run_config(spec, &cell);
    let output = with_problem!(problem, p => run(p, mixing, &cfg))
        .with_context(|| format!("cell {}", cell.file_name()))?;
    let path = out.join(cell.file_name());
    let mut buf = Vec::new();
    output.log.write_csv(&mut buf)?;
    write_atomic(&path, &buf)?;
    match output.log.status {
        RunStatus::Diverged { round, norm } => {
            log::warn!("{}: diverged at round {round} (norm {norm:e})", cell.file_name())
        }
        RunStatus::Completed => log::info!("{}: done", cell.file_name()),
    }
    // From the last logged row, so the summary always matches the CSV.
    let last = output.log.last().context("run log without rows")?;
    let oracle_total = (last.oracle_mean * mixing.size() as f64).round() as u64;
    Ok(CellResult { cell, log: output.log, oracle_total, path })
}

/// Runs every cell of `spec` in parallel and writes the per-cell CSVs and the summary.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentOutcome> {
    fs::create_dir_all(&spec.out).with_context(|| format!("creating {}", spec.out.display()))?;
    let problem = Problem::build(spec)?;
    let agents = problem.agent_count();
    let networks: Vec<(GraphKind, MixingMatrix)> = spec
        .topologies
        .iter()
        .map(|&t| network(spec, t, agents).map(|m| (t, m)))
        .collect::<Result<_>>()?;
    let grid = cells(spec);
    log::info!("{} cells, {} rounds each", grid.len(), spec.rounds);
    let results: Vec<CellResult> = grid
        .into_par_iter()
        .map(|cell| {
            let mixing = &networks.iter().find(|(t, _)| *t == cell.topology).expect("network for every topology").1;
            run_cell(spec, &problem, mixing, cell, &spec.out)
        })
        .collect::<Result<_>>()?;
    let summary_path = spec.out.join(SUMMARY_FILE);
    let mut buf = Vec::new();
    write_summary(&mut buf, &results)?;
    write_atomic(&summary_path, &buf)?;
    Ok(ExperimentOutcome { results, summary_path })
}

pub fn write_summary<W: Write>(out: W, results: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for r in results {
        let last = r.log.last().context("run log without rows")?;
        let (status, diverged_round) = match r.log.status {
            RunStatus::Completed => ("COMPLETED", String::new()),
            RunStatus::Diverged { round, .. } => ("DIVERGED", round.to_string()),
        };
        w.write_record([
            r.cell.estimator.name.name().to_owned(),
            r.cell.strategy.name().to_owned(),
            r.cell.topology.label().to_owned(),
            r.cell.rep.to_string(),
            status.to_owned(),
            diverged_round,
            last.round.to_string(),
            format!("{:e}", last.grad_x_sq),
            format!("{:e}", last.grad_y_sq),
            format!("{:e}", last.consensus_x),
            format!("{:e}", last.consensus_y),
            last.oracle_max.to_string(),
            format!("{:e}", last.oracle_mean),
            r.oracle_total.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
