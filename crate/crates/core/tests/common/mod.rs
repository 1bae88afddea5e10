#![allow(dead_code)]

use dama::engine::{GeneralForm, NodeLevelForm};
use dama::problems::{make_quadratic, QuadraticConfig, QuadraticMinimax};
use dama::strategy::{build_strategy, StrategyKind};
use dama::topology::{build_graph, GraphKind, MixingMatrix, MixingRule};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub const GRAPH_SEED: u64 = 7;
pub const EDGE_PROB: f64 = 0.3;

pub const TOPOLOGIES: [GraphKind; 3] =
    [GraphKind::Ring, GraphKind::Line, GraphKind::MetropolisRandom { edge_prob: EDGE_PROB }];

pub fn mixing_with(kind: GraphKind, k: usize, rule: MixingRule) -> MixingMatrix {
    rule.apply(&build_graph(kind, k, GRAPH_SEED).unwrap()).unwrap()
}

pub fn mixing(kind: GraphKind, k: usize) -> MixingMatrix {
    mixing_with(kind, k, MixingRule::Metropolis)
}

pub fn desk_problem(seed: u64) -> QuadraticMinimax {
    make_quadratic(&QuadraticConfig::desk_scale(seed)).unwrap()
}

pub fn gaussian_block(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| { let v: f64 = StandardNormal.sample(rng); scale * v })
}

/// Runs both update forms on the same injected gradient stream and returns
/// the largest Frobenius gap between their iterates over all rounds.
pub fn form_gap(kind: StrategyKind, w: &MixingMatrix, d: usize, rounds: usize, consensus_start: bool, seed: u64) -> f64 {
    let k = w.size();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (x0, y0) = if consensus_start {
        let xr = gaussian_block(&mut rng, 1, d, 1.0);
        let yr = gaussian_block(&mut rng, 1, d, 1.0);
        (DMatrix::from_fn(k, d, |_, j| xr[j]), DMatrix::from_fn(k, d, |_, j| yr[j]))
    } else {
        (gaussian_block(&mut rng, k, d, 1.0), gaussian_block(&mut rng, k, d, 1.0))
    };
    let mut general = GeneralForm::new(build_strategy(kind, w), d, d);
    let mut node = NodeLevelForm::new(kind, w.clone());
    let (mut xg, mut yg) = (x0.clone(), y0.clone());
    let (mut xn, mut yn) = (x0, y0);
    let mut gap: f64 = 0.0;
    for _ in 0..rounds {
        let mx = gaussian_block(&mut rng, k, d, 1.0);
        let my = gaussian_block(&mut rng, k, d, 1.0);
        general.step(&mut xg, &mut yg, 0.05, 0.1, &mx, &my).unwrap();
        node.step(&mut xn, &mut yn, 0.05, 0.1, &mx, &my).unwrap();
        gap = gap.max((&xg - &xn).norm()).max((&yg - &yn).norm());
    }
    gap
}
