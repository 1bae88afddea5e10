mod common;

use dama::engine::GeneralForm;
use dama::grace::{grace_step, specialize, warm_start, EstimatorName, GraceConfig};
use dama::metrics::{consensus_error, MetricsRow, RunLog};
use dama::problems::{BilinearSaddle, MinimaxProblem};
use dama::strategy::{build_strategy, validate_assumption4, StrategyKind};
use dama::topology::{build_graph, GraphKind, MixingMatrix, MixingRule};
use dama::transform::{compute_error_vectors, factor_block, TransitionFactorization};
use nalgebra::{DMatrix, DVector, Matrix2};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn graph_kind() -> impl Strategy<Value = GraphKind> {
    prop_oneof![
        Just(GraphKind::Ring),
        Just(GraphKind::Line),
        Just(GraphKind::Complete),
        (0.2f64..=1.0).prop_map(|q| GraphKind::MetropolisRandom { edge_prob: q }),
    ]
}

fn strategy_kind() -> impl Strategy<Value = StrategyKind> {
    prop::sample::select(StrategyKind::ALL.to_vec())
}

fn block(rows: usize, cols: usize) -> impl Strategy<Value = DMatrix<f64>> {
    prop::collection::vec(-5.0f64..5.0, rows * cols).prop_map(move |v| DMatrix::from_vec(rows, cols, v))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn metropolis_matrices_are_valid(kind in graph_kind(), k in 2usize..14, seed in any::<u64>()) {
        let g = build_graph(kind, k, seed).unwrap();
        prop_assert!(g.is_connected());
        let w = MixingMatrix::metropolis(&g).unwrap();
        let m = w.matrix();
        prop_assert!((m - m.transpose()).amax() <= 1e-12);
        let ones = DVector::from_element(k, 1.0);
        prop_assert!((m * &ones - &ones).amax() <= 1e-12);
        prop_assert!(w.lambda_mix() < 1.0);
        prop_assert!(w.respects(&g));
        let s = w.spectral();
        prop_assert!((s.reconstruct() - m).norm() <= 1e-10);
        prop_assert!((s.u.transpose() * &s.u - DMatrix::identity(k, k)).amax() <= 1e-10);
        prop_assert!((s.u.column(0) - &ones / (k as f64).sqrt()).amax() <= 1e-15);
    }

    #[test]
    fn every_strategy_satisfies_assumption4(kind in graph_kind(), k in 2usize..12, strat in strategy_kind()) {
        let w = MixingMatrix::metropolis(&build_graph(kind, k, 3).unwrap()).unwrap();
        let report = validate_assumption4(&build_strategy(strat, &w));
        prop_assert!(report.passed(), "{report}");
    }

    #[test]
    fn lazy_weights_always_contract(kind in graph_kind(), k in 2usize..12, strat in strategy_kind(), seed in 0u64..50) {
        let w = MixingRule::LazyMetropolis.apply(&build_graph(kind, k, seed).unwrap()).unwrap();
        let f = TransitionFactorization::build(&build_strategy(strat, &w)).unwrap();
        prop_assert!(f.t_norm < 1.0);
        prop_assert!(f.reassembly_residual <= 1e-8);
    }

    #[test]
    fn block_factorization_reassembles(a in -0.5f64..1.0, b in 0.01f64..1.5, c in -0.5f64..1.0) {
        let g = Matrix2::new(a * c - b * b, -b, b, 1.0);
        let f = factor_block(g).unwrap();
        prop_assert!((g - f.v * f.t * f.v_inv).amax() <= 1e-8);
    }

    #[test]
    fn projected_norm_is_consensus_error(x in block(6, 3)) {
        let w = MixingMatrix::metropolis(&build_graph(GraphKind::Ring, 6, 0).unwrap()).unwrap();
        let uhat = w.spectral().uhat();
        let lhs = (uhat.transpose() * &x).norm_squared();
        prop_assert!((lhs - consensus_error(&x)).abs() <= 1e-10 * (1.0 + lhs));
    }

    #[test]
    fn error_vector_norm_identity(
        x in block(5, 2), y in block(5, 2), dx in block(5, 2), dy in block(5, 2),
        mx in block(5, 2), my in block(5, 2), strat in strategy_kind(), tau in 0.1f64..10.0,
    ) {
        let w = MixingMatrix::metropolis(&build_graph(GraphKind::Line, 5, 0).unwrap()).unwrap();
        let s = build_strategy(strat, &w);
        let f = TransitionFactorization::build(&s).unwrap();
        let e = compute_error_vectors(&s, &f, &x, &y, &dx, &dy, &mx, &my, 0.1, 0.2, tau, tau).unwrap();
        let (zx, zy) = dama::transform::auxiliary(&s, &x, &y, &dx, &dy, &mx, &my, 0.1, 0.2);
        let lhs = (&f.q * &e.e_x * tau).norm_squared() + (&f.q * &e.e_y * tau).norm_squared();
        let lb_inv = |z: &DMatrix<f64>| {
            let mut u = f.uhat.transpose() * z;
            for i in 0..u.nrows() {
                u.row_mut(i).scale_mut(1.0 / f.lambda_b[i]);
            }
            u.norm_squared()
        };
        let rhs = consensus_error(&x) + lb_inv(&zx) + consensus_error(&y) + lb_inv(&zy);
        prop_assert!((lhs - rhs).abs() <= 1e-9 * (1.0 + rhs));
    }

    #[test]
    fn duals_stay_in_range_of_b(strat in strategy_kind(), seed in any::<u64>()) {
        let w = MixingMatrix::metropolis(&build_graph(GraphKind::Ring, 6, 0).unwrap()).unwrap();
        let mut form = GeneralForm::new(build_strategy(strat, &w), 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = common::gaussian_block(&mut rng, 6, 2, 1.0);
        let mut y = common::gaussian_block(&mut rng, 6, 2, 1.0);
        for _ in 0..10 {
            let mx = common::gaussian_block(&mut rng, 6, 2, 1.0);
            let my = common::gaussian_block(&mut rng, 6, 2, 1.0);
            form.step(&mut x, &mut y, 0.1, 0.1, &mx, &my).unwrap();
        }
        // range(B) is the complement of span(1): dual blocks have zero column sums.
        prop_assert!(form.dx.row_sum().amax() <= 1e-9);
        prop_assert!(form.dy.row_sum().amax() <= 1e-9);
    }

    #[test]
    fn consensus_error_ignores_common_shift(x in block(4, 3), shift in prop::collection::vec(-10.0f64..10.0, 3)) {
        let shifted = DMatrix::from_fn(4, 3, |i, j| x[(i, j)] + shift[j]);
        let a = consensus_error(&x);
        prop_assert!(a >= 0.0);
        prop_assert!((a - consensus_error(&shifted)).abs() <= 1e-9 * (1.0 + a));
    }

    #[test]
    fn bilinear_gradient_matches_finite_differences(x in prop::collection::vec(-3.0f64..3.0, 3), y in prop::collection::vec(-3.0f64..3.0, 2), s in 0usize..6) {
        let p = BilinearSaddle::random(2, 3, 2, 6, 1.5, 4).unwrap();
        let x = DVector::from_vec(x);
        let y = DVector::from_vec(y);
        let (gx, gy) = p.grad_loss(1, &x, &y, &s);
        let h = 1e-6;
        // Finite differences of the sampled gradient field reproduce the Hessian product.
        for i in 0..3 {
            let mut e = DVector::zeros(3);
            e[i] = 1.0;
            let (gx2, gy2) = p.grad_loss(1, &(&x + &e * h), &y, &s);
            let (hx, hy) = p.hessian_product(1, &x, &y, &s, &e, &DVector::zeros(2)).unwrap();
            prop_assert!(((gx2 - &gx) / h - hx).amax() <= 1e-6);
            prop_assert!(((gy2 - &gy) / h - hy).amax() <= 1e-6);
        }
    }

    #[test]
    fn stationary_iterate_reduces_to_heavy_ball(beta in 0.0f64..1.0, seed in any::<u64>()) {
        let p = BilinearSaddle::random(2, 3, 2, 8, 1.0, 2).unwrap();
        let cfg = GraceConfig { beta_x: beta, beta_y: beta, ..specialize(EstimatorName::Storm, 8) };
        let x = DVector::from_vec(vec![0.3, -0.1, 0.7]);
        let y = DVector::from_vec(vec![-0.5, 0.2]);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut st = warm_start(&p, 0, &x, &y, &cfg, &mut rng).unwrap();
        st.g_x[0] += 1.0;
        let before = st.clone();
        let mut probe = rng.clone();
        grace_step(&mut st, &cfg, &p, 0, &x, &y, false, &mut rng).unwrap();
        let sample = p.draw_sample(0, &mut probe);
        let (gx, gy) = p.grad_loss(0, &x, &y, &sample);
        prop_assert!((&st.g_x - (&before.g_x * (1.0 - beta) + gx * beta)).amax() <= 1e-12);
        prop_assert!((&st.g_y - (&before.g_y * (1.0 - beta) + gy * beta)).amax() <= 1e-12);
    }

    #[test]
    fn metrics_csv_round_trips(values in prop::collection::vec((0.0f64..1e6, 0.0f64..1e6, 0u64..10_000, any::<bool>()), 1..20)) {
        let mut log = RunLog::new();
        for (i, (a, b, o, pi)) in values.into_iter().enumerate() {
            log.rows.push(MetricsRow {
                round: i,
                grad_x_sq: a,
                grad_y_sq: b,
                consensus_x: a * 0.5,
                consensus_y: b / 3.0,
                oracle_max: o,
                oracle_mean: o as f64 / 7.0,
                pi: pi as u8,
                wallclock_us: 0,
            });
        }
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        prop_assert_eq!(RunLog::read_csv(buf.as_slice()).unwrap(), log);
    }
}
