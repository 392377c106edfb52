use std::collections::HashMap;

use nested_dgd::analysis::{compute_constants, mean_error_curve, theorem1_bound};
use nested_dgd::linalg::dist_sq;
use nested_dgd::methods::{run, ConsensusSchedule, Method, MethodState, Problem, StackedState};
use nested_dgd::objectives::{
    make_synthetic_classification, partition_dataset, random_quadratic_suite, ObjectiveSuite,
    OracleMode, QuadraticSpec, StochasticOracle,
};
use nested_dgd::topology::{generate_graph, metropolis_weights, ConsensusMatrix, GraphKind};
use rayon::prelude::*;
use std::sync::Arc;

fn quadratics(agents: usize, identical: bool, seed: u64) -> ObjectiveSuite {
    random_quadratic_suite(&QuadraticSpec {
        agents,
        dim: 3,
        mu: 1.0,
        lip: 4.0,
        offset_scale: 3.0,
        identical,
        seed,
    })
    .unwrap()
}

fn ring(n: usize) -> ConsensusMatrix {
    metropolis_weights(&generate_graph(GraphKind::Ring, n, 0).unwrap())
}

fn trajectory(
    suite: &ObjectiveSuite,
    cm: &ConsensusMatrix,
    mode: OracleMode,
    method: Method,
    alpha: f64,
    seed: u64,
    iterations: u64,
) -> Vec<Vec<f64>> {
    let oracle = StochasticOracle::new(mode, suite, seed).unwrap();
    let problem = Problem {
        cm,
        oracle: &oracle,
        suite,
    };
    let y0 = StackedState::zeros(suite.agents(), suite.dim());
    let state = MethodState::new(method, alpha, &y0, cm).unwrap();
    let mut xs = Vec::new();
    run(state, problem, iterations, |o| {
        xs.push(o.x.as_slice().to_vec())
    })
    .unwrap();
    xs
}

#[test]
fn dgd_on_identical_functions_is_centralized_gradient_descent() {
    let suite = quadratics(5, true, 3);
    let cm = ring(5);
    let dgd = trajectory(&suite, &cm, OracleMode::Exact, Method::Dgd, 0.1, 0, 200);
    let gd = trajectory(
        &suite,
        &cm,
        OracleMode::Exact,
        Method::CentralizedSgd,
        0.1,
        0,
        200,
    );
    for (d, c) in dgd.iter().zip(&gd) {
        for block in d.chunks(3) {
            assert!(dist_sq(block, c).sqrt() <= 1e-12);
        }
    }
}

#[test]
fn exact_methods_reach_the_minimizer() {
    let suite = quadratics(6, false, 5);
    let cm = ring(6);
    for method in [Method::Extra, Method::Dsgt] {
        let oracle = StochasticOracle::new(OracleMode::Exact, &suite, 0).unwrap();
        let problem = Problem {
            cm: &cm,
            oracle: &oracle,
            suite: &suite,
        };
        let state = MethodState::new(method, 0.05, &StackedState::zeros(6, 3), &cm).unwrap();
        let out = run(state, problem, 10_000, |_| {}).unwrap();
        let hit = out.record.rows().iter().position(|r| r.mean_err <= 1e-8);
        assert!(
            hit.is_some(),
            "{} final {}",
            method.label(),
            out.record.last().unwrap().mean_err
        );
    }
}

#[test]
fn single_agent_methods_coincide() {
    let suite = quadratics(1, false, 7);
    let cm = ConsensusMatrix::uniform(1).unwrap();
    let mode = OracleMode::AdditiveGaussian { sigma: 0.5 };
    let reference = trajectory(&suite, &cm, mode, Method::CentralizedSgd, 0.1, 4, 300);
    let methods = [
        Method::NearDgd(ConsensusSchedule::constant(3).unwrap()),
        Method::NearDgd(ConsensusSchedule::Increasing),
        Method::Dgd,
        Method::CentralizedMinibatch,
    ];
    for m in methods {
        assert_eq!(
            trajectory(&suite, &cm, mode, m, 0.1, 4, 300),
            reference,
            "{}",
            m.label()
        );
    }
    // The tracker update adds and subtracts gradients, so equality is up to rounding.
    let dsgt = trajectory(&suite, &cm, mode, Method::Dsgt, 0.1, 4, 300);
    for (a, b) in dsgt.iter().zip(&reference) {
        assert!(dist_sq(a, b).sqrt() <= 1e-10);
    }
}

#[test]
fn methods_share_draws_at_each_agent_and_iteration() {
    let ds = Arc::new(make_synthetic_classification(400, 5, 1).unwrap());
    let parts = partition_dataset(&ds, 4, 1).unwrap();
    let suite = ObjectiveSuite::logistic(ds, parts, 1e-2).unwrap();
    let cm = ring(4);
    let mode = OracleMode::Minibatch {
        batch: 8,
        with_replacement: false,
    };
    let logs: Vec<HashMap<(usize, u64), Vec<usize>>> = [
        Method::NearDgd(ConsensusSchedule::constant(2).unwrap()),
        Method::Dgd,
        Method::Extra,
    ]
    .into_iter()
    .map(|m| {
        let oracle = StochasticOracle::new(mode, &suite, 11)
            .unwrap()
            .with_draw_log();
        let problem = Problem {
            cm: &cm,
            oracle: &oracle,
            suite: &suite,
        };
        let state = MethodState::new(m, 0.5, &StackedState::zeros(4, 5), &cm).unwrap();
        run(state, problem, 40, |_| {}).unwrap();
        oracle
            .take_draw_log()
            .into_iter()
            .map(|d| ((d.agent, d.iteration), d.samples))
            .collect()
    })
    .collect();
    assert_eq!(logs[0].len(), 160);
    for other in &logs[1..] {
        for (key, samples) in &logs[0] {
            assert_eq!(other.get(key), Some(samples), "draw {key:?}");
        }
    }
}

#[test]
fn averaged_gradient_variance_shrinks_with_agents() {
    let sigma = 2.0;
    for n in [1, 4, 16] {
        let suite = quadratics(n, false, 9);
        let oracle =
            StochasticOracle::new(OracleMode::AdditiveGaussian { sigma }, &suite, 2).unwrap();
        let x = vec![0.5, -1.0, 2.0];
        let exact: Vec<f64> = {
            let g = suite.total_gradient(&x);
            g.iter().map(|v| v / n as f64).collect()
        };
        let draws = 20_000u64;
        let mut acc = 0.0;
        for k in 0..draws {
            let mut mean = vec![0.0; 3];
            for i in 0..n {
                let g = oracle.stochastic_gradient(&suite, i, k, &x).unwrap();
                for (m, v) in mean.iter_mut().zip(g) {
                    *m += v / n as f64;
                }
            }
            acc += dist_sq(&mean, &exact);
        }
        let ratio = acc / draws as f64 / (sigma * sigma / n as f64);
        assert!((ratio - 1.0).abs() < 0.05, "n = {n}: ratio {ratio}");
    }
}

#[test]
fn doubling_schedule_counters() {
    let ds = Arc::new(make_synthetic_classification(200, 4, 2).unwrap());
    let parts = partition_dataset(&ds, 5, 2).unwrap();
    let suite = ObjectiveSuite::logistic(ds, parts, 1e-2).unwrap();
    let cm = ring(5);
    let oracle = StochasticOracle::new(
        OracleMode::Minibatch {
            batch: 3,
            with_replacement: true,
        },
        &suite,
        0,
    )
    .unwrap();
    let problem = Problem {
        cm: &cm,
        oracle: &oracle,
        suite: &suite,
    };
    let schedule = ConsensusSchedule::doubling(1, 3).unwrap();
    let state = MethodState::new(
        Method::NearDgd(schedule),
        0.5,
        &StackedState::zeros(5, 4),
        &cm,
    )
    .unwrap();
    let out = run(state, problem, 10, |_| {}).unwrap();
    let st = &out.final_state;
    // 1+1+1 + 2+2+2 + 4+4+4 + 8
    assert_eq!(st.comm_rounds_total(), 29);
    assert_eq!(st.comm_rounds_total(), schedule.total_rounds(10));
    assert_eq!(st.grad_evals_total(), 50);
    assert_eq!(st.samples_total(), 150);
    assert_eq!(oracle.total_evaluations(), 50);
    for row in out.record.rows() {
        assert_eq!(row.t_k, schedule.rounds_at(row.k));
        assert_eq!(row.comm_total, schedule.total_rounds(row.k));
        assert_eq!(row.evals_total, 5 * row.k);
    }
}

#[test]
fn centralized_gradient_descent_decreases_monotonically() {
    let suite = quadratics(4, false, 12);
    let cm = ring(4);
    let oracle = StochasticOracle::new(OracleMode::Exact, &suite, 0).unwrap();
    let problem = Problem {
        cm: &cm,
        oracle: &oracle,
        suite: &suite,
    };
    let state = MethodState::new(
        Method::CentralizedMinibatch,
        0.2,
        &StackedState::zeros(4, 3),
        &cm,
    )
    .unwrap();
    let errs = run(state, problem, 300, |_| {})
        .unwrap()
        .record
        .mean_errors();
    assert!(errs.windows(2).all(|w| w[1] <= w[0] + 1e-15));
    assert!(errs[300] <= 1e-12);
}

/// 20-seed mean error curve of NEAR-DGD with one round, its standard errors,
/// and the constants of the instance.
fn near_dgd_seed_study(iterations: u64) -> (Vec<f64>, Vec<f64>, nested_dgd::TheoreticalConstants) {
    let suite = quadratics(6, false, 21);
    let cm = metropolis_weights(&generate_graph(GraphKind::Complete, 6, 0).unwrap());
    let mode = OracleMode::AdditiveGaussian { sigma: 1.0 };
    let alpha = 0.05;
    let y0 = StackedState::zeros(6, 3);
    let method = Method::NearDgd(ConsensusSchedule::constant(1).unwrap());
    let records: Vec<_> = (0..20u64)
        .into_par_iter()
        .map(|seed| {
            let oracle = StochasticOracle::new(mode, &suite, seed).unwrap();
            let problem = Problem {
                cm: &cm,
                oracle: &oracle,
                suite: &suite,
            };
            let state = MethodState::new(method, alpha, &y0, &cm).unwrap();
            run(state, problem, iterations, |_| {}).unwrap().record
        })
        .collect();
    let refs: Vec<_> = records.iter().collect();
    let mean = mean_error_curve(&refs).unwrap();
    let se: Vec<f64> = (0..mean.len())
        .map(|k| {
            let var = records
                .iter()
                .map(|r| (r.rows()[k].mean_err - mean[k]).powi(2))
                .sum::<f64>()
                / 19.0;
            (var / 20.0).sqrt()
        })
        .collect();
    let oracle = StochasticOracle::new(mode, &suite, 0).unwrap();
    let c = compute_constants(&suite, &cm, &oracle, alpha, None, &y0).unwrap();
    (mean, se, c)
}

#[test]
fn near_dgd_mean_error_stays_under_its_bound() {
    let n = 3000;
    let (mean, se, c) = near_dgd_seed_study(n);
    assert!(c.alpha_ok);
    for k in [0, 1, 10, 100, 1000, n] {
        let bound = theorem1_bound(&c, k, 1, c.x0_err).unwrap().total();
        let k = k as usize;
        assert!(
            mean[k] <= bound + 2.0 * se[k],
            "k = {k}: {} vs {bound}",
            mean[k]
        );
    }
    let tail = &mean[mean.len() - 600..];
    let plateau = tail.iter().sum::<f64>() / tail.len() as f64;
    let steady = theorem1_bound(&c, u64::MAX, 1, c.x0_err).unwrap();
    assert!(
        plateau <= steady.network + steady.noise,
        "{plateau} vs {steady:?}"
    );
}
