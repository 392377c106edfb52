//! Acceptance criteria, one `PASS`/`FAIL` line each.
//!
//! Runs as a plain binary (`harness = false`) so every criterion reports
//! even when an earlier one fails; the process exits nonzero on any failure.

use std::sync::{Arc, Mutex};
use std::time::Instant;

use nested_dgd::analysis::{
    compute_constants, mean_error_curve, plateau_estimate, sgd_neighborhood, RunRecord,
};
use nested_dgd::harness::{parse_config, run_experiment};
use nested_dgd::linalg::dist_sq;
use nested_dgd::methods::{
    average_blocks, run, ConsensusSchedule, Method, MethodState, Observation, Problem, StackedState,
};
use nested_dgd::objectives::{
    make_synthetic_classification, partition_dataset, random_quadratic_suite, ObjectiveSuite,
    OracleMode, QuadraticSpec, StochasticOracle,
};
use nested_dgd::topology::{generate_graph, metropolis_weights, ConsensusMatrix, GraphKind};
use rayon::prelude::*;

const SEEDS: u64 = 20;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Worst violations of the per-iteration NEAR-DGD identities seen so far.
#[derive(Default)]
struct IdentityLog {
    runs: usize,
    rows: usize,
    /// max of `cons_dev(x_k) − β^{2t}‖y_k‖²`
    deviation_excess: f64,
    /// max `‖x̄_k − ȳ_k‖`
    mean_gap: f64,
    /// max `‖ȳ_{k+1} − (x̄_k − α ḡ_k)‖`
    recursion_gap: f64,
}

static IDENTITIES: Mutex<Option<IdentityLog>> = Mutex::new(None);

fn record_identities(local: IdentityLog) {
    let mut guard = IDENTITIES.lock().unwrap();
    let g = guard.get_or_insert_with(IdentityLog::default);
    g.runs += local.runs;
    g.rows += local.rows;
    g.deviation_excess = g.deviation_excess.max(local.deviation_excess);
    g.mean_gap = g.mean_gap.max(local.mean_gap);
    g.recursion_gap = g.recursion_gap.max(local.recursion_gap);
}

struct Setup {
    suite: ObjectiveSuite,
    cm: ConsensusMatrix,
    mode: OracleMode,
    alpha: f64,
}

/// Runs `method` for one seed; NEAR-DGD runs feed the identity log.
fn run_one(s: &Setup, method: Method, seed: u64, iterations: u64) -> (RunRecord, f64) {
    let oracle = StochasticOracle::new(s.mode, &s.suite, seed).unwrap();
    let y0 = StackedState::zeros(s.suite.agents(), s.suite.dim());
    let state = MethodState::new(method, s.alpha, &y0, &s.cm).unwrap();
    let problem = Problem {
        cm: &s.cm,
        oracle: &oracle,
        suite: &s.suite,
    };
    let beta = s.cm.beta();
    let mut log = IdentityLog {
        runs: 1,
        ..Default::default()
    };
    let mut prev_x_bar: Option<Vec<f64>> = None;
    let observe = matches!(method, Method::NearDgd(_));
    let out = run(state, problem, iterations, |o: &Observation<'_>| {
        if !observe {
            return;
        }
        log.rows += 1;
        let bound = beta.powf(2.0 * o.rounds as f64) * o.y.norm_sq();
        log.deviation_excess = log.deviation_excess.max(o.x.consensus_deviation() - bound);
        let x_bar = average_blocks(o.x);
        let y_bar = average_blocks(o.y);
        log.mean_gap = log.mean_gap.max(dist_sq(&x_bar, &y_bar).sqrt());
        if let (Some(prev), Some(step)) = (&prev_x_bar, o.step) {
            let predicted: Vec<f64> = prev
                .iter()
                .zip(&step.mean_gradient)
                .map(|(x, g)| x - s.alpha * g)
                .collect();
            log.recursion_gap = log.recursion_gap.max(dist_sq(&predicted, &y_bar).sqrt());
        }
        prev_x_bar = Some(x_bar);
    })
    .unwrap_or_else(|e| panic!("{} seed {seed}: {e}", method.label()));
    if observe {
        record_identities(log);
    }
    (out.record, out.final_normalized_deviation)
}

/// 20-seed (or `seeds`) mean error curve and mean final deviation.
fn seed_mean(s: &Setup, method: Method, seeds: u64, iterations: u64) -> (Vec<f64>, f64) {
    let runs: Vec<(RunRecord, f64)> = (0..seeds)
        .into_par_iter()
        .map(|seed| run_one(s, method, seed, iterations))
        .collect();
    let records: Vec<&RunRecord> = runs.iter().map(|r| &r.0).collect();
    let curve = mean_error_curve(&records).unwrap();
    let dev = runs.iter().map(|r| r.1).sum::<f64>() / seeds as f64;
    (curve, dev)
}

fn plateau_of(curve: &[f64]) -> f64 {
    let rec = RunRecord::from_rows(
        curve
            .iter()
            .enumerate()
            .map(|(k, &e)| nested_dgd::analysis::RunRow {
                k: k as u64,
                t_k: 0,
                comm_total: 0,
                evals_total: 0,
                mean_err: e,
                cons_dev: 0.0,
                y_cons_dev: 0.0,
                fgap: 0.0,
            })
            .collect(),
    );
    plateau_estimate(&rec, None).unwrap()
}

fn quadratic(
    agents: usize,
    dim: usize,
    mu: f64,
    lip: f64,
    offset: f64,
    identical: bool,
    seed: u64,
) -> ObjectiveSuite {
    random_quadratic_suite(&QuadraticSpec {
        agents,
        dim,
        mu,
        lip,
        offset_scale: offset,
        identical,
        seed,
    })
    .unwrap()
}

fn c1_consensus_matrices() -> Outcome {
    let kinds = [
        GraphKind::Path,
        GraphKind::Ring,
        GraphKind::Complete,
        GraphKind::Star,
        GraphKind::ErdosRenyi { p: 0.5 },
    ];
    let mut checked = 0;
    let mut worst_beta: f64 = 0.0;
    for kind in kinds {
        for n in 2..=20 {
            let topo = generate_graph(kind, n, 11).unwrap();
            let cm = metropolis_weights(&topo);
            if cm.check_contract().is_err() || cm.check_support(&topo).is_err() {
                return outcome(
                    false,
                    format!("{kind:?} n={n} violates the matrix contract"),
                );
            }
            for i in 0..n {
                let row: f64 = (0..n).map(|j| cm.weight(i, j)).sum();
                if (row - 1.0).abs() > 1e-12 || cm.weight(i, i) <= 0.0 {
                    return outcome(false, format!("{kind:?} n={n} row {i} sums to {row}"));
                }
                for j in 0..n {
                    if cm.weight(i, j) != cm.weight(j, i) {
                        return outcome(false, format!("{kind:?} n={n} asymmetric at ({i},{j})"));
                    }
                }
            }
            if !(cm.beta() < 1.0) {
                return outcome(false, format!("{kind:?} n={n} beta = {}", cm.beta()));
            }
            worst_beta = worst_beta.max(cm.beta());
            checked += 1;
        }
    }
    outcome(
        true,
        format!("{checked} matrices, max beta {worst_beta:.6}"),
    )
}

fn c2_sgd_neighborhood() -> Outcome {
    let (mu, lip, sigma) = (1.0, 10.0, 1.0);
    let suite = quadratic(1, 5, mu, lip, 1.0, false, 21);
    let s = Setup {
        cm: ConsensusMatrix::uniform(1).unwrap(),
        mode: OracleMode::AdditiveGaussian { sigma },
        alpha: 1.0 / (mu + lip),
        suite,
    };
    let (curve, _) = seed_mean(&s, Method::CentralizedSgd, SEEDS, 20_000);
    let plateau = plateau_of(&curve);
    let gamma = mu * lip / (mu + lip);
    let bound = sgd_neighborhood(s.alpha, sigma * sigma, gamma);
    outcome(
        plateau <= bound && plateau >= 0.05 * bound,
        format!(
            "plateau {plateau:.4e}, bound {bound:.4e}, ratio {:.3}",
            plateau / bound
        ),
    )
}

fn variance_setup(n: usize) -> Setup {
    let topo = generate_graph(GraphKind::ErdosRenyi { p: 0.5 }, n, 5).unwrap();
    let (mu, lip) = (1.0, 2.0);
    Setup {
        suite: quadratic(n, 5, mu, lip, 5.0, true, 31),
        cm: metropolis_weights(&topo),
        mode: OracleMode::AdditiveGaussian { sigma: 1.0 },
        alpha: 1.0 / (mu + lip),
    }
}

fn c3_variance_reduction() -> Outcome {
    let plus = Method::NearDgd(ConsensusSchedule::Increasing);
    let p4 = plateau_of(&seed_mean(&variance_setup(4), plus, SEEDS, 5000).0);
    let p16 = plateau_of(&seed_mean(&variance_setup(16), plus, SEEDS, 5000).0);
    let ratio = p16 / p4;
    outcome(
        (0.125..=0.5).contains(&ratio),
        format!("plateau n=4 {p4:.4e}, n=16 {p16:.4e}, ratio {ratio:.4} (ideal 0.25)"),
    )
}

fn c4_network_term() -> Outcome {
    let topo = generate_graph(GraphKind::Path, 10, 0).unwrap();
    let cm = metropolis_weights(&topo);
    let beta = cm.beta();
    let (mu, lip) = (1.0, 4.0);
    let s = Setup {
        suite: quadratic(10, 5, mu, lip, 1.0, false, 41),
        cm,
        mode: OracleMode::Exact,
        alpha: 1.0 / (mu + lip),
    };
    let ts = [1u64, 2, 4, 8];
    let plateaus: Vec<f64> = ts
        .iter()
        .map(|&t| {
            plateau_of(
                &seed_mean(
                    &s,
                    Method::NearDgd(ConsensusSchedule::constant(t).unwrap()),
                    1,
                    5000,
                )
                .0,
            )
        })
        .collect();
    let decreasing = plateaus.windows(2).all(|w| w[1] < w[0]);
    let xs: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
    let ys: Vec<f64> = plateaus.iter().map(|p| p.ln()).collect();
    let (mx, my) = (xs.iter().sum::<f64>() / 4.0, ys.iter().sum::<f64>() / 4.0);
    let slope = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (x - mx) * (y - my))
        .sum::<f64>()
        / xs.iter().map(|x| (x - mx).powi(2)).sum::<f64>();
    let limit = 2.0 * beta.ln() + 0.5;
    outcome(
        decreasing && slope <= limit,
        format!(
            "plateaus {:?}, slope {slope:.4} (limit {limit:.4}, 2 ln beta = {:.4})",
            plateaus
                .iter()
                .map(|p| format!("{p:.3e}"))
                .collect::<Vec<_>>(),
            2.0 * beta.ln()
        ),
    )
}

fn c5_linear_rate() -> Outcome {
    let s = variance_setup(10);
    let oracle = StochasticOracle::new(s.mode, &s.suite, 0).unwrap();
    let y0 = StackedState::zeros(10, s.suite.dim());
    let c = compute_constants(&s.suite, &s.cm, &oracle, s.alpha, None, &y0).unwrap();
    let (curve, _) = seed_mean(
        &s,
        Method::NearDgd(ConsensusSchedule::Increasing),
        SEEDS,
        3000,
    );
    let plateau = plateau_of(&curve);
    let mut worst: f64 = 0.0;
    let mut k = 0;
    while k + 1 < curve.len() && curve[k] > 2.0 * plateau {
        worst = worst.max(curve[k + 1] / curve[k]);
        k += 1;
    }
    outcome(
        k > 0 && worst <= c.theta + 0.05,
        format!(
            "{k} transient iterations, max ratio {worst:.4}, theta {:.4}",
            c.theta
        ),
    )
}

fn c6_c7_identities() -> (Outcome, Outcome) {
    let log = IDENTITIES.lock().unwrap().take().unwrap_or_default();
    let ran = log.runs > 0;
    (
        outcome(
            ran && log.deviation_excess <= 1e-10,
            format!(
                "{} runs, {} rows, max excess {:.3e}",
                log.runs, log.rows, log.deviation_excess
            ),
        ),
        outcome(
            ran && log.mean_gap <= 1e-12 && log.recursion_gap <= 1e-12,
            format!(
                "max |x̄−ȳ| {:.3e}, max recursion gap {:.3e}",
                log.mean_gap, log.recursion_gap
            ),
        ),
    )
}

fn c8_baseline_exactness() -> Outcome {
    let topo = generate_graph(GraphKind::Ring, 10, 0).unwrap();
    let (mu, lip) = (1.0, 4.0);
    let s = Setup {
        suite: quadratic(10, 5, mu, lip, 1.0, false, 81),
        cm: metropolis_weights(&topo),
        mode: OracleMode::Exact,
        alpha: 0.5 / lip,
    };
    let first_below = |curve: &[f64]| curve.iter().position(|&e| e <= 1e-16);
    let extra = run_one(&s, Method::Extra, 0, 50_000).0.mean_errors();
    let dsgt = run_one(&s, Method::Dsgt, 0, 50_000).0.mean_errors();
    let dgd = plateau_of(&run_one(&s, Method::Dgd, 0, 50_000).0.mean_errors());
    let (ke, kd) = (first_below(&extra), first_below(&dsgt));
    let show = |k: Option<usize>| k.map_or("never".to_string(), |k| k.to_string());
    outcome(
        ke.is_some() && kd.is_some() && dgd > 0.0,
        format!(
            "EXTRA hits 1e-16 at k={}, DSGT at k={} (limit 50000), DGD plateau {dgd:.3e} > 0",
            show(ke),
            show(kd)
        ),
    )
}

fn logistic_setup(kind: GraphKind, batch: usize, alpha_fraction: f64) -> Setup {
    let ds = Arc::new(make_synthetic_classification(2000, 50, 9).unwrap());
    let parts = partition_dataset(&ds, 10, 0).unwrap();
    let suite = ObjectiveSuite::logistic(Arc::clone(&ds), parts, 1.0 / 2000.0).unwrap();
    let topo = generate_graph(kind, 10, 7).unwrap();
    let alpha_max = suite
        .mu_list()
        .iter()
        .zip(suite.lip_list())
        .map(|(m, l)| 2.0 / (m + l))
        .fold(f64::INFINITY, f64::min);
    Setup {
        suite,
        cm: metropolis_weights(&topo),
        mode: OracleMode::Minibatch {
            batch,
            with_replacement: true,
        },
        alpha: alpha_fraction * alpha_max,
    }
}

const LOGISTIC_ALPHA_FRACTION: f64 = 0.5;

fn c9_figure_one() -> Outcome {
    let s = logistic_setup(
        GraphKind::ErdosRenyi { p: 0.5 },
        16,
        LOGISTIC_ALPHA_FRACTION,
    );
    let n = 10_000;
    let near3 = seed_mean(
        &s,
        Method::NearDgd(ConsensusSchedule::constant(3).unwrap()),
        5,
        n,
    );
    let near1 = seed_mean(
        &s,
        Method::NearDgd(ConsensusSchedule::constant(1).unwrap()),
        5,
        n,
    );
    let dbl = seed_mean(
        &s,
        Method::NearDgd(ConsensusSchedule::doubling(1, 1000).unwrap()),
        5,
        n,
    );
    let central = seed_mean(&s, Method::CentralizedMinibatch, 5, n);
    let (p3, pc) = (plateau_of(&near3.0), plateau_of(&central.0));
    let ratio = p3 / pc;
    outcome(
        (0.5..=2.0).contains(&ratio) && dbl.1 < near1.1,
        format!(
            "alpha {:.3}, plateau near_dgd_3 {p3:.3e} vs centralized {pc:.3e} (ratio {ratio:.3}); final dev doubling {:.3e} vs near_dgd_1 {:.3e}",
            s.alpha, dbl.1, near1.1
        ),
    )
}

fn c10_path_stress() -> Outcome {
    let s = logistic_setup(GraphKind::Path, 1, LOGISTIC_ALPHA_FRACTION);
    let n = 10_000;
    let dbl = plateau_of(
        &seed_mean(
            &s,
            Method::NearDgd(ConsensusSchedule::doubling(1, 1000).unwrap()),
            5,
            n,
        )
        .0,
    );
    let dgd = plateau_of(&seed_mean(&s, Method::Dgd, 5, n).0);
    let extra = plateau_of(&seed_mean(&s, Method::Extra, 5, n).0);
    outcome(
        dbl <= dgd && dbl <= extra,
        format!("plateau doubling {dbl:.3e}, DGD {dgd:.3e}, EXTRA {extra:.3e}"),
    )
}

fn c11_oracle_statistics() -> Outcome {
    let s = logistic_setup(GraphKind::Complete, 16, 1.0);
    let oracle = StochasticOracle::new(s.mode, &s.suite, 3).unwrap();
    let bound = oracle.sigma_sq_bound();
    let p = s.suite.dim();
    let x_star = s.suite.x_star().to_vec();
    let shifted: Vec<f64> = x_star
        .iter()
        .enumerate()
        .map(|(j, v)| 0.5 * v + if j % 2 == 0 { 0.3 } else { -0.3 })
        .collect();
    let points = [vec![0.0; p], x_star, shifted];
    let draws = 10_000u64;
    let mut worst_z: f64 = 0.0;
    let mut worst_var: f64 = 0.0;
    for agent in [0usize, 5] {
        for x in &points {
            let exact = s.suite.gradient(agent, x);
            let (mut sum, mut sum_sq) = (vec![0.0; p], vec![0.0; p]);
            let mut err_sq = 0.0;
            for k in 0..draws {
                let g = oracle.stochastic_gradient(&s.suite, agent, k, x).unwrap();
                for j in 0..p {
                    sum[j] += g[j];
                    sum_sq[j] += g[j] * g[j];
                }
                err_sq += dist_sq(&g, &exact);
            }
            let m = draws as f64;
            for j in 0..p {
                let mean = sum[j] / m;
                let var = (sum_sq[j] / m - mean * mean) * m / (m - 1.0);
                let se = (var / m).sqrt();
                if se > 0.0 {
                    worst_z = worst_z.max((mean - exact[j]).abs() / se);
                }
            }
            worst_var = worst_var.max(err_sq / m);
        }
    }
    outcome(
        worst_z <= 4.0 && worst_var <= bound,
        format!("max |z| {worst_z:.3}, max empirical variance {worst_var:.4e}, certified bound {bound:.4e}"),
    )
}

fn c12_determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let text = include_str!("../../../presets/desk_fig1.json");
    let mut outputs = Vec::new();
    for d in &dirs {
        let mut cfg = parse_config(text).unwrap();
        cfg.output_dir = d.path().to_path_buf();
        cfg.iterations = 500;
        cfg.seeds = vec![1, 2];
        let out = run_experiment(&cfg).unwrap();
        let mut files: Vec<(String, Vec<u8>)> = out
            .files
            .iter()
            .map(|f| {
                (
                    f.strip_prefix(d.path()).unwrap().display().to_string(),
                    std::fs::read(f).unwrap(),
                )
            })
            .collect();
        files.sort();
        outputs.push(files);
    }
    let same = outputs[0] == outputs[1];
    let csvs = outputs[0]
        .iter()
        .filter(|(n, _)| n.ends_with(".csv"))
        .count();
    outcome(
        same && csvs > 0,
        format!(
            "{} files ({csvs} CSVs) byte-identical: {same}",
            outputs[0].len()
        ),
    )
}

fn main() {
    let mut failures = 0;
    let mut report = |id: u32, name: &str, f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let o = f();
        let status = if o.pass { "PASS" } else { "FAIL" };
        if !o.pass {
            failures += 1;
        }
        println!(
            "{status} criterion {id:>2} {name} [{:.1}s]: {}",
            start.elapsed().as_secs_f64(),
            o.detail
        );
    };
    report(1, "consensus-matrix suite", &c1_consensus_matrices);
    report(2, "centralized SGD neighborhood", &c2_sgd_neighborhood);
    report(3, "1/n variance reduction", &c3_variance_reduction);
    report(4, "network-term decay in t", &c4_network_term);
    report(5, "linear rate theta", &c5_linear_rate);
    report(8, "EXTRA/DSGT exactness, DGD bias", &c8_baseline_exactness);
    report(9, "desk-scale figure 1", &c9_figure_one);
    report(10, "path graph, B=1", &c10_path_stress);
    let (c6, c7) = c6_c7_identities();
    report(6, "consensus deviation bound", &|| {
        outcome(c6.pass, c6.detail.clone())
    });
    report(7, "average-iterate identities", &|| {
        outcome(c7.pass, c7.detail.clone())
    });
    report(11, "oracle statistics", &c11_oracle_statistics);
    report(12, "rerun determinism", &c12_determinism);
    if failures > 0 {
        eprintln!("{failures} acceptance criteria failed");
        std::process::exit(1);
    }
}
