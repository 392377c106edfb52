use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{logistic_sample_gradient_acc, LocalObjective, ObjectiveError, ObjectiveSuite};
use crate::linalg::{axpy, dist_sq};
use crate::rng::{substream, Domain};

/// How an oracle perturbs the exact local gradient.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OracleMode {
    Exact,
    /// `∇f_i(x) + η` with `η ~ N(0, (σ²/p)·I)`, so `E‖η‖² = σ²`.
    AdditiveGaussian {
        sigma: f64,
    },
    /// Average gradient over `batch` local samples drawn uniformly.
    Minibatch {
        batch: usize,
        with_replacement: bool,
    },
}

/// Sample indices drawn by one minibatch evaluation (draw-logging mode).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DrawRecord {
    pub agent: usize,
    pub iteration: u64,
    pub samples: Vec<usize>,
}

/// Per-agent stochastic gradient oracle.
///
/// The randomness of the draw made by agent `i` at iteration `k` comes from a
/// substream keyed on `(seed, i, k)`, so two methods evaluated with the same
/// seed see identical samples at the same `(agent, iteration)` no matter how
/// many times or in which order they call the oracle.
#[derive(Debug)]
pub struct StochasticOracle {
    mode: OracleMode,
    seed: u64,
    sigma_sq_bound: f64,
    evals: Vec<AtomicU64>,
    log: Option<Mutex<Vec<DrawRecord>>>,
}

impl StochasticOracle {
    pub fn new(
        mode: OracleMode,
        suite: &ObjectiveSuite,
        seed: u64,
    ) -> Result<Self, ObjectiveError> {
        let sigma_sq_bound = match mode {
            OracleMode::Exact => 0.0,
            OracleMode::AdditiveGaussian { sigma } => {
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return Err(ObjectiveError::Invalid(format!(
                        "noise scale {sigma} must be nonnegative"
                    )));
                }
                sigma * sigma
            }
            OracleMode::Minibatch {
                batch,
                with_replacement,
            } => {
                if !suite.is_logistic() {
                    return Err(ObjectiveError::MinibatchOnQuadratic);
                }
                for agent in 0..suite.agents() {
                    let local = local_rows(suite, agent).len();
                    if batch == 0 || (!with_replacement && batch > local) {
                        return Err(ObjectiveError::BadBatch {
                            batch,
                            agent,
                            local,
                        });
                    }
                }
                certify_minibatch_variance(suite, batch, with_replacement)
            }
        };
        Ok(Self {
            mode,
            seed,
            sigma_sq_bound,
            evals: (0..suite.agents()).map(|_| AtomicU64::new(0)).collect(),
            log: None,
        })
    }

    /// Records the sample indices of every minibatch draw.
    pub fn with_draw_log(mut self) -> Self {
        self.log = Some(Mutex::new(Vec::new()));
        self
    }

    pub fn mode(&self) -> OracleMode {
        self.mode
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Certified `σ²` with `E‖g_i − ∇f_i‖² ≤ σ²`. For minibatch oracles this
    /// is twice the largest exact per-agent minibatch variance at `x = 0` and
    /// at `x*`.
    pub fn sigma_sq_bound(&self) -> f64 {
        self.sigma_sq_bound
    }

    /// Samples touched by one evaluation.
    pub fn samples_per_eval(&self) -> u64 {
        match self.mode {
            OracleMode::Minibatch { batch, .. } => batch as u64,
            _ => 1,
        }
    }

    pub fn evaluations(&self, agent: usize) -> u64 {
        self.evals[agent].load(Ordering::Relaxed)
    }

    pub fn total_evaluations(&self) -> u64 {
        self.evals.iter().map(|e| e.load(Ordering::Relaxed)).sum()
    }

    pub fn take_draw_log(&self) -> Vec<DrawRecord> {
        self.log
            .as_ref()
            .map(|l| std::mem::take(&mut *l.lock().expect("draw log poisoned")))
            .unwrap_or_default()
    }

    /// Stochastic gradient `g_i(x, ξ_{i,k})` of agent `agent` at iteration
    /// `iteration`.
    pub fn stochastic_gradient(
        &self,
        suite: &ObjectiveSuite,
        agent: usize,
        iteration: u64,
        x: &[f64],
    ) -> Result<Vec<f64>, ObjectiveError> {
        let mut out = vec![0.0; suite.dim()];
        self.stochastic_gradient_into(suite, agent, iteration, x, &mut out)?;
        Ok(out)
    }

    pub fn stochastic_gradient_into(
        &self,
        suite: &ObjectiveSuite,
        agent: usize,
        iteration: u64,
        x: &[f64],
        out: &mut [f64],
    ) -> Result<(), ObjectiveError> {
        if agent >= suite.agents() {
            return Err(ObjectiveError::AgentOutOfRange {
                agent,
                n: suite.agents(),
            });
        }
        self.evals[agent].fetch_add(1, Ordering::Relaxed);
        match self.mode {
            OracleMode::Exact => suite.gradient_into(agent, x, out),
            OracleMode::AdditiveGaussian { sigma } => {
                suite.gradient_into(agent, x, out);
                if sigma > 0.0 {
                    let mut rng = substream(self.seed, Domain::Oracle, agent as u64, iteration);
                    let scale = sigma / (out.len() as f64).sqrt();
                    for o in out.iter_mut() {
                        *o += scale * rng.sample::<f64, _>(StandardNormal);
                    }
                }
            }
            OracleMode::Minibatch {
                batch,
                with_replacement,
            } => {
                let LocalObjective::Logistic { data, rows, reg } = suite.local(agent) else {
                    return Err(ObjectiveError::MinibatchOnQuadratic);
                };
                let mut rng = substream(self.seed, Domain::Oracle, agent as u64, iteration);
                let picks: Vec<usize> = if with_replacement {
                    (0..batch)
                        .map(|_| rng.random_range(0..rows.len()))
                        .collect()
                } else {
                    rand::seq::index::sample(&mut rng, rows.len(), batch).into_vec()
                };
                out.iter_mut().for_each(|v| *v = 0.0);
                for &pick in &picks {
                    logistic_sample_gradient_acc(data, rows[pick], x, out);
                }
                let inv = 1.0 / batch as f64;
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = *o * inv + 2.0 * reg * xi;
                }
                if let Some(log) = &self.log {
                    log.lock().expect("draw log poisoned").push(DrawRecord {
                        agent,
                        iteration,
                        samples: picks.iter().map(|&k| rows[k]).collect(),
                    });
                }
            }
        }
        Ok(())
    }
}

fn local_rows(suite: &ObjectiveSuite, agent: usize) -> &[usize] {
    match suite.local(agent) {
        LocalObjective::Logistic { rows, .. } => rows,
        LocalObjective::Quadratic { .. } => &[],
    }
}

/// Exact `E‖g_i − ∇f_i‖²` at `x` for a minibatch of `batch` local samples:
/// the finite-population variance of per-sample gradients divided by
/// `batch`, with the `(|S|−B)/(|S|−1)` correction when drawing without
/// replacement.
pub fn minibatch_variance(
    suite: &ObjectiveSuite,
    agent: usize,
    x: &[f64],
    batch: usize,
    with_replacement: bool,
) -> f64 {
    let LocalObjective::Logistic { data, rows, .. } = suite.local(agent) else {
        return 0.0;
    };
    let p = suite.dim();
    let m = rows.len();
    let per_sample: Vec<Vec<f64>> = rows
        .iter()
        .map(|&s| {
            let mut g = vec![0.0; p];
            logistic_sample_gradient_acc(data, s, x, &mut g);
            g
        })
        .collect();
    let mut mean = vec![0.0; p];
    for g in &per_sample {
        axpy(1.0 / m as f64, g, &mut mean);
    }
    let pop_var = per_sample.iter().map(|g| dist_sq(g, &mean)).sum::<f64>() / m as f64;
    let mut var = pop_var / batch as f64;
    if !with_replacement {
        var *= if m > 1 {
            (m - batch) as f64 / (m - 1) as f64
        } else {
            0.0
        };
    }
    var
}

fn certify_minibatch_variance(suite: &ObjectiveSuite, batch: usize, with_replacement: bool) -> f64 {
    let zero = vec![0.0; suite.dim()];
    let worst = (0..suite.agents())
        .flat_map(|i| {
            [
                minibatch_variance(suite, i, &zero, batch, with_replacement),
                minibatch_variance(suite, i, suite.x_star(), batch, with_replacement),
            ]
        })
        .fold(0.0, f64::max);
    2.0 * worst
}
