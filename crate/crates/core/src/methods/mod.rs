//! Decentralized and centralized first-order methods as single-step state
//! machines.
//!
//! Every step is one synchronous round: all agents read the previous stacks,
//! then all write the next ones. Stochastic gradients for agent `i` at
//! iteration `k` always come from the oracle substream `(seed, i, k)`, so
//! methods sharing a seed share their sample draws.
//!
//! NEAR-DGD alternates `t(k)` consensus rounds with one local gradient step:
//! `x_k = Z^{t(k)} y_k`, then `y_{k+1} = x_k − α g(x_k, ξ_k)`.

mod schedule;
mod state;

use rand::Rng;
use thiserror::Error;

pub use schedule::ConsensusSchedule;
pub use state::{average_blocks, StackedState};

use crate::analysis::{compute_metrics_row, RunRecord};
use crate::linalg::axpy;
use crate::objectives::{ObjectiveError, ObjectiveSuite, StochasticOracle};
use crate::rng::{substream, Domain};
use crate::topology::{ConsensusMatrix, ConsensusPowers, TopologyError};

/// Any coordinate beyond this magnitude is treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MethodError {
    #[error("{method} diverged at iteration {iteration}")]
    Diverged { method: String, iteration: u64 },
    #[error("{method} failed at iteration {iteration}: {reason}")]
    Failed {
        method: String,
        iteration: u64,
        reason: String,
    },
    #[error("invalid consensus schedule: {0}")]
    BadSchedule(String),
    #[error("invalid steplength {0}")]
    BadStep(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

/// Optimization method with its configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    NearDgd(ConsensusSchedule),
    /// `x_{k+1} = W x_k − α g(x_k)`
    Dgd,
    /// EXTRA with `W̄ = (I + W)/2`.
    Extra,
    /// Distributed stochastic gradient tracking.
    Dsgt,
    /// SGD on `f̄` with one stochastic gradient of a uniformly chosen agent
    /// per iteration.
    CentralizedSgd,
    /// SGD on `f̄` averaging one draw per agent (batch `n·B` samples).
    CentralizedMinibatch,
}

impl Method {
    pub fn label(&self) -> String {
        match self {
            Self::NearDgd(s) => format!("near_dgd_{}", s.label()),
            Self::Dgd => "dgd".into(),
            Self::Extra => "extra".into(),
            Self::Dsgt => "dsgt".into(),
            Self::CentralizedSgd => "centralized_sgd".into(),
            Self::CentralizedMinibatch => "centralized_minibatch".into(),
        }
    }

    pub fn is_centralized(&self) -> bool {
        matches!(self, Self::CentralizedSgd | Self::CentralizedMinibatch)
    }

    pub fn validate(&self) -> Result<(), MethodError> {
        match self {
            Self::NearDgd(s) => s.validate(),
            _ => Ok(()),
        }
    }
}

/// Read-only pieces shared by every step of a run.
#[derive(Debug, Clone, Copy)]
pub struct Problem<'a> {
    pub cm: &'a ConsensusMatrix,
    pub oracle: &'a StochasticOracle,
    pub suite: &'a ObjectiveSuite,
}

/// What a completed step did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    /// Iteration index of the step (before increment).
    pub iteration: u64,
    /// Communication rounds spent.
    pub rounds: u64,
    /// Mean of the `n` stochastic gradients drawn at `x_k` (`ḡ_k`).
    pub mean_gradient: Vec<f64>,
}

/// Method-specific memory.
#[derive(Debug, Clone)]
enum Aux {
    None,
    Extra {
        prev: Option<ExtraMemory>,
    },
    Dsgt {
        tracker: Option<StackedState>,
        grad: Option<StackedState>,
    },
}

#[derive(Debug, Clone)]
struct ExtraMemory {
    x: StackedState,
    wx: StackedState,
    grad: StackedState,
}

/// State of one method on one problem.
///
/// For NEAR-DGD, `y` holds `y_k` and `x` the most recent consensus output.
/// For the other methods `x` is the iterate and `y` mirrors it. Centralized
/// methods keep a single block.
#[derive(Debug, Clone)]
pub struct MethodState {
    method: Method,
    alpha: f64,
    k: u64,
    x: StackedState,
    y: StackedState,
    aux: Aux,
    comm_rounds_total: u64,
    grad_evals_total: u64,
    samples_total: u64,
    last_rounds: u64,
    powers: ConsensusPowers,
    /// `Z^{t(k)} y_k`, computed early for diagnostics and reused by the step.
    pending_x: Option<(u64, StackedState)>,
}

impl MethodState {
    /// Starts `method` from the stacked point `y0` (one block per agent).
    /// Centralized methods start from the block average of `y0`.
    pub fn new(
        method: Method,
        alpha: f64,
        y0: &StackedState,
        cm: &ConsensusMatrix,
    ) -> Result<Self, MethodError> {
        method.validate()?;
        if !(alpha >= 0.0 && alpha.is_finite()) {
            return Err(MethodError::BadStep(alpha));
        }
        if y0.agents() != cm.n() {
            return Err(MethodError::Shape(format!(
                "initial point has {} blocks for {} agents",
                y0.agents(),
                cm.n()
            )));
        }
        let start = if method.is_centralized() {
            StackedState::replicate(1, &average_blocks(y0))
        } else {
            y0.clone()
        };
        let aux = match method {
            Method::Extra => Aux::Extra { prev: None },
            Method::Dsgt => Aux::Dsgt {
                tracker: None,
                grad: None,
            },
            _ => Aux::None,
        };
        Ok(Self {
            method,
            alpha,
            k: 0,
            x: start.clone(),
            y: start,
            aux,
            comm_rounds_total: 0,
            grad_evals_total: 0,
            samples_total: 0,
            last_rounds: 0,
            powers: ConsensusPowers::new(cm),
            pending_x: None,
        })
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn iteration(&self) -> u64 {
        self.k
    }

    pub fn comm_rounds_total(&self) -> u64 {
        self.comm_rounds_total
    }

    pub fn grad_evals_total(&self) -> u64 {
        self.grad_evals_total
    }

    pub fn samples_total(&self) -> u64 {
        self.samples_total
    }

    pub fn x(&self) -> &StackedState {
        &self.x
    }

    pub fn y(&self) -> &StackedState {
        &self.y
    }

    /// DSGT tracker stack, once initialized.
    pub fn tracker(&self) -> Option<&StackedState> {
        match &self.aux {
            Aux::Dsgt { tracker, .. } => tracker.as_ref(),
            _ => None,
        }
    }

    /// DSGT stochastic gradient stack at the current iterate.
    pub fn tracked_gradients(&self) -> Option<&StackedState> {
        match &self.aux {
            Aux::Dsgt { grad, .. } => grad.as_ref(),
            _ => None,
        }
    }

    fn fail(&self, reason: impl std::fmt::Display) -> MethodError {
        MethodError::Failed {
            method: self.method.label(),
            iteration: self.k,
            reason: reason.to_string(),
        }
    }

    fn topo_err(&self, e: TopologyError) -> MethodError {
        self.fail(e)
    }

    fn oracle_err(&self, e: ObjectiveError) -> MethodError {
        self.fail(e)
    }

    /// The current `(x_k, y_k)` pair and the rounds that produced `x_k`.
    ///
    /// For NEAR-DGD this computes `x_k = Z^{t(k)} y_k` ahead of the step
    /// (without charging communication; the step reuses it and charges
    /// then).
    pub fn current_view(&mut self) -> Result<(&StackedState, &StackedState, u64), MethodError> {
        match self.method {
            Method::NearDgd(schedule) => {
                let t = schedule.rounds_at(self.k);
                if self.pending_x.as_ref().map(|(k, _)| *k) != Some(self.k) {
                    let x = self
                        .powers
                        .apply(&self.y, t)
                        .map_err(|e| self.topo_err(e))?;
                    self.pending_x = Some((self.k, x));
                }
                let x = &self.pending_x.as_ref().expect("just computed").1;
                Ok((x, &self.y, t))
            }
            _ => Ok((&self.x, &self.y, self.last_rounds)),
        }
    }

    /// Advances one iteration.
    pub fn step(&mut self, problem: Problem<'_>) -> Result<StepInfo, MethodError> {
        let info = match self.method {
            Method::NearDgd(schedule) => self.near_dgd_step(schedule, problem)?,
            Method::Dgd => self.dgd_step(problem)?,
            Method::Extra => self.extra_step(problem)?,
            Method::Dsgt => self.dsgt_step(problem)?,
            Method::CentralizedSgd | Method::CentralizedMinibatch => {
                self.centralized_step(problem)?
            }
        };
        if !self.x.is_bounded(DIVERGENCE_LIMIT) || !self.y.is_bounded(DIVERGENCE_LIMIT) {
            return Err(MethodError::Diverged {
                method: self.method.label(),
                iteration: info.iteration,
            });
        }
        self.last_rounds = info.rounds;
        self.comm_rounds_total = self.comm_rounds_total.saturating_add(info.rounds);
        self.k += 1;
        Ok(info)
    }

    /// Draws `g_i(point_i, ξ_{i,key})` for every agent; returns the stack and
    /// its block mean.
    fn draw_all(
        &mut self,
        problem: Problem<'_>,
        point: &StackedState,
        key: u64,
    ) -> Result<(StackedState, Vec<f64>), MethodError> {
        let n = point.agents();
        let mut grads = StackedState::zeros(n, point.dim());
        for i in 0..n {
            problem
                .oracle
                .stochastic_gradient_into(problem.suite, i, key, point.block(i), grads.block_mut(i))
                .map_err(|e| self.oracle_err(e))?;
        }
        self.grad_evals_total += n as u64;
        self.samples_total += n as u64 * problem.oracle.samples_per_eval();
        let mean = average_blocks(&grads);
        Ok((grads, mean))
    }

    fn mix(&mut self, s: &StackedState, rounds: u64) -> Result<StackedState, MethodError> {
        self.powers.apply(s, rounds).map_err(|e| self.topo_err(e))
    }

    fn near_dgd_step(
        &mut self,
        schedule: ConsensusSchedule,
        problem: Problem<'_>,
    ) -> Result<StepInfo, MethodError> {
        let k = self.k;
        let t = schedule.rounds_at(k);
        let x = match self.pending_x.take() {
            Some((pk, x)) if pk == k => x,
            _ => self.mix(&self.y.clone(), t)?,
        };
        let (grads, mean_gradient) = self.draw_all(problem, &x, k)?;
        let mut y = x.clone();
        for i in 0..y.agents() {
            axpy(-self.alpha, grads.block(i), y.block_mut(i));
        }
        self.x = x;
        self.y = y;
        Ok(StepInfo {
            iteration: k,
            rounds: t,
            mean_gradient,
        })
    }

    fn dgd_step(&mut self, problem: Problem<'_>) -> Result<StepInfo, MethodError> {
        let k = self.k;
        let x = self.x.clone();
        let (grads, mean_gradient) = self.draw_all(problem, &x, k)?;
        let mut next = self.mix(&x, 1)?;
        for i in 0..next.agents() {
            axpy(-self.alpha, grads.block(i), next.block_mut(i));
        }
        self.y = next.clone();
        self.x = next;
        Ok(StepInfo {
            iteration: k,
            rounds: 1,
            mean_gradient,
        })
    }

    fn extra_step(&mut self, problem: Problem<'_>) -> Result<StepInfo, MethodError> {
        let k = self.k;
        let x = self.x.clone();
        let (grads, mean_gradient) = self.draw_all(problem, &x, k)?;
        let wx = self.mix(&x, 1)?;
        let alpha = self.alpha;
        let Aux::Extra { prev } = &mut self.aux else {
            unreachable!("EXTRA state without EXTRA memory")
        };
        let mut next = wx.clone();
        match prev.as_ref() {
            // x_1 = W x_0 − α g_0
            None => {
                for i in 0..next.agents() {
                    axpy(-alpha, grads.block(i), next.block_mut(i));
                }
            }
            // x_{k+1} = x_k + W x_k − ½(x_{k−1} + W x_{k−1}) − α(g_k − g_{k−1})
            Some(mem) => {
                for i in 0..next.agents() {
                    let out = next.block_mut(i);
                    let (xi, pxi, pwxi) = (x.block(i), mem.x.block(i), mem.wx.block(i));
                    let (gi, pgi) = (grads.block(i), mem.grad.block(i));
                    for d in 0..out.len() {
                        out[d] += xi[d] - 0.5 * (pxi[d] + pwxi[d]) - alpha * (gi[d] - pgi[d]);
                    }
                }
            }
        }
        *prev = Some(ExtraMemory { x, wx, grad: grads });
        self.y = next.clone();
        self.x = next;
        Ok(StepInfo {
            iteration: k,
            rounds: 1,
            mean_gradient,
        })
    }

    fn dsgt_step(&mut self, problem: Problem<'_>) -> Result<StepInfo, MethodError> {
        let k = self.k;
        let x = self.x.clone();
        let initialized = matches!(
            &self.aux,
            Aux::Dsgt {
                tracker: Some(_),
                ..
            }
        );
        if !initialized {
            let (g0, _) = self.draw_all(problem, &x, k)?;
            self.aux = Aux::Dsgt {
                tracker: Some(g0.clone()),
                grad: Some(g0),
            };
        }
        let Aux::Dsgt {
            tracker: Some(s),
            grad: Some(g),
        } = &self.aux
        else {
            unreachable!()
        };
        let (s, g) = (s.clone(), g.clone());
        let mean_gradient = average_blocks(&g);

        // x_{k+1} = W (x_k − α s_k)
        let mut local = x;
        for i in 0..local.agents() {
            axpy(-self.alpha, s.block(i), local.block_mut(i));
        }
        let next = self.mix(&local, 1)?;
        // s_{k+1} = W s_k + g_{k+1} − g_k
        let (g_next, _) = self.draw_all(problem, &next, k + 1)?;
        let mut s_next = self.mix(&s, 1)?;
        for i in 0..s_next.agents() {
            axpy(1.0, g_next.block(i), s_next.block_mut(i));
            axpy(-1.0, g.block(i), s_next.block_mut(i));
        }
        self.aux = Aux::Dsgt {
            tracker: Some(s_next),
            grad: Some(g_next),
        };
        self.y = next.clone();
        self.x = next;
        Ok(StepInfo {
            iteration: k,
            rounds: 2,
            mean_gradient,
        })
    }

    fn centralized_step(&mut self, problem: Problem<'_>) -> Result<StepInfo, MethodError> {
        let k = self.k;
        let n = problem.suite.agents();
        let p = problem.suite.dim();
        let x = self.x.block(0).to_vec();
        let mut g = vec![0.0; p];
        let agents: Vec<usize> = match self.method {
            Method::CentralizedSgd if n > 1 => {
                vec![
                    substream(problem.oracle.seed(), Domain::CentralChoice, k, 0)
                        .random_range(0..n),
                ]
            }
            Method::CentralizedSgd => vec![0],
            _ => (0..n).collect(),
        };
        let mut draw = vec![0.0; p];
        for &j in &agents {
            problem
                .oracle
                .stochastic_gradient_into(problem.suite, j, k, &x, &mut draw)
                .map_err(|e| self.oracle_err(e))?;
            axpy(1.0, &draw, &mut g);
        }
        let inv = 1.0 / agents.len() as f64;
        g.iter_mut().for_each(|v| *v *= inv);
        self.grad_evals_total += agents.len() as u64;
        self.samples_total += agents.len() as u64 * problem.oracle.samples_per_eval();

        let mut next = self.x.clone();
        axpy(-self.alpha, &g, next.block_mut(0));
        self.y = next.clone();
        self.x = next;
        Ok(StepInfo {
            iteration: k,
            rounds: 0,
            mean_gradient: g,
        })
    }
}

/// Per-row view handed to run observers.
#[derive(Debug)]
pub struct Observation<'a> {
    pub k: u64,
    pub x: &'a StackedState,
    pub y: &'a StackedState,
    /// Rounds that produced `x` (see [`MethodState::current_view`]).
    pub rounds: u64,
    /// The step that led to this row (`None` for the initial row).
    pub step: Option<&'a StepInfo>,
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: RunRecord,
    pub final_state: MethodState,
    /// `√((1/n) Σ ‖x_{i,N} − x̄_N‖²) / ‖x̄_N‖`
    pub final_normalized_deviation: f64,
}

/// A run that stopped early, with the rows recorded before the failure.
#[derive(Debug, Clone, Error)]
#[error("{error}")]
pub struct RunFailure {
    #[source]
    pub error: MethodError,
    pub record: RunRecord,
}

/// Executes `iterations` steps, emitting the initial row plus one metrics
/// row per iteration. `observer` sees every row's `(x_k, y_k)` pair.
pub fn run(
    mut state: MethodState,
    problem: Problem<'_>,
    iterations: u64,
    mut observer: impl FnMut(&Observation<'_>),
) -> Result<RunOutput, RunFailure> {
    let mut record = RunRecord::default();
    let mut last_step: Option<StepInfo> = None;
    loop {
        let comm = state.comm_rounds_total;
        let evals = state.grad_evals_total;
        let k = state.k;
        let (x, y, rounds) = match state.current_view() {
            Ok(v) => v,
            Err(error) => return Err(RunFailure { error, record }),
        };
        record.push(compute_metrics_row(
            k,
            rounds,
            comm,
            evals,
            x,
            y,
            problem.suite,
        ));
        observer(&Observation {
            k,
            x,
            y,
            rounds,
            step: last_step.as_ref(),
        });
        if k >= iterations {
            break;
        }
        match state.step(problem) {
            Ok(info) => last_step = Some(info),
            Err(error) => return Err(RunFailure { error, record }),
        }
    }
    let final_normalized_deviation = match state.current_view() {
        Ok((x, _, _)) => crate::analysis::normalized_deviation(x),
        Err(error) => return Err(RunFailure { error, record }),
    };
    Ok(RunOutput {
        record,
        final_state: state,
        final_normalized_deviation,
    })
}
