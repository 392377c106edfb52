//! Local objectives `f_i`, their global aggregate and reference solutions.
//!
//! Two families are supported: strongly convex quadratics
//! `f_i(x) = ½ xᵀA_i x − b_iᵀx` and ℓ2-regularized logistic regression over
//! a local sample set `S_i`,
//! `f_i(x) = (1/|S_i|) Σ_{s∈S_i} log(1 + exp(−b_s⟨A_s, x⟩)) + reg·‖x‖²`.
//!
//! Every local function is `μ_i`-strongly convex and `L_i`-smooth; the suite
//! stores these constants, their averages, and the minimizers of `f = Σ f_i`
//! and of each `f_i`.

mod dataset;
mod oracle;

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

pub use dataset::{make_synthetic_classification, partition_dataset, Dataset, SYNTHETIC_FLIP_RATE};
pub use oracle::{minibatch_variance, DrawRecord, OracleMode, StochasticOracle};

use crate::linalg::{axpy, dot, norm_sq, sigmoid, softplus};
use crate::rng::{substream, Domain};

/// Gradient-norm target for the logistic reference solver.
pub const LOGISTIC_GRAD_TOL: f64 = 1e-8;
/// Iteration budget for the logistic reference solver.
pub const SOLVER_MAX_ITERATIONS: usize = 1_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("i/o error: {0}")]
    Io(String),
    #[error("{0}")]
    Invalid(String),
    #[error("matrix of agent {agent} is not symmetric positive definite (λ_min = {lambda_min})")]
    NotPositiveDefinite { agent: usize, lambda_min: f64 },
    #[error("cannot split {samples} samples among {agents} agents")]
    TooManyAgents { agents: usize, samples: usize },
    #[error("reference solver did not reach ‖∇f‖ ≤ {tol} within {iterations} iterations (‖∇f‖ = {grad_norm})")]
    NoConvergence {
        iterations: usize,
        tol: f64,
        grad_norm: f64,
    },
    #[error("minibatch oracles need a logistic (sample-based) objective")]
    MinibatchOnQuadratic,
    #[error("batch size {batch} is invalid for agent {agent} holding {local} samples")]
    BadBatch {
        batch: usize,
        agent: usize,
        local: usize,
    },
    #[error("agent index {agent} out of range for {n} agents")]
    AgentOutOfRange { agent: usize, n: usize },
}

/// One agent's private objective.
#[derive(Debug, Clone)]
pub enum LocalObjective {
    Quadratic {
        a: DMatrix<f64>,
        b: Vec<f64>,
    },
    Logistic {
        data: Arc<Dataset>,
        rows: Vec<usize>,
        reg: f64,
    },
}

impl LocalObjective {
    pub fn value(&self, x: &[f64]) -> f64 {
        match self {
            Self::Quadratic { a, b } => {
                let xv = DVector::from_column_slice(x);
                0.5 * xv.dot(&(a * &xv)) - dot(b, x)
            }
            Self::Logistic { data, rows, reg } => {
                let loss: f64 = rows
                    .iter()
                    .map(|&s| softplus(-data.label(s) * dot(data.row(s), x)))
                    .sum();
                loss / rows.len() as f64 + reg * norm_sq(x)
            }
        }
    }

    /// Writes `∇f_i(x)` into `out`.
    pub fn gradient_into(&self, x: &[f64], out: &mut [f64]) {
        match self {
            Self::Quadratic { a, b } => {
                let p = b.len();
                for (r, o) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for c in 0..p {
                        acc += a[(r, c)] * x[c];
                    }
                    *o = acc - b[r];
                }
            }
            Self::Logistic { data, rows, reg } => {
                out.iter_mut().for_each(|v| *v = 0.0);
                for &s in rows {
                    logistic_sample_gradient_acc(data, s, x, out);
                }
                let inv = 1.0 / rows.len() as f64;
                for (o, xi) in out.iter_mut().zip(x) {
                    *o = *o * inv + 2.0 * reg * xi;
                }
            }
        }
    }

    /// `(μ_i, L_i)`. Quadratics use the extreme eigenvalues of `A_i`; the
    /// logistic bound is `2·reg + λ_max(A_Sᵀ A_S) / (4|S|)`, from the ¼ bound
    /// on the sigmoid derivative.
    fn curvature(&self) -> (f64, f64) {
        match self {
            Self::Quadratic { a, .. } => {
                let eig = a.clone().symmetric_eigen().eigenvalues;
                (eig.min(), eig.max())
            }
            Self::Logistic { data, rows, reg } => {
                let p = data.dim();
                let mut gram = DMatrix::<f64>::zeros(p, p);
                for &s in rows {
                    let r = DVector::from_column_slice(data.row(s));
                    gram.ger(1.0, &r, &r, 1.0);
                }
                let lam = gram.symmetric_eigen().eigenvalues.max().max(0.0);
                (2.0 * reg, 2.0 * reg + lam / (4.0 * rows.len() as f64))
            }
        }
    }
}

/// Adds the unregularized loss gradient of sample `s`,
/// `−b_s A_s σ(−b_s⟨A_s, x⟩)`, to `out`.
#[inline]
pub(crate) fn logistic_sample_gradient_acc(data: &Dataset, s: usize, x: &[f64], out: &mut [f64]) {
    let row = data.row(s);
    let b = data.label(s);
    let coef = -b * sigmoid(-b * dot(row, x));
    axpy(coef, row, out);
}

/// The local objectives of a network plus their constants and minimizers.
#[derive(Debug, Clone)]
pub struct ObjectiveSuite {
    n: usize,
    p: usize,
    locals: Vec<LocalObjective>,
    mu_list: Vec<f64>,
    lip_list: Vec<f64>,
    mu_bar: f64,
    lip_bar: f64,
    lip_max: f64,
    x_star: Vec<f64>,
    u_star_list: Vec<Vec<f64>>,
    f_star: f64,
}

impl ObjectiveSuite {
    /// Builds a quadratic suite from `(A_i, b_i)` pairs and solves for
    /// `x* = (Σ A_i)⁻¹ Σ b_i` and `u_i* = A_i⁻¹ b_i` directly.
    pub fn quadratic(terms: Vec<(DMatrix<f64>, Vec<f64>)>) -> Result<Self, ObjectiveError> {
        let n = terms.len();
        if n == 0 {
            return Err(ObjectiveError::Invalid(
                "a suite needs at least one agent".into(),
            ));
        }
        let p = terms[0].1.len();
        if p == 0 {
            return Err(ObjectiveError::Invalid(
                "decision dimension must be positive".into(),
            ));
        }
        let mut sum_a = DMatrix::<f64>::zeros(p, p);
        let mut sum_b = DVector::<f64>::zeros(p);
        let mut u_star_list = Vec::with_capacity(n);
        let mut locals = Vec::with_capacity(n);
        for (agent, (a, b)) in terms.into_iter().enumerate() {
            if a.nrows() != p || a.ncols() != p || b.len() != p {
                return Err(ObjectiveError::Invalid(format!(
                    "agent {agent} has mismatched dimensions"
                )));
            }
            if a != a.transpose() {
                return Err(ObjectiveError::NotPositiveDefinite {
                    agent,
                    lambda_min: f64::NAN,
                });
            }
            let lambda_min = a.clone().symmetric_eigen().eigenvalues.min();
            if !(lambda_min > 0.0) {
                return Err(ObjectiveError::NotPositiveDefinite { agent, lambda_min });
            }
            let bv = DVector::from_column_slice(&b);
            let chol = a
                .clone()
                .cholesky()
                .ok_or(ObjectiveError::NotPositiveDefinite { agent, lambda_min })?;
            u_star_list.push(chol.solve(&bv).as_slice().to_vec());
            sum_a += &a;
            sum_b += &bv;
            locals.push(LocalObjective::Quadratic { a, b });
        }
        let chol = sum_a
            .cholesky()
            .ok_or_else(|| ObjectiveError::Invalid("Σ A_i is not positive definite".into()))?;
        let x_star = chol.solve(&sum_b).as_slice().to_vec();
        Ok(Self::assemble(locals, p, x_star, u_star_list))
    }

    /// Builds a logistic suite over a partition of `data` and solves for the
    /// minimizers with accelerated gradient descent.
    pub fn logistic(
        data: Arc<Dataset>,
        parts: Vec<Vec<usize>>,
        reg: f64,
    ) -> Result<Self, ObjectiveError> {
        if parts.is_empty() {
            return Err(ObjectiveError::Invalid(
                "a suite needs at least one agent".into(),
            ));
        }
        if !(reg > 0.0) {
            return Err(ObjectiveError::Invalid(format!(
                "regularization weight {reg} must be positive"
            )));
        }
        if let Some(agent) = parts.iter().position(Vec::is_empty) {
            return Err(ObjectiveError::Invalid(format!(
                "agent {agent} holds no samples"
            )));
        }
        if parts.iter().flatten().any(|&s| s >= data.samples()) {
            return Err(ObjectiveError::Invalid(
                "partition references a missing sample".into(),
            ));
        }
        let p = data.dim();
        let locals: Vec<LocalObjective> = parts
            .into_iter()
            .map(|rows| LocalObjective::Logistic {
                data: Arc::clone(&data),
                rows,
                reg,
            })
            .collect();
        let curv: Vec<(f64, f64)> = locals.iter().map(LocalObjective::curvature).collect();

        let all: Vec<usize> = (0..locals.len()).collect();
        let x_star = solve_smooth(&locals, &all, &curv, p)?;
        let mut u_star_list = Vec::with_capacity(locals.len());
        for i in 0..locals.len() {
            u_star_list.push(solve_smooth(&locals, &[i], &curv, p)?);
        }
        Ok(Self::assemble(locals, p, x_star, u_star_list))
    }

    fn assemble(
        locals: Vec<LocalObjective>,
        p: usize,
        x_star: Vec<f64>,
        u_star_list: Vec<Vec<f64>>,
    ) -> Self {
        let n = locals.len();
        let (mu_list, lip_list): (Vec<f64>, Vec<f64>) =
            locals.iter().map(LocalObjective::curvature).unzip();
        let mu_bar = mu_list.iter().sum::<f64>() / n as f64;
        let lip_bar = lip_list.iter().sum::<f64>() / n as f64;
        let lip_max = lip_list.iter().copied().fold(f64::MIN, f64::max);
        let f_star = locals.iter().map(|f| f.value(&x_star)).sum();
        Self {
            n,
            p,
            locals,
            mu_list,
            lip_list,
            mu_bar,
            lip_bar,
            lip_max,
            x_star,
            u_star_list,
            f_star,
        }
    }

    pub fn agents(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    pub fn local(&self, agent: usize) -> &LocalObjective {
        &self.locals[agent]
    }

    pub fn is_logistic(&self) -> bool {
        matches!(self.locals[0], LocalObjective::Logistic { .. })
    }

    pub fn mu_list(&self) -> &[f64] {
        &self.mu_list
    }

    pub fn lip_list(&self) -> &[f64] {
        &self.lip_list
    }

    /// `μ_f̄ = (1/n) Σ μ_i`
    pub fn mu_bar(&self) -> f64 {
        self.mu_bar
    }

    /// `L_f̄ = (1/n) Σ L_i`
    pub fn lip_bar(&self) -> f64 {
        self.lip_bar
    }

    /// `L = max_i L_i`
    pub fn lip_max(&self) -> f64 {
        self.lip_max
    }

    pub fn x_star(&self) -> &[f64] {
        &self.x_star
    }

    pub fn u_star_list(&self) -> &[Vec<f64>] {
        &self.u_star_list
    }

    pub fn f_star(&self) -> f64 {
        self.f_star
    }

    /// Exact `∇f_i(x)`.
    pub fn gradient(&self, agent: usize, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.p];
        self.locals[agent].gradient_into(x, &mut g);
        g
    }

    pub fn gradient_into(&self, agent: usize, x: &[f64], out: &mut [f64]) {
        self.locals[agent].gradient_into(x, out);
    }

    pub fn value(&self, agent: usize, x: &[f64]) -> f64 {
        self.locals[agent].value(x)
    }

    /// `f(x) = Σ_i f_i(x)`
    pub fn total_value(&self, x: &[f64]) -> f64 {
        self.locals.iter().map(|f| f.value(x)).sum()
    }

    /// `∇f(x) = Σ_i ∇f_i(x)`
    pub fn total_gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut total = vec![0.0; self.p];
        let mut g = vec![0.0; self.p];
        for f in &self.locals {
            f.gradient_into(x, &mut g);
            axpy(1.0, &g, &mut total);
        }
        total
    }

    /// Optimality tolerance used for `x*` and `u_i*`.
    pub fn solver_tolerance(&self) -> f64 {
        if self.is_logistic() {
            LOGISTIC_GRAD_TOL
        } else {
            1e-10 * norm_sq(&self.x_star).sqrt().max(1.0)
        }
    }
}

/// Accelerated gradient descent with adaptive restart on `Σ_{i∈agents} f_i`.
fn solve_smooth(
    locals: &[LocalObjective],
    agents: &[usize],
    curv: &[(f64, f64)],
    p: usize,
) -> Result<Vec<f64>, ObjectiveError> {
    let mu: f64 = agents.iter().map(|&i| curv[i].0).sum();
    let lip: f64 = agents.iter().map(|&i| curv[i].1).sum();
    let momentum = (lip.sqrt() - mu.sqrt()) / (lip.sqrt() + mu.sqrt());
    let step = 1.0 / lip;

    let grad = |x: &[f64], out: &mut Vec<f64>, tmp: &mut Vec<f64>| {
        out.iter_mut().for_each(|v| *v = 0.0);
        for &i in agents {
            locals[i].gradient_into(x, tmp);
            axpy(1.0, tmp, out);
        }
    };

    let mut x = vec![0.0; p];
    let mut y = x.clone();
    let mut gx = vec![0.0; p];
    let mut gy = vec![0.0; p];
    let mut tmp = vec![0.0; p];
    grad(&x, &mut gx, &mut tmp);
    for _ in 0..SOLVER_MAX_ITERATIONS {
        if norm_sq(&gx).sqrt() <= LOGISTIC_GRAD_TOL {
            return Ok(x);
        }
        grad(&y, &mut gy, &mut tmp);
        let x_next: Vec<f64> = y.iter().zip(&gy).map(|(yi, gi)| yi - step * gi).collect();
        let dx: Vec<f64> = x_next.iter().zip(&x).map(|(a, b)| a - b).collect();
        // Gradient-based restart kills momentum once it points uphill.
        if dot(&gy, &dx) > 0.0 {
            y.clone_from(&x_next);
        } else {
            y = x_next
                .iter()
                .zip(&dx)
                .map(|(a, d)| a + momentum * d)
                .collect();
        }
        x = x_next;
        grad(&x, &mut gx, &mut tmp);
    }
    Err(ObjectiveError::NoConvergence {
        iterations: SOLVER_MAX_ITERATIONS,
        tol: LOGISTIC_GRAD_TOL,
        grad_norm: norm_sq(&gx).sqrt(),
    })
}

/// Parameters of a random quadratic suite.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticSpec {
    pub agents: usize,
    pub dim: usize,
    /// Spectrum range `[μ, L]`; every `A_i` has eigenvalues `μ` and `L`
    /// (when `dim ≥ 2`) with the rest uniform in between.
    pub mu: f64,
    pub lip: f64,
    /// Scale of the Gaussian linear terms `b_i`.
    pub offset_scale: f64,
    /// Replicate agent 0's function on every agent.
    pub identical: bool,
    pub seed: u64,
}

/// Random rotations of a fixed spectrum range, one per agent (or one shared
/// when `identical`).
pub fn random_quadratic_suite(spec: &QuadraticSpec) -> Result<ObjectiveSuite, ObjectiveError> {
    let QuadraticSpec {
        agents,
        dim,
        mu,
        lip,
        offset_scale,
        identical,
        seed,
    } = *spec;
    if agents == 0 || dim == 0 {
        return Err(ObjectiveError::Invalid(
            "quadratic suite needs n >= 1 and p >= 1".into(),
        ));
    }
    if !(mu > 0.0 && lip >= mu && lip.is_finite()) {
        return Err(ObjectiveError::Invalid(format!(
            "conditioning range [{mu}, {lip}] is invalid"
        )));
    }
    let make = |agent: usize| {
        let mut rng = substream(seed, Domain::Quadratic, agent as u64, dim as u64);
        let mut spectrum: Vec<f64> = (0..dim)
            .map(|_| mu + (lip - mu) * rng.random::<f64>())
            .collect();
        if dim >= 2 {
            spectrum[0] = mu;
            spectrum[dim - 1] = lip;
        }
        let g = DMatrix::<f64>::from_fn(dim, dim, |_, _| rng.sample(StandardNormal));
        let q = g.qr().q();
        let mut a = &q * DMatrix::from_diagonal(&DVector::from_vec(spectrum)) * q.transpose();
        a = (&a + a.transpose()) * 0.5;
        let b: Vec<f64> = (0..dim)
            .map(|_| offset_scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (a, b)
    };
    let terms = if identical {
        vec![make(0); agents]
    } else {
        (0..agents).map(make).collect()
    };
    ObjectiveSuite::quadratic(terms)
}
