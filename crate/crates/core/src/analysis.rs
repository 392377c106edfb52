//! Theoretical constants, bound calculators and per-iteration run metrics.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{dist_sq, norm_sq};
use crate::methods::{average_blocks, StackedState};
use crate::objectives::{ObjectiveSuite, StochasticOracle};
use crate::topology::ConsensusMatrix;

/// Plateau window used when none is given, capped at 20% of the record.
pub const DEFAULT_PLATEAU_WINDOW: usize = 2000;

pub const CSV_HEADER: &str = "k,t_k,comm_total,evals_total,mean_err,cons_dev,y_cons_dev,fgap";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("psi = {psi} is outside (0, {upper})")]
    PsiOutOfRange { psi: f64, upper: f64 },
    #[error("nu = 2·alpha·gamma = {nu} must be below 1")]
    NuTooLarge { nu: f64 },
    #[error("steplength must be positive and finite, got {0}")]
    BadAlpha(f64),
    #[error("c1 = {c1} is not below 1; the bound does not contract")]
    NotContractive { c1: f64 },
    #[error("initial point has {got} blocks of dimension {dim}, expected {expected} of dimension {expected_dim}")]
    Shape {
        expected: usize,
        expected_dim: usize,
        got: usize,
        dim: usize,
    },
    #[error("record is empty")]
    EmptyRecord,
    #[error("window {window} does not fit a record of {len} rows")]
    BadWindow { window: usize, len: usize },
    #[error("records have mismatched lengths: {expected} vs {got}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Constants of the convergence analysis for one problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoreticalConstants {
    pub n: usize,
    pub alpha: f64,
    pub beta: f64,
    pub sigma_sq: f64,
    pub mu_bar: f64,
    pub lip_bar: f64,
    pub lip_max: f64,
    /// `γ_i = μ_i L_i / (μ_i + L_i)`
    pub gamma_i_list: Vec<f64>,
    pub gamma: f64,
    /// `γ_f̄ = μ_f̄ L_f̄ / (μ_f̄ + L_f̄)`
    pub gamma_bar: f64,
    /// `ν = 2αγ`
    pub nu: f64,
    /// `Δ = nα²σ²`
    pub delta: f64,
    /// `D² = 2‖y₀−u*‖² + (8+2ν³)/ν³ ‖u*‖² + (2/ν²) Δ`
    pub d_sq: f64,
    pub psi: f64,
    /// `c₁ = (1+ψ)(1−2αγ_f̄)`
    pub c1: f64,
    /// `c₂² = α²(1+ψ⁻¹)L²D²`
    pub c2_sq: f64,
    /// `θ = max{β², (c₁+1)/2}`
    pub theta: f64,
    /// `C = max{‖x̄₀−x*‖², 2c₂²/(1−c₁)}`
    pub cap_c: f64,
    /// `min_i 2/(μ_i+L_i)`
    pub alpha_max: f64,
    /// Whether `α ≤ alpha_max`.
    pub alpha_ok: bool,
    /// `‖x̄₀−x*‖²`
    pub x0_err: f64,
    /// `‖y₀−u*‖²` over the stacked vector.
    pub y0_dist_sq: f64,
    /// `‖u*‖²` over the stacked vector.
    pub u_star_norm_sq: f64,
}

/// `μL/(μ+L)`
pub fn gamma_of(mu: f64, lip: f64) -> f64 {
    mu * lip / (mu + lip)
}

/// Open interval `(0, upper)` of admissible ψ; `upper` is infinite once
/// `2αγ_f̄ ≥ 1`.
pub fn psi_upper(alpha: f64, gamma_bar: f64) -> f64 {
    let two = 2.0 * alpha * gamma_bar;
    if two < 1.0 {
        two / (1.0 - two)
    } else {
        f64::INFINITY
    }
}

/// `min(½·upper, 0.1)`
pub fn default_psi(alpha: f64, gamma_bar: f64) -> f64 {
    (0.5 * psi_upper(alpha, gamma_bar)).min(0.1)
}

/// `D² = 2‖y₀−u*‖² + (8+2ν³)/ν³ ‖u*‖² + (2/ν²)Δ`
pub fn d_sq_formula(y0_dist_sq: f64, u_star_norm_sq: f64, nu: f64, delta: f64) -> f64 {
    let nu3 = nu * nu * nu;
    2.0 * y0_dist_sq + (8.0 + 2.0 * nu3) / nu3 * u_star_norm_sq + 2.0 / (nu * nu) * delta
}

/// Computes every constant from the problem data. `psi = None` selects the
/// default. A steplength above `alpha_max` only clears `alpha_ok`.
pub fn compute_constants(
    suite: &ObjectiveSuite,
    cm: &ConsensusMatrix,
    oracle: &StochasticOracle,
    alpha: f64,
    psi: Option<f64>,
    y0: &StackedState,
) -> Result<TheoreticalConstants, AnalysisError> {
    constants_from_parts(suite, cm.beta(), oracle.sigma_sq_bound(), alpha, psi, y0)
}

/// As [`compute_constants`] with `β` and `σ²` given directly.
pub fn constants_from_parts(
    suite: &ObjectiveSuite,
    beta: f64,
    sigma_sq: f64,
    alpha: f64,
    psi: Option<f64>,
    y0: &StackedState,
) -> Result<TheoreticalConstants, AnalysisError> {
    let (n, p) = (suite.agents(), suite.dim());
    if y0.agents() != n || y0.dim() != p {
        return Err(AnalysisError::Shape {
            expected: n,
            expected_dim: p,
            got: y0.agents(),
            dim: y0.dim(),
        });
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(AnalysisError::BadAlpha(alpha));
    }
    let gamma_i_list: Vec<f64> = suite
        .mu_list()
        .iter()
        .zip(suite.lip_list())
        .map(|(&m, &l)| gamma_of(m, l))
        .collect();
    let gamma = gamma_i_list.iter().copied().fold(f64::INFINITY, f64::min);
    let gamma_bar = gamma_of(suite.mu_bar(), suite.lip_bar());
    let alpha_max = suite
        .mu_list()
        .iter()
        .zip(suite.lip_list())
        .map(|(&m, &l)| 2.0 / (m + l))
        .fold(f64::INFINITY, f64::min);

    let nu = 2.0 * alpha * gamma;
    if nu >= 1.0 {
        return Err(AnalysisError::NuTooLarge { nu });
    }
    let upper = psi_upper(alpha, gamma_bar);
    let psi = psi.unwrap_or_else(|| default_psi(alpha, gamma_bar));
    if !(psi > 0.0 && psi < upper) {
        return Err(AnalysisError::PsiOutOfRange { psi, upper });
    }

    let delta = n as f64 * alpha * alpha * sigma_sq;
    let y0_dist_sq: f64 = suite
        .u_star_list()
        .iter()
        .zip(y0.blocks())
        .map(|(u, y)| dist_sq(y, u))
        .sum();
    let u_star_norm_sq: f64 = suite.u_star_list().iter().map(|u| norm_sq(u)).sum();
    let d_sq = d_sq_formula(y0_dist_sq, u_star_norm_sq, nu, delta);
    let c1 = (1.0 + psi) * (1.0 - 2.0 * alpha * gamma_bar);
    let lip_max = suite.lip_max();
    let c2_sq = alpha * alpha * (1.0 + 1.0 / psi) * lip_max * lip_max * d_sq;
    let theta = (beta * beta).max(0.5 * (c1 + 1.0));
    let x0_err = dist_sq(&average_blocks(y0), suite.x_star());
    let cap_c = x0_err.max(2.0 * c2_sq / (1.0 - c1));

    Ok(TheoreticalConstants {
        n,
        alpha,
        beta,
        sigma_sq,
        mu_bar: suite.mu_bar(),
        lip_bar: suite.lip_bar(),
        lip_max,
        gamma_i_list,
        gamma,
        gamma_bar,
        nu,
        delta,
        d_sq,
        psi,
        c1,
        c2_sq,
        theta,
        cap_c,
        alpha_max,
        alpha_ok: alpha <= alpha_max,
        x0_err,
        y0_dist_sq,
        u_star_norm_sq,
    })
}

/// `ασ²/(2γ)`
pub fn sgd_neighborhood(alpha: f64, sigma_sq: f64, gamma: f64) -> f64 {
    alpha * sigma_sq / (2.0 * gamma)
}

/// The three terms of the distance-to-minimum bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    /// `c₁ᵏ‖x̄₀−x*‖²`
    pub transient: f64,
    /// `c₂²β^{2t}/(1−c₁)`
    pub network: f64,
    /// `α²σ²/(n(1−c₁))`
    pub noise: f64,
}

impl BoundTerms {
    pub fn total(&self) -> f64 {
        self.transient + self.network + self.noise
    }
}

fn contractive(c: &TheoreticalConstants) -> Result<f64, AnalysisError> {
    if c.c1 < 1.0 {
        Ok(1.0 - c.c1)
    } else {
        Err(AnalysisError::NotContractive { c1: c.c1 })
    }
}

/// Bound on `E‖x̄_k − x*‖²` after `k` iterations with `t` rounds each.
pub fn theorem1_bound(
    c: &TheoreticalConstants,
    k: u64,
    t: u64,
    x0_err: f64,
) -> Result<BoundTerms, AnalysisError> {
    let gap = contractive(c)?;
    let exp_k = i32::try_from(k).unwrap_or(i32::MAX);
    let beta_2t = if t == 0 {
        1.0
    } else {
        c.beta.powf(2.0 * t as f64)
    };
    Ok(BoundTerms {
        transient: c.c1.max(0.0).powi(exp_k) * x0_err,
        network: c.c2_sq * beta_2t / gap,
        noise: c.alpha * c.alpha * c.sigma_sq / (c.n as f64 * gap),
    })
}

/// `α²σ²/(n(1−c₁))`
pub fn theorem2_neighborhood(c: &TheoreticalConstants) -> Result<f64, AnalysisError> {
    let gap = contractive(c)?;
    Ok(c.alpha * c.alpha * c.sigma_sq / (c.n as f64 * gap))
}

/// One metrics row of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunRow {
    pub k: u64,
    /// Rounds that produced this row's `x`.
    pub t_k: u64,
    /// Rounds spent by all completed iterations.
    pub comm_total: u64,
    pub evals_total: u64,
    /// `‖x̄_k − x*‖²`
    pub mean_err: f64,
    /// `(1/n) Σ ‖x_{i,k} − x̄_k‖²`
    pub cons_dev: f64,
    pub y_cons_dev: f64,
    /// `f(x̄_k) − f*`, clamped at zero.
    pub fgap: f64,
}

/// Builds a row from the stacks and the counters.
pub fn compute_metrics_row(
    k: u64,
    t_k: u64,
    comm_total: u64,
    evals_total: u64,
    x: &StackedState,
    y: &StackedState,
    suite: &ObjectiveSuite,
) -> RunRow {
    let x_bar = average_blocks(x);
    RunRow {
        k,
        t_k,
        comm_total,
        evals_total,
        mean_err: dist_sq(&x_bar, suite.x_star()),
        cons_dev: x.consensus_deviation(),
        y_cons_dev: y.consensus_deviation(),
        fgap: (suite.total_value(&x_bar) - suite.f_star()).max(0.0),
    }
}

/// `‖h_k − h̄_k‖²` with `h_k = (1/n)Σ∇f_i(x_i)` and `h̄_k = (1/n)Σ∇f_i(x̄)`.
pub fn gradient_disagreement(x: &StackedState, suite: &ObjectiveSuite) -> f64 {
    let x_bar = average_blocks(x);
    let p = suite.dim();
    let (mut h, mut h_bar, mut g) = (vec![0.0; p], vec![0.0; p], vec![0.0; p]);
    for (i, xi) in x.blocks().enumerate() {
        suite.gradient_into(i, xi, &mut g);
        h.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        suite.gradient_into(i, &x_bar, &mut g);
        h_bar.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    dist_sq(&h, &h_bar) / (x.agents() as f64).powi(2)
}

/// `√((1/n) Σ ‖x_i − x̄‖²) / ‖x̄‖`; zero when all blocks agree.
pub fn normalized_deviation(x: &StackedState) -> f64 {
    let dev = x.consensus_deviation();
    if dev == 0.0 {
        return 0.0;
    }
    dev.sqrt() / norm_sq(&average_blocks(x)).sqrt()
}

/// Ordered metric rows of one run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunRecord {
    rows: Vec<RunRow>,
}

impl RunRecord {
    pub fn from_rows(rows: Vec<RunRow>) -> Self {
        Self { rows }
    }

    pub fn push(&mut self, row: RunRow) {
        self.rows.push(row);
    }

    pub fn rows(&self) -> &[RunRow] {
        &self.rows
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn last(&self) -> Option<&RunRow> {
        self.rows.last()
    }

    pub fn mean_errors(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mean_err).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.k,
                r.t_k,
                r.comm_total,
                r.evals_total,
                r.mean_err,
                r.cons_dev,
                r.y_cons_dev,
                r.fgap
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)
            .expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("CSV is ASCII")
    }
}

/// Default trailing window: the last 2000 rows or the last 20%, whichever is
/// smaller (at least one row).
pub fn default_window(len: usize) -> usize {
    DEFAULT_PLATEAU_WINDOW.min(len / 5).max(1)
}

/// Mean of `series` over its trailing `window` entries.
pub fn trailing_mean(series: &[f64], window: usize) -> Result<f64, AnalysisError> {
    if series.is_empty() {
        return Err(AnalysisError::EmptyRecord);
    }
    if window == 0 || window > series.len() {
        return Err(AnalysisError::BadWindow {
            window,
            len: series.len(),
        });
    }
    let tail = &series[series.len() - window..];
    Ok(tail.iter().sum::<f64>() / window as f64)
}

/// Mean of `mean_err` over the trailing window (`None` selects
/// [`default_window`]).
pub fn plateau_estimate(record: &RunRecord, window: Option<usize>) -> Result<f64, AnalysisError> {
    let window = window.unwrap_or_else(|| default_window(record.len()));
    trailing_mean(&record.mean_errors(), window)
}

/// Row-wise mean of `mean_err` across equally long records.
pub fn mean_error_curve(records: &[&RunRecord]) -> Result<Vec<f64>, AnalysisError> {
    let first = records.first().ok_or(AnalysisError::EmptyRecord)?;
    let len = first.len();
    let mut acc = vec![0.0; len];
    for r in records {
        if r.len() != len {
            return Err(AnalysisError::LengthMismatch {
                expected: len,
                got: r.len(),
            });
        }
        acc.iter_mut()
            .zip(r.rows())
            .for_each(|(a, row)| *a += row.mean_err);
    }
    let inv = 1.0 / records.len() as f64;
    acc.iter_mut().for_each(|a| *a *= inv);
    Ok(acc)
}
