use serde::{Deserialize, Serialize};

use super::runner::{HarnessError, SingleRun};
use crate::analysis::{
    default_window, mean_error_curve, sgd_neighborhood, theorem1_bound, theorem2_neighborhood,
    trailing_mean, AnalysisError, RunRecord, TheoreticalConstants,
};
use crate::methods::{ConsensusSchedule, Method};

/// Per-seed summary line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSeedEntry {
    pub seed: u64,
    pub csv: String,
    pub status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub plateau: Option<f64>,
    pub final_normalized_deviation: Option<f64>,
    pub comm_rounds_total: u64,
    pub grad_evals_total: u64,
    pub samples_total: u64,
}

/// All seeds of one method plus their cross-seed mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub entries: Vec<MethodSeedEntry>,
    pub seeds_ok: usize,
    /// Plateau of the seed-averaged error curve (successful seeds only).
    pub mean_plateau: Option<f64>,
    pub mean_final_normalized_deviation: Option<f64>,
    pub mean_comm_rounds_total: Option<f64>,
    pub mean_grad_evals_total: Option<f64>,
    /// Which theoretical neighborhood `bound` holds, if any applies.
    pub bound_kind: Option<String>,
    pub bound: Option<f64>,
    pub plateau_within_bound: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub alpha: f64,
    pub alpha_max: Option<f64>,
    /// Whether `alpha ≤ alpha_max`.
    pub alpha_ok: Option<bool>,
    pub window: usize,
    pub constants: Option<TheoreticalConstants>,
    pub methods: Vec<MethodSummary>,
}

fn window_for(len: usize, cap: usize) -> usize {
    default_window(len).min(cap).max(1)
}

fn limit_bound(method: Method, c: &TheoreticalConstants) -> Option<(String, f64)> {
    match method {
        Method::CentralizedSgd => Some((
            "sgd_neighborhood".into(),
            sgd_neighborhood(c.alpha, c.sigma_sq, c.gamma_bar),
        )),
        Method::CentralizedMinibatch => Some((
            "sgd_neighborhood_batch_n".into(),
            sgd_neighborhood(c.alpha, c.sigma_sq / c.n as f64, c.gamma_bar),
        )),
        Method::NearDgd(ConsensusSchedule::Constant { rounds }) => {
            let b = theorem1_bound(c, u64::MAX, rounds, 0.0).ok()?;
            Some(("theorem1_limit".into(), b.network + b.noise))
        }
        Method::NearDgd(_) => Some((
            "theorem2_neighborhood".into(),
            theorem2_neighborhood(c).ok()?,
        )),
        _ => None,
    }
}

/// Groups runs by method (in first-seen order) and reduces them.
pub fn summarize(
    runs: &[SingleRun],
    window_cap: usize,
    constants: Option<&TheoreticalConstants>,
    alpha: f64,
) -> Result<SummaryReport, HarnessError> {
    if runs.is_empty() {
        return Err(AnalysisError::EmptyRecord.into());
    }
    let len = runs
        .iter()
        .filter(|r| r.succeeded())
        .map(|r| r.record.len())
        .next();
    let window = window_for(len.unwrap_or(runs[0].record.len()), window_cap);

    let mut order: Vec<Method> = Vec::new();
    for r in runs {
        if !order.contains(&r.method) {
            order.push(r.method);
        }
    }

    let mut methods = Vec::new();
    for method in order {
        let group: Vec<&SingleRun> = runs.iter().filter(|r| r.method == method).collect();
        let entries = group
            .iter()
            .map(|r| {
                let plateau = if r.succeeded() {
                    trailing_mean(&r.record.mean_errors(), window).ok()
                } else {
                    None
                };
                MethodSeedEntry {
                    seed: r.seed,
                    csv: r.csv_name(),
                    status: if r.succeeded() {
                        "ok".into()
                    } else {
                        "diverged".into()
                    },
                    error: r.error.clone(),
                    plateau,
                    final_normalized_deviation: r.final_normalized_deviation,
                    comm_rounds_total: r.comm_rounds_total,
                    grad_evals_total: r.grad_evals_total,
                    samples_total: r.samples_total,
                }
            })
            .collect::<Vec<_>>();

        let ok: Vec<&SingleRun> = group.iter().copied().filter(|r| r.succeeded()).collect();
        let records: Vec<&RunRecord> = ok.iter().map(|r| &r.record).collect();
        let mean_plateau = if records.is_empty() {
            None
        } else {
            Some(trailing_mean(&mean_error_curve(&records)?, window)?)
        };
        let mean_of = |f: &dyn Fn(&SingleRun) -> f64| -> Option<f64> {
            (!ok.is_empty()).then(|| ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64)
        };
        let bound = constants.and_then(|c| limit_bound(method, c));
        methods.push(MethodSummary {
            method: method.label(),
            entries,
            seeds_ok: ok.len(),
            mean_plateau,
            mean_final_normalized_deviation: mean_of(&|r| {
                r.final_normalized_deviation.unwrap_or(f64::NAN)
            }),
            mean_comm_rounds_total: mean_of(&|r| r.comm_rounds_total as f64),
            mean_grad_evals_total: mean_of(&|r| r.grad_evals_total as f64),
            plateau_within_bound: bound.as_ref().zip(mean_plateau).map(|((_, b), p)| p <= *b),
            bound_kind: bound.as_ref().map(|(k, _)| k.clone()),
            bound: bound.map(|(_, b)| b),
        });
    }

    Ok(SummaryReport {
        alpha,
        alpha_max: constants.map(|c| c.alpha_max),
        alpha_ok: constants.map(|c| c.alpha_ok),
        window,
        constants: constants.cloned(),
        methods,
    })
}
