use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use super::config::{ConfigError, DatasetConfig, ExperimentConfig};
use super::summary::{summarize, SummaryReport};
use crate::analysis::{compute_constants, AnalysisError, RunRecord, TheoreticalConstants};
use crate::methods::{run, Method, MethodError, MethodState, Problem, StackedState};
use crate::objectives::{
    make_synthetic_classification, partition_dataset, random_quadratic_suite, Dataset,
    ObjectiveError, ObjectiveSuite, QuadraticSpec, StochasticOracle,
};
use crate::topology::{
    generate_graph, metropolis_weights, ConsensusMatrix, Topology, TopologyError,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Topology(#[from] TopologyError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
    #[error(transparent)]
    Method(#[from] MethodError),
}

impl HarnessError {
    fn io(path: &Path, source: io::Error) -> Self {
        Self::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

/// Graph, weights and objectives shared by every run at one agent count.
#[derive(Debug, Clone)]
pub struct Instance {
    pub topology: Topology,
    pub cm: ConsensusMatrix,
    pub suite: ObjectiveSuite,
    pub dataset: Option<Arc<Dataset>>,
    /// Steplength after resolving `alpha_relative`.
    pub alpha: f64,
    pub y0: StackedState,
}

/// Builds the problem instance of `cfg` with `n` agents.
pub fn build_instance(cfg: &ExperimentConfig, n: usize) -> Result<Instance, HarnessError> {
    let topology = generate_graph(cfg.graph_kind()?, n, cfg.graph.seed)?;
    let cm = metropolis_weights(&topology);
    let (suite, dataset) = match &cfg.dataset {
        DatasetConfig::Quadratic(q) => {
            let spec = QuadraticSpec {
                agents: n,
                dim: q.dim,
                mu: q.conditioning[0],
                lip: q.conditioning[1],
                offset_scale: q.offset_scale,
                identical: q.identical,
                seed: q.seed,
            };
            (random_quadratic_suite(&spec)?, None)
        }
        DatasetConfig::Synthetic {
            samples,
            features,
            seed,
            partition_seed,
            reg,
        } => {
            let ds = Arc::new(make_synthetic_classification(*samples, *features, *seed)?);
            (logistic_suite(&ds, n, *partition_seed, *reg)?, Some(ds))
        }
        DatasetConfig::Libsvm {
            path,
            features,
            partition_seed,
            reg,
        } => {
            let file = File::open(path).map_err(|e| HarnessError::io(path, e))?;
            let ds = Arc::new(Dataset::read_libsvm(BufReader::new(file), *features)?);
            (logistic_suite(&ds, n, *partition_seed, *reg)?, Some(ds))
        }
    };
    let dim = suite.dim();
    let y0_block = match &cfg.y0 {
        Some(v) if v.len() != dim => {
            return Err(ConfigError::Invalid {
                path: "y0".into(),
                message: format!("has {} entries, problem dimension is {dim}", v.len()),
            }
            .into())
        }
        Some(v) => v.clone(),
        None => vec![0.0; dim],
    };
    let alpha_max = suite
        .mu_list()
        .iter()
        .zip(suite.lip_list())
        .map(|(m, l)| 2.0 / (m + l))
        .fold(f64::INFINITY, f64::min);
    let alpha = if cfg.alpha_relative {
        cfg.alpha * alpha_max
    } else {
        cfg.alpha
    };
    Ok(Instance {
        topology,
        cm,
        suite,
        dataset,
        alpha,
        y0: StackedState::replicate(n, &y0_block),
    })
}

fn logistic_suite(
    ds: &Arc<Dataset>,
    n: usize,
    seed: u64,
    reg: Option<f64>,
) -> Result<ObjectiveSuite, HarnessError> {
    let parts = partition_dataset(ds, n, seed)?;
    let reg = reg.unwrap_or(1.0 / ds.samples() as f64);
    Ok(ObjectiveSuite::logistic(Arc::clone(ds), parts, reg)?)
}

impl Instance {
    /// Oracle for run seed `seed`.
    pub fn oracle(
        &self,
        cfg: &ExperimentConfig,
        seed: u64,
    ) -> Result<StochasticOracle, HarnessError> {
        Ok(StochasticOracle::new(cfg.oracle.mode(), &self.suite, seed)?)
    }

    pub fn constants(&self, cfg: &ExperimentConfig) -> Result<TheoreticalConstants, HarnessError> {
        let oracle = self.oracle(cfg, cfg.seeds[0])?;
        Ok(compute_constants(
            &self.suite,
            &self.cm,
            &oracle,
            self.alpha,
            cfg.psi,
            &self.y0,
        )?)
    }
}

/// Outcome of one (method, seed) run.
#[derive(Debug, Clone)]
pub struct SingleRun {
    pub method: Method,
    pub seed: u64,
    pub record: RunRecord,
    /// `None` when the run failed.
    pub final_normalized_deviation: Option<f64>,
    pub comm_rounds_total: u64,
    pub grad_evals_total: u64,
    pub samples_total: u64,
    pub error: Option<String>,
}

impl SingleRun {
    pub fn csv_name(&self) -> String {
        format!("{}__seed{}.csv", self.method.label(), self.seed)
    }

    pub fn succeeded(&self) -> bool {
        self.error.is_none()
    }
}

/// Runs one method for one seed. Failures are captured, not returned.
pub fn run_single(
    inst: &Instance,
    cfg: &ExperimentConfig,
    method: Method,
    seed: u64,
) -> Result<SingleRun, HarnessError> {
    let oracle = inst.oracle(cfg, seed)?;
    let state = MethodState::new(method, inst.alpha, &inst.y0, &inst.cm)?;
    let problem = Problem {
        cm: &inst.cm,
        oracle: &oracle,
        suite: &inst.suite,
    };
    let spe = oracle.samples_per_eval();
    Ok(match run(state, problem, cfg.iterations, |_| {}) {
        Ok(out) => SingleRun {
            method,
            seed,
            comm_rounds_total: out.final_state.comm_rounds_total(),
            grad_evals_total: out.final_state.grad_evals_total(),
            samples_total: out.final_state.samples_total(),
            final_normalized_deviation: Some(out.final_normalized_deviation),
            record: out.record,
            error: None,
        },
        Err(fail) => {
            let last = fail.record.last().copied();
            SingleRun {
                method,
                seed,
                comm_rounds_total: last.map_or(0, |r| r.comm_total),
                grad_evals_total: last.map_or(0, |r| r.evals_total),
                samples_total: last.map_or(0, |r| r.evals_total * spe),
                final_normalized_deviation: None,
                record: fail.record,
                error: Some(fail.error.to_string()),
            }
        }
    })
}

/// What [`run_experiment`] produced.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub summaries: Vec<(usize, SummaryReport)>,
    pub files: Vec<PathBuf>,
    pub runs: usize,
    pub failed_runs: usize,
}

impl ExperimentOutput {
    pub fn all_failed(&self) -> bool {
        self.runs > 0 && self.failed_runs == self.runs
    }
}

#[derive(Serialize)]
struct RatioEntry {
    method: String,
    plateaus: Vec<Option<f64>>,
    /// Plateau at each agent count divided by the plateau at the first.
    ratios: Vec<Option<f64>>,
}

#[derive(Serialize)]
struct PlateauRatios {
    agent_counts: Vec<usize>,
    methods: Vec<RatioEntry>,
}

/// Runs every (agent count, method, seed) combination and writes CSVs,
/// constants, summaries and (for sweeps) the plateau ratio file under
/// `cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, HarnessError> {
    cfg.validate()?;
    let counts = cfg.agent_counts();
    let sweep = cfg.agent_counts.is_some();
    let instances: Vec<Instance> = counts
        .iter()
        .map(|&n| build_instance(cfg, n))
        .collect::<Result<_, _>>()?;

    let root = cfg.output_dir.clone();
    let mut files = Vec::new();
    let mut summaries = Vec::new();
    let (mut runs_total, mut failed) = (0, 0);

    for (inst, &n) in instances.iter().zip(&counts) {
        let dir = if sweep {
            root.join(format!("n{n}"))
        } else {
            root.clone()
        };
        fs::create_dir_all(&dir).map_err(|e| HarnessError::io(&dir, e))?;

        let constants = inst.constants(cfg);
        let constants_json = match &constants {
            Ok(c) => serde_json::to_string_pretty(c).expect("constants serialize"),
            Err(e) => serde_json::to_string_pretty(&serde_json::json!({ "error": e.to_string() }))
                .expect("json"),
        };
        files.push(write_atomic(
            &dir.join("constants.json"),
            constants_json.as_bytes(),
        )?);
        files.push(write_atomic(
            &dir.join("topology.txt"),
            inst.topology.to_edge_list().as_bytes(),
        )?);
        files.push(write_atomic(
            &dir.join("consensus.csv"),
            inst.cm.to_csv().as_bytes(),
        )?);

        let jobs: Vec<(Method, u64)> = cfg
            .methods()
            .into_iter()
            .flat_map(|m| cfg.seeds.iter().map(move |&s| (m, s)))
            .collect();
        let runs: Vec<SingleRun> = jobs
            .par_iter()
            .map(|&(m, s)| run_single(inst, cfg, m, s))
            .collect::<Result<_, _>>()?;

        for r in &runs {
            files.push(write_atomic(
                &dir.join(r.csv_name()),
                r.record.to_csv().as_bytes(),
            )?);
        }
        runs_total += runs.len();
        failed += runs.iter().filter(|r| !r.succeeded()).count();

        let report = summarize(&runs, cfg.window, constants.as_ref().ok(), inst.alpha)?;
        let text = serde_json::to_string_pretty(&report).expect("summary serializes");
        files.push(write_atomic(&dir.join("summary.json"), text.as_bytes())?);
        summaries.push((n, report));
    }

    if sweep {
        let labels: Vec<String> = cfg.methods().iter().map(Method::label).collect();
        let methods = labels
            .iter()
            .map(|label| {
                let plateaus: Vec<Option<f64>> = summaries
                    .iter()
                    .map(|(_, rep)| {
                        rep.methods
                            .iter()
                            .find(|m| &m.method == label)
                            .and_then(|m| m.mean_plateau)
                    })
                    .collect();
                let ratios = plateaus
                    .iter()
                    .map(|p| Some((*p)? / plateaus[0]?))
                    .collect();
                RatioEntry {
                    method: label.clone(),
                    plateaus,
                    ratios,
                }
            })
            .collect();
        let doc = PlateauRatios {
            agent_counts: counts.clone(),
            methods,
        };
        let text = serde_json::to_string_pretty(&doc).expect("ratios serialize");
        files.push(write_atomic(
            &root.join("plateau_ratio.json"),
            text.as_bytes(),
        )?);
    }

    Ok(ExperimentOutput {
        summaries,
        files,
        runs: runs_total,
        failed_runs: failed,
    })
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<PathBuf, HarnessError> {
    let name = path
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp{}", std::process::id()));
    let write = || -> io::Result<()> {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = fs::remove_file(&tmp);
        HarnessError::io(path, e)
    })?;
    Ok(path.to_path_buf())
}
