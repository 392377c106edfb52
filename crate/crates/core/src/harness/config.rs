use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::methods::{ConsensusSchedule, Method};
use crate::objectives::OracleMode;
use crate::topology::GraphKind;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config error at `{path}`: {message}")]
    Invalid { path: String, message: String },
}

impl ConfigError {
    fn at(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Invalid {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Dotted path of the offending key (`.` for the document root).
    pub fn path(&self) -> &str {
        match self {
            Self::Invalid { path, .. } => path,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GraphConfig {
    /// One of `erdos_renyi`, `path`, `ring`, `complete`, `star`.
    pub kind: String,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_edge: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuadraticConfig {
    pub dim: usize,
    /// `[μ, L]` shared by every agent.
    pub conditioning: [f64; 2],
    #[serde(default = "default_offset_scale")]
    pub offset_scale: f64,
    /// Every agent gets the same `(A, b)`.
    #[serde(default)]
    pub identical: bool,
    #[serde(default)]
    pub seed: u64,
}

fn default_offset_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetConfig {
    Synthetic {
        samples: usize,
        features: usize,
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        partition_seed: u64,
        /// Defaults to `1/M`.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reg: Option<f64>,
    },
    Libsvm {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        features: Option<usize>,
        #[serde(default)]
        partition_seed: u64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        reg: Option<f64>,
    },
    Quadratic(QuadraticConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleConfig {
    Exact {},
    AdditiveGaussian {
        sigma: f64,
    },
    Minibatch {
        batch: usize,
        #[serde(default = "default_true")]
        with_replacement: bool,
    },
}

fn default_true() -> bool {
    true
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self::Exact {}
    }
}

impl OracleConfig {
    pub fn mode(&self) -> OracleMode {
        match *self {
            Self::Exact {} => OracleMode::Exact,
            Self::AdditiveGaussian { sigma } => OracleMode::AdditiveGaussian { sigma },
            Self::Minibatch {
                batch,
                with_replacement,
            } => OracleMode::Minibatch {
                batch,
                with_replacement,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    Constant { rounds: u64 },
    Increasing {},
    Doubling { initial: u64, period: u64 },
}

impl ScheduleConfig {
    pub fn schedule(&self) -> ConsensusSchedule {
        match *self {
            Self::Constant { rounds } => ConsensusSchedule::Constant { rounds },
            Self::Increasing {} => ConsensusSchedule::Increasing,
            Self::Doubling { initial, period } => ConsensusSchedule::Doubling { initial, period },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MethodConfig {
    NearDgd { schedule: ScheduleConfig },
    Dgd {},
    Extra {},
    Dsgt {},
    CentralizedSgd {},
    CentralizedMinibatch {},
}

impl MethodConfig {
    pub fn method(&self) -> Method {
        match *self {
            Self::NearDgd { schedule } => Method::NearDgd(schedule.schedule()),
            Self::Dgd {} => Method::Dgd,
            Self::Extra {} => Method::Extra,
            Self::Dsgt {} => Method::Dsgt,
            Self::CentralizedSgd {} => Method::CentralizedSgd,
            Self::CentralizedMinibatch {} => Method::CentralizedMinibatch,
        }
    }
}

fn default_window() -> usize {
    crate::analysis::DEFAULT_PLATEAU_WINDOW
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

/// A complete experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub graph: GraphConfig,
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    pub methods: Vec<MethodConfig>,
    pub alpha: f64,
    /// Interpret `alpha` as a multiple of `min_i 2/(μ_i+L_i)`.
    #[serde(default)]
    pub alpha_relative: bool,
    pub iterations: u64,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub psi: Option<f64>,
    /// Initial point shared by every agent; zero when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub y0: Option<Vec<f64>>,
    /// Upper limit on the plateau window (also capped at 20% of the run).
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Repeat the experiment for each agent count, overriding `graph.n`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub agent_counts: Option<Vec<usize>>,
}

/// Parses and validates a JSON document.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        ConfigError::at(path, e.into_inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::at(".", format!("{}: {e}", path.display())))?;
        let mut cfg = parse_config(&text)?;
        if let Some(base) = path.parent() {
            cfg.resolve_paths(base);
        }
        Ok(cfg)
    }

    /// Makes a relative dataset path relative to `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let DatasetConfig::Libsvm { path, .. } = &mut self.dataset {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn graph_kind(&self) -> Result<GraphKind, ConfigError> {
        match self.graph.kind.as_str() {
            "erdos_renyi" => {
                let p = self.graph.p_edge.ok_or_else(|| ConfigError::at("graph.p_edge", "required for erdos_renyi"))?;
                Ok(GraphKind::ErdosRenyi { p })
            }
            "path" => Ok(GraphKind::Path),
            "ring" => Ok(GraphKind::Ring),
            "complete" => Ok(GraphKind::Complete),
            "star" => Ok(GraphKind::Star),
            other => Err(ConfigError::at(
                "graph.kind",
                format!("unknown graph kind `{other}` (expected erdos_renyi, path, ring, complete or star)"),
            )),
        }
    }

    pub fn methods(&self) -> Vec<Method> {
        self.methods.iter().map(MethodConfig::method).collect()
    }

    /// Agent counts this config runs.
    pub fn agent_counts(&self) -> Vec<usize> {
        self.agent_counts
            .clone()
            .unwrap_or_else(|| vec![self.graph.n])
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.graph_kind()?;
        if let Some(p) = self.graph.p_edge {
            if !(p > 0.0 && p <= 1.0) {
                return Err(ConfigError::at(
                    "graph.p_edge",
                    format!("must lie in (0, 1], got {p}"),
                ));
            }
        }
        if self.graph.n == 0 {
            return Err(ConfigError::at("graph.n", "must be at least 1"));
        }
        if let Some(counts) = &self.agent_counts {
            if counts.is_empty() || counts.contains(&0) {
                return Err(ConfigError::at(
                    "agent_counts",
                    "must be a nonempty list of positive counts",
                ));
            }
        }
        match &self.dataset {
            DatasetConfig::Synthetic {
                samples,
                features,
                reg,
                ..
            } => {
                if *samples < 2 {
                    return Err(ConfigError::at("dataset.samples", "must be at least 2"));
                }
                if *features == 0 {
                    return Err(ConfigError::at("dataset.features", "must be at least 1"));
                }
                check_reg(*reg)?;
            }
            DatasetConfig::Libsvm { features, reg, .. } => {
                if *features == Some(0) {
                    return Err(ConfigError::at("dataset.features", "must be at least 1"));
                }
                check_reg(*reg)?;
            }
            DatasetConfig::Quadratic(q) => {
                if q.dim == 0 {
                    return Err(ConfigError::at("dataset.dim", "must be at least 1"));
                }
                let [mu, lip] = q.conditioning;
                if !(mu > 0.0 && lip >= mu && lip.is_finite()) {
                    return Err(ConfigError::at(
                        "dataset.conditioning",
                        format!("need 0 < mu <= L, got [{mu}, {lip}]"),
                    ));
                }
                if !(q.offset_scale >= 0.0 && q.offset_scale.is_finite()) {
                    return Err(ConfigError::at(
                        "dataset.offset_scale",
                        "must be finite and nonnegative",
                    ));
                }
            }
        }
        match (&self.oracle, &self.dataset) {
            (OracleConfig::AdditiveGaussian { sigma }, _)
                if !(*sigma >= 0.0 && sigma.is_finite()) =>
            {
                return Err(ConfigError::at(
                    "oracle.sigma",
                    format!("must be finite and nonnegative, got {sigma}"),
                ));
            }
            (OracleConfig::Minibatch { batch: 0, .. }, _) => {
                return Err(ConfigError::at("oracle.batch", "must be at least 1"));
            }
            (OracleConfig::Minibatch { .. }, DatasetConfig::Quadratic(_)) => {
                return Err(ConfigError::at(
                    "oracle.mode",
                    "minibatch sampling needs a dataset",
                ));
            }
            _ => {}
        }
        if self.methods.is_empty() {
            return Err(ConfigError::at(
                "methods",
                "at least one method is required",
            ));
        }
        for (i, m) in self.methods.iter().enumerate() {
            m.method()
                .validate()
                .map_err(|e| ConfigError::at(format!("methods[{i}].schedule"), e.to_string()))?;
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(ConfigError::at(
                "alpha",
                format!("must be positive and finite, got {}", self.alpha),
            ));
        }
        if self.iterations == 0 {
            return Err(ConfigError::at("iterations", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(ConfigError::at("seeds", "at least one seed is required"));
        }
        if let Some(psi) = self.psi {
            if !(psi > 0.0 && psi.is_finite()) {
                return Err(ConfigError::at(
                    "psi",
                    format!("must be positive, got {psi}"),
                ));
            }
        }
        if let Some(y0) = &self.y0 {
            if y0.iter().any(|v| !v.is_finite()) {
                return Err(ConfigError::at("y0", "entries must be finite"));
            }
            let dim = match &self.dataset {
                DatasetConfig::Synthetic { features, .. } => Some(*features),
                DatasetConfig::Libsvm { features, .. } => *features,
                DatasetConfig::Quadratic(q) => Some(q.dim),
            };
            if let Some(dim) = dim {
                if y0.len() != dim {
                    return Err(ConfigError::at(
                        "y0",
                        format!("has {} entries, problem dimension is {dim}", y0.len()),
                    ));
                }
            }
        }
        if self.window == 0 {
            return Err(ConfigError::at("window", "must be at least 1"));
        }
        let mut labels: Vec<String> = self.methods().iter().map(Method::label).collect();
        labels.sort();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return Err(ConfigError::at("methods", "duplicate method entries"));
        }
        Ok(())
    }
}

fn check_reg(reg: Option<f64>) -> Result<(), ConfigError> {
    match reg {
        Some(r) if !(r > 0.0 && r.is_finite()) => Err(ConfigError::at(
            "dataset.reg",
            format!("must be positive, got {r}"),
        )),
        _ => Ok(()),
    }
}
