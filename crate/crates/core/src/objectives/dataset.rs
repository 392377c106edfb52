use std::fmt::Write as _;
use std::io::BufRead;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;

use super::ObjectiveError;
use crate::rng::{substream, Domain};

/// Fraction of synthetic labels flipped after planting the separator.
pub const SYNTHETIC_FLIP_RATE: f64 = 0.05;

/// Binary classification data: `M` dense feature rows and `±1` labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// Row-major `M × p`.
    features: Vec<f64>,
    labels: Vec<f64>,
    dim: usize,
}

impl Dataset {
    pub fn new(features: Vec<f64>, labels: Vec<f64>, dim: usize) -> Result<Self, ObjectiveError> {
        if dim == 0 {
            return Err(ObjectiveError::Invalid(
                "feature dimension must be positive".into(),
            ));
        }
        if features.len() != labels.len() * dim {
            return Err(ObjectiveError::Invalid(format!(
                "{} feature values do not form {} rows of dimension {dim}",
                features.len(),
                labels.len()
            )));
        }
        if let Some(pos) = labels.iter().position(|&b| b != 1.0 && b != -1.0) {
            return Err(ObjectiveError::Invalid(format!(
                "label {} of sample {pos} is not ±1",
                labels[pos]
            )));
        }
        Ok(Self {
            features,
            labels,
            dim,
        })
    }

    pub fn samples(&self) -> usize {
        self.labels.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn row(&self, s: usize) -> &[f64] {
        &self.features[s * self.dim..(s + 1) * self.dim]
    }

    #[inline]
    pub fn label(&self, s: usize) -> f64 {
        self.labels[s]
    }

    pub fn labels(&self) -> &[f64] {
        &self.labels
    }

    /// Reads LIBSVM text (`label idx:val ...`, 1-based indices).
    ///
    /// Labels `+1`/`-1` are kept; the `{1, 2}` convention maps `1 → +1` and
    /// `2 → -1`. `dim` fixes the feature dimension; otherwise the largest
    /// index seen is used. Malformed lines fail with their line number.
    pub fn read_libsvm<R: BufRead>(reader: R, dim: Option<usize>) -> Result<Self, ObjectiveError> {
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
        let mut raw_labels = Vec::new();
        let mut max_index = 0usize;
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| ObjectiveError::Io(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| ObjectiveError::Parse { line: line_no, msg };
            let mut tokens = line.split_whitespace();
            let label_tok = tokens.next().expect("nonempty line");
            let label: f64 = label_tok
                .parse()
                .map_err(|_| err(format!("bad label `{label_tok}`")))?;
            let mut row = Vec::new();
            for tok in tokens {
                let (i, v) = tok
                    .split_once(':')
                    .ok_or_else(|| err(format!("expected idx:val, got `{tok}`")))?;
                let i: usize = i
                    .parse()
                    .map_err(|_| err(format!("bad feature index `{i}`")))?;
                if i == 0 {
                    return Err(err("feature indices are 1-based".into()));
                }
                let v: f64 = v
                    .parse()
                    .map_err(|_| err(format!("bad feature value `{v}`")))?;
                if let Some(d) = dim {
                    if i > d {
                        return Err(err(format!("feature index {i} exceeds dimension {d}")));
                    }
                }
                max_index = max_index.max(i);
                row.push((i - 1, v));
            }
            raw_labels.push((line_no, label));
            rows.push(row);
        }

        let two_class_12 = raw_labels.iter().all(|&(_, b)| b == 1.0 || b == 2.0)
            && raw_labels.iter().any(|&(_, b)| b == 2.0);
        let mut labels = Vec::with_capacity(raw_labels.len());
        for &(line, b) in &raw_labels {
            let mapped = match b {
                _ if two_class_12 => {
                    if b == 1.0 {
                        1.0
                    } else {
                        -1.0
                    }
                }
                _ if b == 1.0 || b == -1.0 => b,
                _ => {
                    return Err(ObjectiveError::Parse {
                        line,
                        msg: format!("label {b} is not ±1 or in {{1, 2}}"),
                    })
                }
            };
            labels.push(mapped);
        }

        let dim = dim.unwrap_or(max_index);
        if dim == 0 {
            return Err(ObjectiveError::Invalid("dataset has no features".into()));
        }
        let mut features = vec![0.0; rows.len() * dim];
        for (s, row) in rows.iter().enumerate() {
            for &(i, v) in row {
                features[s * dim + i] = v;
            }
        }
        Self::new(features, labels, dim)
    }

    /// Writes LIBSVM text, omitting zero entries.
    pub fn to_libsvm(&self) -> String {
        let mut out = String::new();
        for s in 0..self.samples() {
            out.push_str(if self.labels[s] > 0.0 { "+1" } else { "-1" });
            for (i, v) in self.row(s).iter().enumerate() {
                if *v != 0.0 {
                    let _ = write!(out, " {}:{}", i + 1, v);
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Seeded stand-in for a real classification set: Gaussian features with
/// variance `1/p` per entry, labels from a planted linear separator, then a
/// 5% label-flip rate.
pub fn make_synthetic_classification(
    samples: usize,
    dim: usize,
    seed: u64,
) -> Result<Dataset, ObjectiveError> {
    if samples < 2 || dim == 0 {
        return Err(ObjectiveError::Invalid(format!(
            "synthetic dataset needs M >= 2 and p >= 1 (got M={samples}, p={dim})"
        )));
    }
    let mut rng = substream(seed, Domain::Dataset, samples as u64, dim as u64);
    let planted: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let scale = 1.0 / (dim as f64).sqrt();
    let mut features = Vec::with_capacity(samples * dim);
    let mut labels = Vec::with_capacity(samples);
    for _ in 0..samples {
        let row: Vec<f64> = (0..dim)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let margin = crate::linalg::dot(&row, &planted);
        let mut label = if margin >= 0.0 { 1.0 } else { -1.0 };
        if rng.random::<f64>() < SYNTHETIC_FLIP_RATE {
            label = -label;
        }
        features.extend_from_slice(&row);
        labels.push(label);
    }
    Dataset::new(features, labels, dim)
}

/// Splits sample indices into `n` contiguous blocks of a seeded shuffle.
/// Sizes differ by at most one; the first `M mod n` agents get the extra
/// sample.
pub fn partition_dataset(
    ds: &Dataset,
    n: usize,
    seed: u64,
) -> Result<Vec<Vec<usize>>, ObjectiveError> {
    let m = ds.samples();
    if n == 0 || n > m {
        return Err(ObjectiveError::TooManyAgents {
            agents: n,
            samples: m,
        });
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.shuffle(&mut substream(seed, Domain::Partition, m as u64, n as u64));
    let base = m / n;
    let extra = m % n;
    let mut parts = Vec::with_capacity(n);
    let mut start = 0;
    for i in 0..n {
        let len = base + usize::from(i < extra);
        parts.push(order[start..start + len].to_vec());
        start += len;
    }
    Ok(parts)
}
