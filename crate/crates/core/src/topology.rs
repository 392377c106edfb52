//! Network graphs and consensus (mixing) matrices.
//!
//! A [`Topology`] is an undirected connected graph over `n` agents. The
//! [`ConsensusMatrix`] built from it is symmetric, doubly stochastic, has a
//! strictly positive diagonal and is supported exactly on the graph edges.
//! Its second-largest singular value `beta` is the per-round contraction
//! factor of the distance to consensus.
//!
//! The stacked operator `W ⊗ I_p` is never formed; mixing applies the
//! `n × n` weights blockwise to the `n` agent blocks of a [`StackedState`].

use std::collections::{BTreeSet, VecDeque};
use std::fmt::Write as _;

use nalgebra::DMatrix;
use rand::Rng;
use thiserror::Error;

use crate::methods::StackedState;
use crate::rng::{substream, Domain};

/// Maximum number of Erdős–Rényi samples drawn while looking for a
/// connected graph.
pub const ER_MAX_ATTEMPTS: u32 = 64;

#[derive(Debug, Error, PartialEq)]
pub enum TopologyError {
    #[error("a network needs at least one agent")]
    NoAgents,
    #[error("edge probability {0} is outside (0, 1]")]
    BadProbability(f64),
    #[error(
        "no connected Erdős–Rényi graph with n={n}, p={p} in {attempts} attempts \
         (likely disconnected regime)"
    )]
    LikelyDisconnected { n: usize, p: f64, attempts: u32 },
    #[error("edge ({0}, {1}) is a self-loop")]
    SelfLoop(usize, usize),
    #[error("edge ({i}, {j}) references an agent outside [0, {n})")]
    AgentOutOfRange { i: usize, j: usize, n: usize },
    #[error("graph is not connected")]
    Disconnected,
    #[error("edge list line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("mixing matrix violates the consensus-matrix contract: {0}")]
    InvalidWeights(String),
    #[error("state has {got} blocks but the consensus matrix is {expected}x{expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Graph family for [`generate_graph`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GraphKind {
    ErdosRenyi { p: f64 },
    Path,
    Ring,
    Complete,
    Star,
}

/// Undirected connected graph over agents `0..n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    n: usize,
    /// Normalized so that `i < j`.
    edges: BTreeSet<(usize, usize)>,
    /// Erdős–Rényi samples rejected before this one was accepted.
    resamples: u32,
}

impl Topology {
    /// Builds a topology from an edge set, enforcing the invariants
    /// (agents in range, no self-loops, connected). Duplicate and reversed
    /// pairs collapse onto one undirected edge.
    pub fn new(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, TopologyError> {
        let topo = Self::unchecked(n, edges)?;
        if !topo.is_connected() {
            return Err(TopologyError::Disconnected);
        }
        Ok(topo)
    }

    fn unchecked(
        n: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Result<Self, TopologyError> {
        if n == 0 {
            return Err(TopologyError::NoAgents);
        }
        let mut set = BTreeSet::new();
        for (i, j) in edges {
            if i >= n || j >= n {
                return Err(TopologyError::AgentOutOfRange { i, j, n });
            }
            if i == j {
                return Err(TopologyError::SelfLoop(i, j));
            }
            set.insert((i.min(j), i.max(j)));
        }
        Ok(Self {
            n,
            edges: set,
            resamples: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges.iter().copied()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn resamples(&self) -> u32 {
        self.resamples
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.edges.contains(&(i.min(j), i.max(j)))
    }

    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(i, j) in &self.edges {
            deg[i] += 1;
            deg[j] += 1;
        }
        deg
    }

    /// Neighbor lists in ascending agent order.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.n];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }

    pub fn is_connected(&self) -> bool {
        let adj = self.neighbors();
        let mut seen = vec![false; self.n];
        let mut queue = VecDeque::from([0usize]);
        seen[0] = true;
        let mut visited = 1;
        while let Some(u) = queue.pop_front() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    visited += 1;
                    queue.push_back(v);
                }
            }
        }
        visited == self.n
    }

    /// Serializes as `n <count>` followed by one `i j` line per edge.
    pub fn to_edge_list(&self) -> String {
        let mut out = format!("n {}\n", self.n);
        for &(i, j) in &self.edges {
            let _ = writeln!(out, "{i} {j}");
        }
        out
    }

    /// Parses the edge-list format written by [`Topology::to_edge_list`].
    /// Blank lines are ignored.
    pub fn from_edge_list(text: &str) -> Result<Self, TopologyError> {
        let mut lines = text
            .lines()
            .enumerate()
            .map(|(idx, l)| (idx + 1, l.trim()))
            .filter(|(_, l)| !l.is_empty());
        let parse_err = |line: usize, msg: &str| TopologyError::Parse {
            line,
            msg: msg.to_string(),
        };

        let (line_no, header) = lines
            .next()
            .ok_or_else(|| parse_err(1, "missing `n <count>` header"))?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some("n") {
            return Err(parse_err(line_no, "header must start with `n`"));
        }
        let n: usize = parts
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| parse_err(line_no, "agent count is not a nonnegative integer"))?;
        if parts.next().is_some() {
            return Err(parse_err(line_no, "trailing tokens after agent count"));
        }

        let mut edges = Vec::new();
        for (line_no, line) in lines {
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 2 {
                return Err(parse_err(line_no, "expected two agent indices"));
            }
            let i: usize = fields[0]
                .parse()
                .map_err(|_| parse_err(line_no, "bad agent index"))?;
            let j: usize = fields[1]
                .parse()
                .map_err(|_| parse_err(line_no, "bad agent index"))?;
            edges.push((i, j));
        }
        Self::new(n, edges)
    }
}

/// Generates a connected graph of the requested family.
///
/// Erdős–Rényi graphs are resampled from fresh substreams of `seed` until a
/// connected sample appears; the number of rejected samples is kept in
/// [`Topology::resamples`]. Deterministic families ignore `seed`.
pub fn generate_graph(kind: GraphKind, n: usize, seed: u64) -> Result<Topology, TopologyError> {
    if n == 0 {
        return Err(TopologyError::NoAgents);
    }
    let edges: Vec<(usize, usize)> = match kind {
        GraphKind::Path => (1..n).map(|i| (i - 1, i)).collect(),
        GraphKind::Ring => match n {
            1 => vec![],
            2 => vec![(0, 1)],
            _ => (0..n).map(|i| (i, (i + 1) % n)).collect(),
        },
        GraphKind::Complete => (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .collect(),
        GraphKind::Star => (1..n).map(|i| (0, i)).collect(),
        GraphKind::ErdosRenyi { p } => {
            if !(p > 0.0 && p <= 1.0) {
                return Err(TopologyError::BadProbability(p));
            }
            for attempt in 0..ER_MAX_ATTEMPTS {
                let mut rng = substream(seed, Domain::Graph, attempt as u64, n as u64);
                let mut edges = Vec::new();
                for i in 0..n {
                    for j in i + 1..n {
                        if rng.random::<f64>() < p {
                            edges.push((i, j));
                        }
                    }
                }
                let mut topo = Topology::unchecked(n, edges)?;
                if topo.is_connected() {
                    topo.resamples = attempt;
                    return Ok(topo);
                }
            }
            return Err(TopologyError::LikelyDisconnected {
                n,
                p,
                attempts: ER_MAX_ATTEMPTS,
            });
        }
    };
    Topology::new(n, edges)
}

/// Symmetric doubly stochastic mixing matrix with cached spectral data.
#[derive(Debug, Clone)]
pub struct ConsensusMatrix {
    n: usize,
    /// Row-major `n × n` weights.
    w: Vec<f64>,
    beta: f64,
    eigenvalues: Vec<f64>,
}

/// Spectral diagnostics of a consensus matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralReport {
    /// Second-largest singular value.
    pub beta: f64,
    /// Eigenvalues sorted in descending order.
    pub eigenvalues: Vec<f64>,
}

/// Metropolis–Hastings weights: `1 / (1 + max(deg_i, deg_j))` on every edge,
/// the diagonal absorbing the remainder of each row.
pub fn metropolis_weights(topo: &Topology) -> ConsensusMatrix {
    let n = topo.n();
    let deg = topo.degrees();
    let mut w = vec![0.0; n * n];
    for (i, j) in topo.edges() {
        let wij = 1.0 / (1.0 + deg[i].max(deg[j]) as f64);
        w[i * n + j] = wij;
        w[j * n + i] = wij;
    }
    for i in 0..n {
        let off: f64 = (0..n).filter(|&j| j != i).map(|j| w[i * n + j]).sum();
        w[i * n + i] = 1.0 - off;
    }
    ConsensusMatrix::from_weights(n, w)
}

impl ConsensusMatrix {
    fn from_weights(n: usize, w: Vec<f64>) -> Self {
        let dm = DMatrix::from_row_slice(n, n, &w);
        let svd = dm.clone().svd(false, false);
        let mut sv: Vec<f64> = svd.singular_values.iter().copied().collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        let beta = sv.get(1).copied().unwrap_or(0.0).max(0.0);
        let mut eigenvalues: Vec<f64> = dm.symmetric_eigen().eigenvalues.iter().copied().collect();
        eigenvalues.sort_by(|a, b| b.total_cmp(a));
        Self {
            n,
            w,
            beta,
            eigenvalues,
        }
    }

    /// Wraps an explicit weight matrix (rows of length `n`), checking the
    /// consensus-matrix contract: exact symmetry, unit row sums within 1e-12,
    /// positive diagonal and nonnegative entries.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TopologyError> {
        let n = rows.len();
        if n == 0 {
            return Err(TopologyError::NoAgents);
        }
        if rows.iter().any(|r| r.len() != n) {
            return Err(TopologyError::InvalidWeights("matrix is not square".into()));
        }
        let w: Vec<f64> = rows.iter().flatten().copied().collect();
        let cm = Self::from_weights(n, w);
        cm.check_contract()?;
        Ok(cm)
    }

    /// Uniform averaging `w[i][j] = 1/n` (complete graph, `beta = 0`).
    pub fn uniform(n: usize) -> Result<Self, TopologyError> {
        if n == 0 {
            return Err(TopologyError::NoAgents);
        }
        Ok(Self::from_weights(n, vec![1.0 / n as f64; n * n]))
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    #[inline]
    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.w[i * self.n + j]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.w.chunks(self.n).map(<[f64]>::to_vec).collect()
    }

    pub fn spectral_report(&self) -> SpectralReport {
        SpectralReport {
            beta: self.beta,
            eigenvalues: self.eigenvalues.clone(),
        }
    }

    /// Checks symmetry, row sums, diagonal positivity and nonnegativity.
    pub fn check_contract(&self) -> Result<(), TopologyError> {
        let n = self.n;
        for i in 0..n {
            if self.weight(i, i) <= 0.0 {
                return Err(TopologyError::InvalidWeights(format!(
                    "w[{i}][{i}] is not positive"
                )));
            }
            let mut row = 0.0;
            for j in 0..n {
                let wij = self.weight(i, j);
                if wij != self.weight(j, i) {
                    return Err(TopologyError::InvalidWeights(format!(
                        "w[{i}][{j}] != w[{j}][{i}]"
                    )));
                }
                if wij < 0.0 || !wij.is_finite() {
                    return Err(TopologyError::InvalidWeights(format!(
                        "w[{i}][{j}] = {wij}"
                    )));
                }
                row += wij;
            }
            if (row - 1.0).abs() > 1e-12 {
                return Err(TopologyError::InvalidWeights(format!(
                    "row {i} sums to {row}"
                )));
            }
        }
        Ok(())
    }

    /// Checks that the off-diagonal support coincides with the edge set.
    pub fn check_support(&self, topo: &Topology) -> Result<(), TopologyError> {
        if topo.n() != self.n {
            return Err(TopologyError::DimensionMismatch {
                expected: self.n,
                got: topo.n(),
            });
        }
        for i in 0..self.n {
            for j in 0..self.n {
                if i != j && (self.weight(i, j) > 0.0) != topo.has_edge(i, j) {
                    return Err(TopologyError::InvalidWeights(format!(
                        "support of w[{i}][{j}] disagrees with the topology"
                    )));
                }
            }
        }
        Ok(())
    }

    /// CSV export: `n` rows of `n` values with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.w.chunks(self.n) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// One mixing round: block `i` becomes `Σ_j w[i][j] · block_j`, summed in
/// ascending `j` over self and neighbors only.
fn mix_once(w: &[f64], n: usize, src: &StackedState, dst: &mut StackedState) {
    let p = src.dim();
    for i in 0..n {
        let out = dst.block_mut(i);
        out.iter_mut().for_each(|v| *v = 0.0);
        let row = &w[i * n..(i + 1) * n];
        for (j, &wij) in row.iter().enumerate() {
            if wij == 0.0 {
                continue;
            }
            let b = src.block(j);
            for d in 0..p {
                out[d] += wij * b[d];
            }
        }
    }
}

/// Returns `(W ⊗ I_p)^rounds · state` by `rounds` successive mixing rounds.
pub fn apply_consensus(
    cm: &ConsensusMatrix,
    state: &StackedState,
    rounds: u64,
) -> Result<StackedState, TopologyError> {
    if state.agents() != cm.n {
        return Err(TopologyError::DimensionMismatch {
            expected: cm.n,
            got: state.agents(),
        });
    }
    let mut cur = state.clone();
    let mut next = state.clone();
    for _ in 0..rounds {
        mix_once(&cm.w, cm.n, &cur, &mut next);
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(cur)
}

fn matmul(a: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        for k in 0..n {
            let aik = a[i * n + k];
            if aik == 0.0 {
                continue;
            }
            for j in 0..n {
                c[i * n + j] += aik * b[k * n + j];
            }
        }
    }
    c
}

/// Applies `W^t` for arbitrary `t` at the cost of a single blockwise
/// product, building `W^t` from cached repeated squares.
///
/// The result equals [`apply_consensus`] up to floating-point reassociation.
/// Schedules with many rounds per iteration (NEAR-DGD⁺, doubling) rely on
/// this to stay cheap.
#[derive(Debug, Clone)]
pub struct ConsensusPowers {
    n: usize,
    /// `squares[j] = W^(2^j)`
    squares: Vec<Vec<f64>>,
    last: Option<(u64, Vec<f64>)>,
}

impl ConsensusPowers {
    pub fn new(cm: &ConsensusMatrix) -> Self {
        Self {
            n: cm.n,
            squares: vec![cm.w.clone()],
            last: None,
        }
    }

    fn power(&mut self, t: u64) -> &[f64] {
        if self.last.as_ref().map(|(lt, _)| *lt) != Some(t) {
            let bits = 64 - t.leading_zeros() as usize;
            while self.squares.len() < bits {
                let s = self.squares.last().expect("nonempty");
                let sq = matmul(s, s, self.n);
                self.squares.push(sq);
            }
            let mut acc: Option<Vec<f64>> = None;
            for bit in 0..bits {
                if t >> bit & 1 == 1 {
                    acc = Some(match acc {
                        None => self.squares[bit].clone(),
                        Some(a) => matmul(&a, &self.squares[bit], self.n),
                    });
                }
            }
            let mut m = acc.expect("t > 0");
            // W^t is symmetric; re-symmetrize to keep rounding from drifting.
            for i in 0..self.n {
                for j in i + 1..self.n {
                    let v = 0.5 * (m[i * self.n + j] + m[j * self.n + i]);
                    m[i * self.n + j] = v;
                    m[j * self.n + i] = v;
                }
            }
            // Squaring drifts the row sums; refill the diagonal as in the
            // Metropolis construction so the block mean is preserved.
            if t > 1 {
                for i in 0..self.n {
                    let off: f64 = (0..self.n)
                        .filter(|&j| j != i)
                        .map(|j| m[i * self.n + j])
                        .sum();
                    m[i * self.n + i] = 1.0 - off;
                }
            }
            self.last = Some((t, m));
        }
        &self.last.as_ref().expect("just set").1
    }

    /// `W^t · state` (identity for `t = 0`).
    pub fn apply(&mut self, state: &StackedState, t: u64) -> Result<StackedState, TopologyError> {
        if state.agents() != self.n {
            return Err(TopologyError::DimensionMismatch {
                expected: self.n,
                got: state.agents(),
            });
        }
        if t == 0 {
            return Ok(state.clone());
        }
        let n = self.n;
        let m = self.power(t).to_vec();
        let mut out = state.clone();
        mix_once(&m, n, state, &mut out);
        Ok(out)
    }
}
