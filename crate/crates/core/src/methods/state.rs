use crate::linalg::{axpy, dist_sq, norm_sq};

use super::MethodError;

/// `n` agent blocks of dimension `p`, stored contiguously.
#[derive(Debug, Clone, PartialEq)]
pub struct StackedState {
    n: usize,
    p: usize,
    data: Vec<f64>,
}

impl StackedState {
    pub fn zeros(n: usize, p: usize) -> Self {
        Self {
            n,
            p,
            data: vec![0.0; n * p],
        }
    }

    /// Every agent starts from the same `block`.
    pub fn replicate(n: usize, block: &[f64]) -> Self {
        Self {
            n,
            p: block.len(),
            data: block.repeat(n),
        }
    }

    pub fn from_blocks(blocks: Vec<Vec<f64>>) -> Result<Self, MethodError> {
        let n = blocks.len();
        let p = blocks.first().map_or(0, Vec::len);
        if n == 0 || p == 0 {
            return Err(MethodError::Shape(
                "a stacked state needs at least one nonempty block".into(),
            ));
        }
        if blocks.iter().any(|b| b.len() != p) {
            return Err(MethodError::Shape(
                "all blocks must share one dimension".into(),
            ));
        }
        Ok(Self {
            n,
            p,
            data: blocks.concat(),
        })
    }

    pub fn agents(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.p
    }

    #[inline]
    pub fn block(&self, i: usize) -> &[f64] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    #[inline]
    pub fn block_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.p..(i + 1) * self.p]
    }

    pub fn blocks(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.p)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// `‖v‖²` of the whole stack.
    pub fn norm_sq(&self) -> f64 {
        norm_sq(&self.data)
    }

    /// `(1/n) Σ_i ‖v_i − v̄‖²`
    pub fn consensus_deviation(&self) -> f64 {
        let mean = average_blocks(self);
        self.blocks().map(|b| dist_sq(b, &mean)).sum::<f64>() / self.n as f64
    }

    /// True when every entry is finite with magnitude at most `limit`.
    pub fn is_bounded(&self, limit: f64) -> bool {
        self.data.iter().all(|v| v.is_finite() && v.abs() <= limit)
    }
}

/// Arithmetic mean of the agent blocks.
pub fn average_blocks(s: &StackedState) -> Vec<f64> {
    let mut mean = vec![0.0; s.p];
    for b in s.blocks() {
        axpy(1.0, b, &mut mean);
    }
    let inv = 1.0 / s.n as f64;
    mean.iter_mut().for_each(|v| *v *= inv);
    mean
}
