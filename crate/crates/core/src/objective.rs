//! Saturated coverage `f_sat(I) = sum_j min(1, sum_{i in I} A_ij)` and its
//! non-negative weighted sums over several matrices sharing one source set.
//!
//! Every from-scratch evaluation sorts the index set first, so the floating
//! point result depends only on the set, never on selection order.

use serde::{Deserialize, Serialize};

use crate::coverage::{CoverageMatrix, SparseRow};
use crate::error::{Error, Result};

/// Per-direction accumulated coverage `gamma`, clamped to `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageState {
    pub gamma: Vec<f64>,
}

impl CoverageState {
    pub fn new(z: usize) -> Self {
        CoverageState { gamma: vec![0.0; z] }
    }

    /// `sum_j (min(1, gamma_j + row_j) - gamma_j)`.
    pub fn marginal_gain(&self, row: &SparseRow) -> f64 {
        row.iter().map(|(j, v)| (self.gamma[j] + v).min(1.0) - self.gamma[j]).sum()
    }

    pub fn add(&mut self, row: &SparseRow) {
        for (j, v) in row.iter() {
            self.gamma[j] = (self.gamma[j] + v).min(1.0);
        }
    }

    pub fn value(&self) -> f64 {
        self.gamma.iter().sum()
    }
}

/// Free-function form of [`CoverageState::marginal_gain`].
pub fn marginal_gain(state: &CoverageState, row: &SparseRow) -> f64 {
    state.marginal_gain(row)
}

/// Unclamped column sums over `set`, accumulated in the order given.
pub fn column_sums(matrix: &CoverageMatrix, set: &[usize]) -> Vec<f64> {
    let mut s = vec![0.0; matrix.z];
    for &i in set {
        for (j, v) in matrix.row(i).iter() {
            s[j] += v;
        }
    }
    s
}

pub(crate) fn sorted(set: &[usize]) -> Vec<usize> {
    let mut s = set.to_vec();
    s.sort_unstable();
    s
}

pub(crate) fn clamped_total(sums: &[f64]) -> f64 {
    sums.iter().map(|s| s.min(1.0)).sum()
}

/// `f_sat` of `set` on one matrix.
pub fn saturated_coverage(matrix: &CoverageMatrix, set: &[usize]) -> f64 {
    clamped_total(&column_sums(matrix, &sorted(set)))
}

/// `sum_c w_c f_sat^c` over matrices that share their rows' source indexing.
#[derive(Debug, Clone)]
pub struct Objective<'a> {
    blocks: Vec<(f64, &'a CoverageMatrix)>,
    m: usize,
}

impl<'a> Objective<'a> {
    pub fn single(matrix: &'a CoverageMatrix) -> Self {
        Objective { blocks: vec![(1.0, matrix)], m: matrix.m }
    }

    pub fn weighted(blocks: Vec<(f64, &'a CoverageMatrix)>) -> Result<Self> {
        let Some(&(_, first)) = blocks.first() else {
            return Err(Error::InvalidInput("objective needs at least one matrix".into()));
        };
        let m = first.m;
        for (c, (w, a)) in blocks.iter().enumerate() {
            if a.m != m {
                return Err(Error::DimensionMismatch(format!("matrix {c} has {} sources, expected {m}", a.m)));
            }
            if !(w.is_finite() && *w > 0.0) {
                return Err(Error::InvalidParameter(format!("weight {w} of matrix {c} must be positive")));
            }
        }
        Ok(Objective { blocks, m })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn blocks(&self) -> &[(f64, &'a CoverageMatrix)] {
        &self.blocks
    }

    /// Sum of direction counts, weighted by block weight. Upper limit of the objective.
    pub fn capacity(&self) -> f64 {
        self.blocks.iter().map(|(w, a)| w * a.z as f64).sum()
    }

    pub fn evaluate(&self, set: &[usize]) -> f64 {
        let s = sorted(set);
        let sums: Vec<Vec<f64>> = self.blocks.iter().map(|(_, a)| column_sums(a, &s)).collect();
        self.combine(&sums)
    }

    /// Weighted clamped total from per-block unclamped column sums.
    pub(crate) fn combine(&self, sums: &[Vec<f64>]) -> f64 {
        self.blocks.iter().zip(sums).map(|((w, _), s)| w * clamped_total(s)).sum()
    }

    /// Per-block unweighted `f_sat`.
    pub fn breakdown(&self, set: &[usize]) -> Vec<f64> {
        let s = sorted(set);
        self.blocks.iter().map(|(_, a)| saturated_coverage(a, &s)).collect()
    }

    pub fn empty_state(&self) -> Vec<CoverageState> {
        self.blocks.iter().map(|(_, a)| CoverageState::new(a.z)).collect()
    }

    pub fn state_of(&self, set: &[usize]) -> Vec<CoverageState> {
        let mut st = self.empty_state();
        for &i in &sorted(set) {
            self.add(&mut st, i);
        }
        st
    }

    pub fn gain(&self, state: &[CoverageState], i: usize) -> f64 {
        self.blocks.iter().zip(state).map(|((w, a), s)| w * s.marginal_gain(a.row(i))).sum()
    }

    pub fn add(&self, state: &mut [CoverageState], i: usize) {
        for ((_, a), s) in self.blocks.iter().zip(state.iter_mut()) {
            s.add(a.row(i));
        }
    }

    /// True when source `i` has no entry in any block.
    pub fn is_null(&self, i: usize) -> bool {
        self.blocks.iter().all(|(_, a)| a.row(i).is_empty())
    }
}
