//! Marginal-gain greedy selection under a cardinality budget.
//!
//! Each step takes the candidate with the largest gain; equal gains go to
//! the lowest source index. The loop stops at `k` picks or when the best gain
//! is zero, so fewer than `k` indices may be returned.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coverage::{CoverageMatrix, Flavor};
use crate::error::{Error, Result};
use crate::objective::Objective;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    /// Source indices in pick order.
    pub chosen: Vec<usize>,
    /// `f_sat` of `chosen`, evaluated from scratch.
    pub objective: f64,
    pub per_step_gains: Vec<f64>,
    pub budget: usize,
    pub matrix_flavor: Flavor,
}

impl Selection {
    pub fn unused_budget(&self) -> usize {
        self.budget - self.chosen.len()
    }
}

/// `(gain, index)` ordered so that the larger gain wins and, on equal gains, the lower index.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Ranked {
    gain: f64,
    index: usize,
}

impl Eq for Ranked {}

impl Ord for Ranked {
    fn cmp(&self, other: &Self) -> Ordering {
        self.gain.total_cmp(&other.gain).then_with(|| other.index.cmp(&self.index))
    }
}

impl PartialOrd for Ranked {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn check_budget(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidParameter("budget k must be at least 1".into()));
    }
    Ok(())
}

fn flavor_of(obj: &Objective) -> Flavor {
    obj.blocks()[0].1.flavor
}

/// Greedy on an arbitrary (weighted) objective with a full candidate scan per step.
pub fn greedy_objective(obj: &Objective, k: usize) -> Result<Selection> {
    check_budget(k)?;
    let m = obj.m();
    let mut state = obj.empty_state();
    let mut taken = vec![false; m];
    let mut chosen = Vec::new();
    let mut gains = Vec::new();
    while chosen.len() < k {
        let best = (0..m)
            .into_par_iter()
            .filter(|&i| !taken[i])
            .map(|i| Ranked { gain: obj.gain(&state, i), index: i })
            .max();
        let Some(best) = best else { break };
        if best.gain <= 0.0 {
            break;
        }
        obj.add(&mut state, best.index);
        taken[best.index] = true;
        chosen.push(best.index);
        gains.push(best.gain);
    }
    let objective = obj.evaluate(&chosen);
    Ok(Selection { chosen, objective, per_step_gains: gains, budget: k, matrix_flavor: flavor_of(obj) })
}

/// Lazy (priority-queue) greedy. Picks the same indices as [`greedy_objective`]
/// because stale gains are upper bounds and the heap order carries the index tie-break.
pub fn lazy_greedy_objective(obj: &Objective, k: usize) -> Result<Selection> {
    check_budget(k)?;
    let mut state = obj.empty_state();
    let mut heap: BinaryHeap<(Ranked, usize)> =
        (0..obj.m()).map(|i| (Ranked { gain: obj.gain(&state, i), index: i }, 0)).collect();
    let mut chosen = Vec::new();
    let mut gains = Vec::new();
    while chosen.len() < k {
        let Some((top, stamp)) = heap.pop() else { break };
        if stamp != chosen.len() {
            let fresh = Ranked { gain: obj.gain(&state, top.index), index: top.index };
            heap.push((fresh, chosen.len()));
            continue;
        }
        if top.gain <= 0.0 {
            break;
        }
        obj.add(&mut state, top.index);
        chosen.push(top.index);
        gains.push(top.gain);
    }
    let objective = obj.evaluate(&chosen);
    Ok(Selection { chosen, objective, per_step_gains: gains, budget: k, matrix_flavor: flavor_of(obj) })
}

pub fn greedy_select(matrix: &CoverageMatrix, k: usize) -> Result<Selection> {
    greedy_objective(&Objective::single(matrix), k)
}

/// Greedy on a binary matrix; the objective is the number of covered directions.
pub fn binary_greedy_select(matrix: &CoverageMatrix, k: usize) -> Result<Selection> {
    if matrix.flavor != Flavor::Binary {
        return Err(Error::InvalidInput("binary greedy needs a binary matrix".into()));
    }
    greedy_select(matrix, k)
}
