//! Certified exact selection.
//!
//! Two search paths share one contract: exhaustive enumeration of all
//! `min(k, m)`-subsets when their count is small, otherwise best-first
//! branch-and-bound over include/exclude decisions. The returned upper bound
//! `U` always satisfies `OPT <= U`; `gap = (U - f_I) / U`.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coverage::CoverageMatrix;
use crate::error::{Error, Result};
use crate::greedy::{greedy_objective, Selection};
use crate::objective::{column_sums, sorted, Objective};

/// Gaps at or below this are reported as optimal.
pub const OPTIMALITY_GAP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverLimits {
    pub time_limit_s: f64,
    pub gap_limit: f64,
    /// Largest subset count solved by plain enumeration.
    pub enumeration_limit: u64,
}

impl Default for SolverLimits {
    fn default() -> Self {
        SolverLimits { time_limit_s: 300.0, gap_limit: OPTIMALITY_GAP, enumeration_limit: 2_000_000 }
    }
}

impl SolverLimits {
    fn validate(&self) -> Result<()> {
        if !(self.time_limit_s > 0.0) {
            return Err(Error::InvalidParameter(format!("time limit {} must be positive", self.time_limit_s)));
        }
        if !(self.gap_limit >= 0.0 && self.gap_limit < 1.0) {
            return Err(Error::InvalidParameter(format!("gap limit {} outside [0, 1)", self.gap_limit)));
        }
        Ok(())
    }

    fn deadline(&self, start: Instant) -> Instant {
        start + Duration::from_secs_f64(self.time_limit_s.min(1e9))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolveStatus {
    Optimal,
    GapLimit,
    TimeLimit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchKind {
    Enumeration,
    BranchAndBound,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExactResult {
    /// Ascending source indices.
    pub chosen: Vec<usize>,
    pub objective: f64,
    pub upper_bound: f64,
    pub gap: f64,
    pub status: SolveStatus,
    pub node_count: u64,
    pub warm_start_used: bool,
    pub search: SearchKind,
}

/// `(U - f) / U` for `U > 0`, else 0.
pub fn optimality_gap(upper_bound: f64, incumbent: f64) -> f64 {
    if upper_bound > 0.0 {
        ((upper_bound - incumbent) / upper_bound).max(0.0)
    } else {
        0.0
    }
}

/// `C(n, k)`, saturating at `u64::MAX`.
pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
        if acc > u64::MAX as u128 {
            return u64::MAX;
        }
    }
    acc as u64
}

/// Bound on the best completion of `fixed` that avoids `excluded`:
/// `f(F)` plus the `k - |F|` largest marginal gains at `F`.
pub fn submodular_upper_bound(obj: &Objective, fixed: &[usize], excluded: &[usize], k: usize) -> Result<f64> {
    if fixed.len() > k {
        return Err(Error::InvalidParameter(format!("{} fixed sources exceed budget {k}", fixed.len())));
    }
    let m = obj.m();
    let mut blocked = vec![false; m];
    for &i in fixed.iter().chain(excluded) {
        if i >= m {
            return Err(Error::InvalidInput(format!("source index {i} out of range")));
        }
        blocked[i] = true;
    }
    let state = obj.state_of(fixed);
    let free: Vec<usize> = (0..m).filter(|&i| !blocked[i]).collect();
    let gains: Vec<f64> = free.iter().map(|&i| obj.gain(&state, i)).collect();
    Ok(obj.evaluate(fixed) + top_sum(gains, k - fixed.len()))
}

fn top_sum(mut v: Vec<f64>, r: usize) -> f64 {
    if r == 0 || v.is_empty() {
        return 0.0;
    }
    let r = r.min(v.len());
    if r < v.len() {
        v.select_nth_unstable_by(r - 1, |a, b| b.total_cmp(a));
    }
    v[..r].iter().sum()
}

/// Inflates a bound by a relative 1e-12 so rounding never prunes an optimal subtree.
fn safe(bound: f64) -> f64 {
    bound + 1e-12 * bound.abs().max(1.0)
}

fn check_budget(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::InvalidParameter("budget k must be at least 1".into()));
    }
    Ok(())
}

pub fn exact_select(
    matrix: &CoverageMatrix,
    k: usize,
    limits: &SolverLimits,
    warm_start: Option<&Selection>,
) -> Result<ExactResult> {
    exact_objective(&Objective::single(matrix), k, limits, warm_start)
}

/// Maximizes a (weighted) saturated-coverage objective over sets of at most `k` sources.
pub fn exact_objective(
    obj: &Objective,
    k: usize,
    limits: &SolverLimits,
    warm_start: Option<&Selection>,
) -> Result<ExactResult> {
    check_budget(k)?;
    limits.validate()?;
    let m = obj.m();
    let s = k.min(m);
    if binomial(m, s) <= limits.enumeration_limit {
        let (chosen, objective, leaves) = enumerate(m, s, &|sums| obj.combine(sums), obj);
        return Ok(ExactResult {
            chosen,
            objective,
            upper_bound: objective,
            gap: 0.0,
            status: SolveStatus::Optimal,
            node_count: leaves,
            warm_start_used: false,
            search: SearchKind::Enumeration,
        });
    }
    branch_and_bound(obj, k, limits, warm_start)
}

/// Lexicographic order on ascending index vectors.
fn lex_less(a: &[usize], b: &[usize]) -> bool {
    a < b
}

/// Best `s`-subset of `0..m` under `score`, earliest in lexicographic order among equal scores.
/// Column sums are built by adding rows in ascending index order, matching [`Objective::evaluate`].
fn enumerate<K, F>(m: usize, s: usize, score: &F, obj: &Objective) -> (Vec<usize>, K, u64)
where
    K: PartialOrd + Copy + Send + Default,
    F: Fn(&[Vec<f64>]) -> K + Sync,
{
    if s == 0 {
        let zeros: Vec<Vec<f64>> = obj.blocks().iter().map(|(_, a)| vec![0.0; a.z]).collect();
        return (Vec::new(), score(&zeros), 1);
    }
    let per_first: Vec<(Option<(K, Vec<usize>)>, u64)> = (0..=m - s)
        .into_par_iter()
        .map(|first| {
            let mut sums: Vec<Vec<Vec<f64>>> =
                (0..=s).map(|_| obj.blocks().iter().map(|(_, a)| vec![0.0; a.z]).collect()).collect();
            let mut cur = Vec::with_capacity(s);
            let mut best = None;
            let mut leaves = 0;
            push_row(obj, &mut sums, 0, first);
            cur.push(first);
            dfs(obj, m, s, first + 1, &mut cur, &mut sums, score, &mut best, &mut leaves);
            (best, leaves)
        })
        .collect();
    let mut best: Option<(K, Vec<usize>)> = None;
    let mut leaves = 0;
    for (b, l) in per_first {
        leaves += l;
        if let Some((v, set)) = b {
            if best.as_ref().is_none_or(|(bv, _)| v > *bv) {
                best = Some((v, set));
            }
        }
    }
    let (v, set) = best.expect("at least one subset");
    (set, v, leaves)
}

fn push_row(obj: &Objective, sums: &mut [Vec<Vec<f64>>], depth: usize, i: usize) {
    let (lo, hi) = sums.split_at_mut(depth + 1);
    for (c, (_, a)) in obj.blocks().iter().enumerate() {
        hi[0][c].copy_from_slice(&lo[depth][c]);
        for (j, v) in a.row(i).iter() {
            hi[0][c][j] += v;
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn dfs<K, F>(
    obj: &Objective,
    m: usize,
    s: usize,
    start: usize,
    cur: &mut Vec<usize>,
    sums: &mut [Vec<Vec<f64>>],
    score: &F,
    best: &mut Option<(K, Vec<usize>)>,
    leaves: &mut u64,
) where
    K: PartialOrd + Copy,
    F: Fn(&[Vec<f64>]) -> K,
{
    let depth = cur.len();
    if depth == s {
        *leaves += 1;
        let v = score(&sums[depth]);
        if best.as_ref().is_none_or(|(bv, _)| v > *bv) {
            *best = Some((v, cur.clone()));
        }
        return;
    }
    for i in start..=m - (s - depth) {
        push_row(obj, sums, depth, i);
        cur.push(i);
        dfs(obj, m, s, i + 1, cur, sums, score, best, leaves);
        cur.pop();
    }
}

/// Open search node: `fixed` are included, every candidate before `pos` not in `fixed` is excluded.
#[derive(Debug)]
struct Node {
    bound: f64,
    seq: u64,
    fixed: Vec<usize>,
    pos: usize,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Node {}

impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        self.bound.total_cmp(&other.bound).then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Incumbent {
    set: Vec<usize>,
    value: f64,
}

impl Incumbent {
    fn offer(&mut self, set: &[usize], value: f64) {
        let set = sorted(set);
        if value > self.value || (value == self.value && lex_less(&set, &self.set)) {
            self.set = set;
            self.value = value;
        }
    }
}

/// Candidates with a non-empty row, by singleton gain descending then index.
fn candidate_order(obj: &Objective) -> Vec<usize> {
    let empty = obj.empty_state();
    let mut c: Vec<(f64, usize)> =
        (0..obj.m()).filter(|&i| !obj.is_null(i)).map(|i| (obj.gain(&empty, i), i)).collect();
    c.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    c.into_iter().map(|(_, i)| i).collect()
}

fn branch_and_bound(
    obj: &Objective,
    k: usize,
    limits: &SolverLimits,
    warm_start: Option<&Selection>,
) -> Result<ExactResult> {
    let start = Instant::now();
    let deadline = limits.deadline(start);
    let order = candidate_order(obj);
    let n = order.len();
    let kk = k.min(n);

    let greedy = greedy_objective(obj, k)?;
    let mut inc = Incumbent { set: sorted(&greedy.chosen), value: greedy.objective };
    let mut warm_start_used = false;
    if let Some(ws) = warm_start {
        let ok = ws.chosen.len() <= k && ws.chosen.iter().all(|&i| i < obj.m());
        let mut uniq = sorted(&ws.chosen);
        uniq.dedup();
        if ok && uniq.len() == ws.chosen.len() {
            inc.offer(&uniq, obj.evaluate(&uniq));
            warm_start_used = true;
        }
    }

    // Evaluates a node, offering any feasible set it certifies; None when the subtree is closed.
    let bound_of = |fixed: &[usize], pos: usize, inc: &mut Incumbent| -> Option<f64> {
        let rest = &order[pos..];
        let mut union: Vec<usize> = fixed.to_vec();
        union.extend_from_slice(rest);
        let union_val = obj.evaluate(&union);
        if union.len() <= kk {
            inc.offer(&union, union_val);
            return None;
        }
        if fixed.len() == kk || rest.is_empty() {
            return None;
        }
        let state = obj.state_of(fixed);
        let gains: Vec<f64> = rest.iter().map(|&i| obj.gain(&state, i)).collect();
        let sub = obj.evaluate(fixed) + top_sum(gains, kk - fixed.len());
        Some(sub.min(union_val))
    };

    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let mut node_count = 0u64;
    if let Some(b) = bound_of(&[], 0, &mut inc) {
        heap.push(Node { bound: b, seq, fixed: Vec::new(), pos: 0 });
        seq += 1;
    }

    let mut status = SolveStatus::Optimal;
    let mut upper = inc.value;
    while let Some(node) = heap.pop() {
        if safe(node.bound) <= inc.value {
            break;
        }
        let g = optimality_gap(node.bound, inc.value);
        if g <= limits.gap_limit {
            upper = node.bound;
            status = if g <= OPTIMALITY_GAP { SolveStatus::Optimal } else { SolveStatus::GapLimit };
            break;
        }
        if Instant::now() >= deadline {
            upper = node.bound;
            status = SolveStatus::TimeLimit;
            break;
        }
        node_count += 1;
        let c = order[node.pos];
        let mut with = node.fixed.clone();
        with.push(c);
        inc.offer(&with, obj.evaluate(&with));
        for (fixed, pos) in [(with, node.pos + 1), (node.fixed, node.pos + 1)] {
            if let Some(b) = bound_of(&fixed, pos, &mut inc) {
                if safe(b) > inc.value {
                    heap.push(Node { bound: b, seq, fixed, pos });
                    seq += 1;
                }
            }
        }
    }
    let upper_bound = upper.max(inc.value);
    Ok(ExactResult {
        gap: optimality_gap(upper_bound, inc.value),
        chosen: inc.set,
        objective: inc.value,
        upper_bound,
        status,
        node_count,
        warm_start_used,
        search: SearchKind::BranchAndBound,
    })
}

/// Max-min selection result. `t_value` is the smallest clamped coverage over
/// the floor-constrained directions; `tiebreak_mean` is the mean clamped
/// coverage over all directions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCaseResult {
    pub chosen: Vec<usize>,
    pub t_value: f64,
    pub excluded_columns: Vec<usize>,
    pub tiebreak_mean: f64,
    pub robust: bool,
    pub status: SolveStatus,
    pub node_count: u64,
    pub search: SearchKind,
}

/// `(t, mean)` compared lexicographically.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Default)]
pub struct WorstCaseKey {
    pub t: f64,
    pub mean: f64,
}

/// Columns that carry the floor, and those excluded from it.
pub fn floor_columns(matrix: &CoverageMatrix, robust: bool) -> (Vec<usize>, Vec<usize>) {
    let excluded = if robust { crate::coverage::uncoverable_columns(matrix) } else { Vec::new() };
    let mut is_ex = vec![false; matrix.z];
    for &j in &excluded {
        is_ex[j] = true;
    }
    ((0..matrix.z).filter(|&j| !is_ex[j]).collect(), excluded)
}

fn key_from_sums(sums: &[f64], floor: &[usize]) -> WorstCaseKey {
    let t = if floor.is_empty() {
        0.0
    } else {
        floor.iter().map(|&j| sums[j].min(1.0)).fold(f64::INFINITY, f64::min)
    };
    let z = sums.len();
    let mean = if z == 0 { 0.0 } else { crate::objective::clamped_total(sums) / z as f64 };
    WorstCaseKey { t, mean }
}

/// `(t, mean)` of `set` from scratch.
pub fn worstcase_key(matrix: &CoverageMatrix, set: &[usize], robust: bool) -> WorstCaseKey {
    let (floor, _) = floor_columns(matrix, robust);
    key_from_sums(&column_sums(matrix, &sorted(set)), &floor)
}

/// Maximizes the minimum clamped coverage over the floor directions, then the mean.
/// With `robust`, all-zero columns leave the floor; otherwise any such column forces `t = 0`.
pub fn exact_worstcase_select(
    matrix: &CoverageMatrix,
    k: usize,
    robust: bool,
    limits: &SolverLimits,
) -> Result<WorstCaseResult> {
    check_budget(k)?;
    limits.validate()?;
    let m = matrix.m;
    let (floor, excluded) = floor_columns(matrix, robust);
    let s = k.min(m);
    if binomial(m, s) <= limits.enumeration_limit {
        let obj = Objective::single(matrix);
        let (chosen, key, leaves) = enumerate(m, s, &|sums: &[Vec<f64>]| key_from_sums(&sums[0], &floor), &obj);
        return Ok(WorstCaseResult {
            chosen,
            t_value: key.t,
            excluded_columns: excluded,
            tiebreak_mean: key.mean,
            robust,
            status: SolveStatus::Optimal,
            node_count: leaves,
            search: SearchKind::Enumeration,
        });
    }
    worstcase_branch_and_bound(matrix, k, robust, floor, excluded, limits)
}

struct WcNode {
    key: WorstCaseKey,
    seq: u64,
    fixed: Vec<usize>,
    pos: usize,
}

impl PartialEq for WcNode {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for WcNode {}

impl Ord for WcNode {
    fn cmp(&self, other: &Self) -> Ordering {
        self.key
            .t
            .total_cmp(&other.key.t)
            .then(self.key.mean.total_cmp(&other.key.mean))
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

impl PartialOrd for WcNode {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// True when no set with key at most `bound` can beat `inc` (with rounding slack on the bound).
fn wc_dominated(bound: WorstCaseKey, inc: WorstCaseKey) -> bool {
    let t = safe(bound.t);
    t < inc.t || (bound.t <= inc.t && safe(bound.mean) <= inc.mean)
}

fn worstcase_branch_and_bound(
    matrix: &CoverageMatrix,
    k: usize,
    robust: bool,
    floor: Vec<usize>,
    excluded: Vec<usize>,
    limits: &SolverLimits,
) -> Result<WorstCaseResult> {
    let deadline = limits.deadline(Instant::now());
    let obj = Objective::single(matrix);
    let order = candidate_order(&obj);
    let n = order.len();
    let kk = k.min(n);
    let z = matrix.z;
    // Column entries keyed by position in `order`.
    let mut columns: Vec<Vec<(usize, f64)>> = vec![Vec::new(); z];
    for (p, &i) in order.iter().enumerate() {
        for (j, v) in matrix.row(i).iter() {
            columns[j].push((p, v));
        }
    }

    let key_of = |set: &[usize]| key_from_sums(&column_sums(matrix, &sorted(set)), &floor);
    let mut best_set = sorted(&greedy_objective(&obj, k)?.chosen);
    let mut best = key_of(&best_set);
    fn offer(set: &[usize], key: WorstCaseKey, best: &mut WorstCaseKey, best_set: &mut Vec<usize>) {
        let set = sorted(set);
        if key > *best || (key == *best && lex_less(&set, best_set)) {
            *best = key;
            *best_set = set;
        }
    }

    let bound_of = |fixed: &[usize], pos: usize, best: &mut WorstCaseKey, best_set: &mut Vec<usize>| {
        let rest = &order[pos..];
        let mut union: Vec<usize> = fixed.to_vec();
        union.extend_from_slice(rest);
        let union_key = key_of(&union);
        if union.len() <= kk {
            offer(&union, union_key, best, best_set);
            return None;
        }
        if fixed.len() == kk || rest.is_empty() {
            return None;
        }
        let r = kk - fixed.len();
        let sums = column_sums(matrix, &sorted(fixed));
        let mut t_top = if floor.is_empty() { 0.0 } else { f64::INFINITY };
        let mut mean_top = 0.0;
        for j in 0..z {
            let tail: Vec<f64> = columns[j].iter().filter(|(p, _)| *p >= pos).map(|(_, v)| *v).collect();
            let cj = (sums[j] + top_sum(tail, r)).min(1.0);
            mean_top += cj;
            if !floor.is_empty() && floor.binary_search(&j).is_ok() {
                t_top = f64::min(t_top, cj);
            }
        }
        let mean_top = if z == 0 { 0.0 } else { mean_top / z as f64 };
        Some(WorstCaseKey { t: t_top.min(union_key.t), mean: mean_top.min(union_key.mean) })
    };

    let mut heap = BinaryHeap::new();
    let mut seq = 0u64;
    let mut node_count = 0u64;
    if let Some(b) = bound_of(&[], 0, &mut best, &mut best_set) {
        heap.push(WcNode { key: b, seq, fixed: Vec::new(), pos: 0 });
        seq += 1;
    }
    let mut status = SolveStatus::Optimal;
    while let Some(node) = heap.pop() {
        if wc_dominated(node.key, best) {
            continue;
        }
        if Instant::now() >= deadline {
            status = SolveStatus::TimeLimit;
            break;
        }
        node_count += 1;
        let c = order[node.pos];
        let mut with = node.fixed.clone();
        with.push(c);
        let wk = key_of(&with);
        offer(&with, wk, &mut best, &mut best_set);
        for (fixed, pos) in [(with, node.pos + 1), (node.fixed, node.pos + 1)] {
            if let Some(b) = bound_of(&fixed, pos, &mut best, &mut best_set) {
                if !wc_dominated(b, best) {
                    heap.push(WcNode { key: b, seq, fixed, pos });
                    seq += 1;
                }
            }
        }
    }
    Ok(WorstCaseResult {
        chosen: best_set,
        t_value: best.t,
        excluded_columns: excluded,
        tiebreak_mean: best.mean,
        robust,
        status,
        node_count,
        search: SearchKind::BranchAndBound,
    })
}
