use crate::error::{Error, Result};

/// Nearest-rank quantile: the `ceil(p n)`-th smallest value (1-based), with
/// the rank clamped to `[1, n]`.
pub fn nearest_rank(values: &[f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("quantile of an empty list".into()));
    }
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidParameter(format!("quantile level {p} outside (0, 1)")));
    }
    let n = values.len();
    let rank = ((p * n as f64).ceil() as usize).clamp(1, n);
    let mut scratch = values.to_vec();
    let (_, v, _) = scratch.select_nth_unstable_by(rank - 1, f64::total_cmp);
    Ok(*v)
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}
