//! Coverage readouts of a selection: Binary Tuy, Soft Tuy and normalized
//! saturated coverage.

use serde::{Deserialize, Serialize};

use crate::coverage::{CoverageMatrix, Flavor};
use crate::error::{Error, Result};
use crate::objective::{column_sums, saturated_coverage, sorted};

/// Where the hit-or-miss indicator for Binary Tuy came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinarySource {
    BinaryMatrix,
    SoftSupport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReadout {
    pub binary_tuy: f64,
    pub soft_tuy: f64,
    pub saturated: f64,
    pub z: usize,
    pub selection_size: usize,
    pub binary_source: BinarySource,
    /// Flavor of the matrix the selection was optimized on, when known.
    pub selection_flavor: Option<Flavor>,
}

fn check(chosen: &[usize], m: usize) -> Result<()> {
    match chosen.iter().find(|&&i| i >= m) {
        Some(i) => Err(Error::InvalidInput(format!("selected source {i} out of range (m = {m})"))),
        None => Ok(()),
    }
}

fn soft_parts(chosen: &[usize], a: &CoverageMatrix) -> Result<(Vec<f64>, f64)> {
    if a.flavor != Flavor::Soft {
        return Err(Error::InvalidInput("readouts need the soft matrix".into()));
    }
    check(chosen, a.m)?;
    let mut best = vec![0.0f64; a.z];
    for &i in chosen {
        for (j, v) in a.row(i).iter() {
            best[j] = best[j].max(v);
        }
    }
    Ok((best, saturated_coverage(a, chosen)))
}

fn frac(x: f64, z: usize) -> f64 {
    if z == 0 {
        0.0
    } else {
        x / z as f64
    }
}

/// Readouts from `A` alone; Binary Tuy uses the support of `A`.
pub fn readout(chosen: &[usize], a: &CoverageMatrix) -> Result<CoverageReadout> {
    let (best, sat) = soft_parts(chosen, a)?;
    let hit = best.iter().filter(|&&v| v > 0.0).count();
    Ok(CoverageReadout {
        binary_tuy: frac(hit as f64, a.z),
        soft_tuy: frac(best.iter().sum(), a.z),
        saturated: frac(sat, a.z),
        z: a.z,
        selection_size: chosen.len(),
        binary_source: BinarySource::SoftSupport,
        selection_flavor: None,
    })
}

/// Readouts with Binary Tuy taken from `B` built on the same inputs as `A`.
pub fn readout_with_binary(chosen: &[usize], a: &CoverageMatrix, b: &CoverageMatrix) -> Result<CoverageReadout> {
    if b.flavor != Flavor::Binary || b.m != a.m || b.z != a.z {
        return Err(Error::DimensionMismatch("binary matrix does not match the soft matrix".into()));
    }
    let mut r = readout(chosen, a)?;
    let hit = column_sums(b, &sorted(chosen)).iter().filter(|&&s| s > 0.0).count();
    r.binary_tuy = frac(hit as f64, b.z);
    r.binary_source = BinarySource::BinaryMatrix;
    Ok(r)
}

/// Readouts of a selection made on either flavor, labelled with that flavor.
pub fn cross_evaluate(
    chosen: &[usize],
    selection_flavor: Flavor,
    a: &CoverageMatrix,
    b: Option<&CoverageMatrix>,
) -> Result<CoverageReadout> {
    let mut r = match b {
        Some(b) => readout_with_binary(chosen, a, b)?,
        None => readout(chosen, a)?,
    };
    r.selection_flavor = Some(selection_flavor);
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn soft(rows: &[Vec<f64>]) -> CoverageMatrix {
        CoverageMatrix::from_dense(Flavor::Soft, rows).unwrap()
    }

    fn triple(r: &CoverageReadout) -> (f64, f64, f64) {
        (r.binary_tuy, r.soft_tuy, r.saturated)
    }

    #[test]
    fn examples() {
        let a = soft(&[vec![1.0, 0.0], vec![0.6, 0.0], vec![0.6, 0.0]]);
        assert_eq!(triple(&readout(&[], &a).unwrap()), (0.0, 0.0, 0.0));
        assert_eq!(triple(&readout(&[0], &a).unwrap()), (0.5, 0.5, 0.5));
        let r = readout(&[1, 2], &a).unwrap();
        assert_eq!(r.binary_tuy, 0.5);
        assert!((r.soft_tuy - 0.3).abs() < 1e-12);
        assert_eq!(r.saturated, 0.5);
        assert!(readout(&[3], &a).is_err());
    }

    #[test]
    fn boundary_selection_binary_only() {
        let a = soft(&[vec![0.0, 0.0]]);
        let b = CoverageMatrix::from_dense(Flavor::Binary, &[vec![1.0, 1.0]]).unwrap();
        let r = cross_evaluate(&[0], Flavor::Binary, &a, Some(&b)).unwrap();
        assert_eq!((r.binary_tuy, r.soft_tuy), (1.0, 0.0));
        assert_eq!(r.binary_source, BinarySource::BinaryMatrix);
        assert_eq!(r.selection_flavor, Some(Flavor::Binary));
    }

    proptest! {
        #[test]
        fn ordering_holds(
            dense in prop::collection::vec(prop::collection::vec(prop_oneof![Just(0.0), 0.0f64..=1.0], 7), 1..8),
            pick in prop::collection::vec(any::<bool>(), 8),
        ) {
            let a = soft(&dense);
            let chosen: Vec<usize> = (0..a.m).filter(|&i| pick[i]).collect();
            let r = readout(&chosen, &a).unwrap();
            prop_assert!(r.saturated >= r.soft_tuy - 1e-12);
            prop_assert!(r.binary_tuy >= r.soft_tuy - 1e-12);
            prop_assert!(r.soft_tuy >= 0.0 && r.saturated <= 1.0 && r.binary_tuy <= 1.0);
            prop_assert!((r.saturated - saturated_coverage(&a, &chosen) / 7.0).abs() < 1e-9);
        }
    }
}
