//! Binary (`B`) and soft (`A`) directional coverage matrices.
//!
//! Entries compare `|mu . d|` against the band half-width `tau` in the
//! dot-product domain. Boundary handling is exact on the computed doubles:
//! `|mu . d| == tau` gives `B = 1` and `A = 0`.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{Direction, DirectionGrid, SourceSet, Vec3};
use crate::validity::ValidityMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flavor {
    Binary,
    Soft,
}

/// Unit ray direction from the ROI centre towards the source.
pub fn ray_direction(source: &Vec3, roi_center: &Vec3) -> Result<Direction> {
    let d = source - roi_center;
    if d.norm() == 0.0 {
        return Err(Error::Geometry("source coincides with the ROI centre".into()));
    }
    Direction::new(d)
}

/// 1 iff `|mu . d| <= tau`.
pub fn binary_entry(mu: &Direction, d: &Direction, tau: f64) -> u8 {
    u8::from(mu.dot(d).abs() <= tau)
}

/// `max(0, (tau - |mu . d|) / tau)`.
pub fn soft_entry(mu: &Direction, d: &Direction, tau: f64) -> f64 {
    soft_score(mu.dot(d).abs(), tau)
}

#[inline]
pub(crate) fn soft_score(abs_dot: f64, tau: f64) -> f64 {
    ((tau - abs_dot) / tau).max(0.0)
}

/// One matrix row: sorted column indices with their (non-zero) values.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseRow {
    pub cols: Vec<u32>,
    pub vals: Vec<f64>,
}

impl SparseRow {
    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cols.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.cols.iter().zip(&self.vals).map(|(&c, &v)| (c as usize, v))
    }

    pub fn sum(&self) -> f64 {
        self.vals.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageMatrix {
    pub flavor: Flavor,
    pub m: usize,
    pub z: usize,
    /// Band half-width the entries were computed with (NaN for hand-built matrices).
    pub dot_tolerance: f64,
    /// Per-source validity the matrix was built under.
    pub valid: Vec<bool>,
    rows: Vec<SparseRow>,
}

impl CoverageMatrix {
    /// Matrix with explicit rows. Values must be 1 for binary and in
    /// `(0, 1]` for soft; zero entries are dropped.
    pub fn from_rows(flavor: Flavor, z: usize, rows: Vec<SparseRow>) -> Result<Self> {
        let m = rows.len();
        let mut clean = Vec::with_capacity(m);
        for (i, row) in rows.into_iter().enumerate() {
            if row.cols.len() != row.vals.len() {
                return Err(Error::DimensionMismatch(format!("row {i}: cols and vals differ in length")));
            }
            let mut pairs: Vec<(u32, f64)> = row.cols.into_iter().zip(row.vals).filter(|(_, v)| *v != 0.0).collect();
            pairs.sort_by_key(|p| p.0);
            if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
                return Err(Error::InvalidInput(format!("row {i}: duplicate column")));
            }
            for &(c, v) in &pairs {
                if c as usize >= z {
                    return Err(Error::DimensionMismatch(format!("row {i}: column {c} >= z = {z}")));
                }
                let ok = match flavor {
                    Flavor::Binary => v == 1.0,
                    Flavor::Soft => v > 0.0 && v <= 1.0,
                };
                if !ok {
                    return Err(Error::InvalidInput(format!("row {i}: value {v} invalid for {flavor:?} matrix")));
                }
            }
            let (cols, vals) = pairs.into_iter().unzip();
            clean.push(SparseRow { cols, vals });
        }
        Ok(CoverageMatrix { flavor, m, z, dot_tolerance: f64::NAN, valid: vec![true; m], rows: clean })
    }

    /// Matrix from dense row-major values.
    pub fn from_dense(flavor: Flavor, dense: &[Vec<f64>]) -> Result<Self> {
        let z = dense.first().map_or(0, |r| r.len());
        if dense.iter().any(|r| r.len() != z) {
            return Err(Error::DimensionMismatch("ragged dense matrix".into()));
        }
        let rows = dense
            .iter()
            .map(|r| {
                let (cols, vals) = r
                    .iter()
                    .enumerate()
                    .filter(|(_, v)| **v != 0.0)
                    .map(|(j, v)| (j as u32, *v))
                    .unzip();
                SparseRow { cols, vals }
            })
            .collect();
        Self::from_rows(flavor, z, rows)
    }

    pub fn row(&self, i: usize) -> &SparseRow {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[SparseRow] {
        &self.rows
    }

    pub fn nnz(&self) -> usize {
        self.rows.iter().map(SparseRow::nnz).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.iter().all(SparseRow::is_empty)
    }

    pub fn dense(&self) -> Vec<Vec<f64>> {
        self.rows
            .iter()
            .map(|r| {
                let mut d = vec![0.0; self.z];
                for (j, v) in r.iter() {
                    d[j] = v;
                }
                d
            })
            .collect()
    }

    /// `(source, direction, value)` for every stored entry, row-major.
    pub fn triples(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows.iter().enumerate().flat_map(|(i, r)| r.iter().map(move |(j, v)| (i, j, v)))
    }

    /// Writes the triple list as CSV with header `source,direction,value`.
    pub fn write_triples_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["source", "direction", "value"])?;
        for (i, j, v) in self.triples() {
            w.write_record([i.to_string(), j.to_string(), format!("{v:?}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Populates a matrix at `roi_center`. Invalid sources get empty rows.
pub fn build_matrix(
    flavor: Flavor,
    sources: &SourceSet,
    roi_center: &Vec3,
    grid: &DirectionGrid,
    mask: &ValidityMask,
) -> Result<CoverageMatrix> {
    let m = sources.len();
    if mask.len() != m {
        return Err(Error::DimensionMismatch(format!("mask has {} entries for {m} sources", mask.len())));
    }
    let tau = grid.dot_tolerance;
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidParameter(format!("dot tolerance {tau} outside (0, 1)")));
    }
    let rows = sources
        .positions
        .par_iter()
        .zip(mask.valid.par_iter())
        .map(|(s, &ok)| -> Result<SparseRow> {
            if !ok {
                return Ok(SparseRow::default());
            }
            let d = ray_direction(s, roi_center)?;
            let mut row = SparseRow::default();
            for (j, mu) in grid.directions.iter().enumerate() {
                let a = mu.dot(&d).abs();
                let value = match flavor {
                    Flavor::Binary => {
                        if a <= tau {
                            1.0
                        } else {
                            0.0
                        }
                    }
                    Flavor::Soft => soft_score(a, tau),
                };
                if value > 0.0 {
                    row.cols.push(j as u32);
                    row.vals.push(value);
                }
            }
            Ok(row)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CoverageMatrix {
        flavor,
        m,
        z: grid.len(),
        dot_tolerance: tau,
        valid: mask.valid.clone(),
        rows,
    })
}

/// Columns no row touches.
pub fn uncoverable_columns(matrix: &CoverageMatrix) -> Vec<usize> {
    let mut hit = vec![false; matrix.z];
    for r in matrix.rows() {
        for &c in &r.cols {
            hit[c as usize] = true;
        }
    }
    hit.iter().enumerate().filter(|(_, h)| !**h).map(|(j, _)| j).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{fibonacci_sphere, fibonacci_source_sphere};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dir(x: f64, y: f64, z: f64) -> Direction {
        Direction::new(Vec3::new(x, y, z)).unwrap()
    }

    #[test]
    fn ray_directions() {
        assert_eq!(*ray_direction(&Vec3::new(1.0, 0.0, 0.0), &Vec3::zeros()).unwrap().unit(), Vec3::x());
        assert_eq!(*ray_direction(&Vec3::new(0.0, 2.0, 0.0), &Vec3::zeros()).unwrap().unit(), Vec3::y());
        assert!(ray_direction(&Vec3::zeros(), &Vec3::zeros()).is_err());
    }

    #[test]
    fn entry_boundaries() {
        let tau = 0.25;
        let d = dir(1.0, 0.0, 0.0);
        assert_eq!(binary_entry(&dir(0.0, 1.0, 0.0), &d, tau), 1);
        assert_eq!(binary_entry(&d, &d, tau), 0);
        assert_eq!(soft_entry(&dir(0.0, 0.0, 1.0), &d, tau), 1.0);
        assert_eq!(soft_score(tau, tau), 0.0);
        assert_eq!(soft_score(tau / 2.0, tau), 0.5);
        // Direction at exactly |mu . d| = tau (0.25 and sqrt(1 - 0.0625) are exact enough to hit it).
        let mu = Direction::new(Vec3::new(0.25, (1.0f64 - 0.0625).sqrt(), 0.0)).unwrap();
        let a = mu.dot(&d).abs();
        assert_eq!(binary_entry(&mu, &d, a), 1);
        assert_eq!(soft_entry(&mu, &d, a), 0.0);
    }

    #[test]
    fn great_circle_row_is_all_ones() {
        let src = SourceSet { positions: vec![Vec3::new(0.0, 0.0, 5.0)], radius_mm: 5.0 };
        let dirs: Vec<Direction> = (0..12)
            .map(|i| {
                let t = i as f64 * std::f64::consts::PI / 6.0;
                dir(t.cos(), t.sin(), 0.0)
            })
            .collect();
        let grid = DirectionGrid::from_directions(dirs, 0.05).unwrap();
        let a = build_matrix(Flavor::Soft, &src, &Vec3::zeros(), &grid, &ValidityMask::all_valid(1)).unwrap();
        assert_eq!(a.row(0).cols, (0..12).collect::<Vec<u32>>());
        assert!(a.row(0).vals.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn invalid_sources_have_empty_rows() {
        let src = fibonacci_source_sphere(10, 100.0, Vec3::zeros()).unwrap();
        let grid = DirectionGrid::for_resolution(1.0, 10.0, Some(200)).unwrap();
        let mut mask = ValidityMask::all_valid(10);
        mask.valid = vec![false; 10];
        let b = build_matrix(Flavor::Binary, &src, &Vec3::zeros(), &grid, &mask).unwrap();
        assert!(b.is_empty());
        assert_eq!(uncoverable_columns(&b), (0..200).collect::<Vec<_>>());
        let short = ValidityMask::all_valid(3);
        assert!(build_matrix(Flavor::Binary, &src, &Vec3::zeros(), &grid, &short).is_err());
    }

    #[test]
    fn uncoverable_single_source_is_band_complement() {
        let src = SourceSet { positions: vec![Vec3::new(3.0, -1.0, 2.0)], radius_mm: 1.0 };
        let grid = DirectionGrid::for_resolution(2.0, 10.0, Some(400)).unwrap();
        let b = build_matrix(Flavor::Binary, &src, &Vec3::zeros(), &grid, &ValidityMask::all_valid(1)).unwrap();
        let d = Direction::new(Vec3::new(3.0, -1.0, 2.0)).unwrap();
        let expected: Vec<usize> = grid
            .directions
            .iter()
            .enumerate()
            .filter(|(_, mu)| mu.dot(&d).abs() > grid.dot_tolerance)
            .map(|(j, _)| j)
            .collect();
        assert_eq!(uncoverable_columns(&b), expected);
        let dense = CoverageMatrix::from_dense(Flavor::Binary, &[vec![1.0; 5]]).unwrap();
        assert!(uncoverable_columns(&dense).is_empty());
    }

    #[test]
    fn from_rows_validates_values() {
        assert!(CoverageMatrix::from_dense(Flavor::Binary, &[vec![0.5, 0.0]]).is_err());
        assert!(CoverageMatrix::from_dense(Flavor::Soft, &[vec![1.5, 0.0]]).is_err());
        assert!(CoverageMatrix::from_dense(Flavor::Soft, &[vec![0.5, 0.0], vec![0.1]]).is_err());
        let bad = SparseRow { cols: vec![3], vals: vec![1.0] };
        assert!(CoverageMatrix::from_rows(Flavor::Binary, 2, vec![bad]).is_err());
    }

    #[test]
    fn triples_csv() {
        let a = CoverageMatrix::from_dense(Flavor::Soft, &[vec![0.5, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut buf = Vec::new();
        a.write_triples_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "source,direction,value\n0,0,0.5\n1,1,1.0\n");
    }

    #[test]
    fn randomized_support_containment() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..40 {
            let m = rng.gen_range(1..30);
            let z = rng.gen_range(16..300);
            let tol = rng.gen_range(0.02..0.4);
            let sources = SourceSet {
                positions: (0..m)
                    .map(|_| Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                    .collect(),
                radius_mm: 1.0,
            };
            let center = Vec3::new(0.01, -0.02, 0.003);
            let grid = DirectionGrid::from_directions(fibonacci_sphere(z).unwrap(), tol).unwrap();
            let mut mask = ValidityMask::all_valid(m);
            for v in mask.valid.iter_mut() {
                *v = rng.gen_bool(0.8);
            }
            let a = build_matrix(Flavor::Soft, &sources, &center, &grid, &mask).unwrap();
            let b = build_matrix(Flavor::Binary, &sources, &center, &grid, &mask).unwrap();
            for i in 0..m {
                assert!(mask.valid[i] || a.row(i).is_empty() && b.row(i).is_empty());
                let bset: std::collections::HashSet<u32> = b.row(i).cols.iter().copied().collect();
                assert!(a.row(i).cols.iter().all(|c| bset.contains(c)));
                assert!(a.row(i).vals.iter().all(|v| *v > 0.0 && *v <= 1.0));
                assert!(b.row(i).vals.iter().all(|v| *v == 1.0));
            }
        }
    }

    proptest! {
        #[test]
        fn entries_are_sign_symmetric(
            mx in -1.0f64..1.0, my in -1.0f64..1.0, mz in -1.0f64..1.0,
            dx in -1.0f64..1.0, dy in -1.0f64..1.0, dz in -1.0f64..1.0,
            tau in 0.01f64..0.9,
        ) {
            prop_assume!(Vec3::new(mx, my, mz).norm() > 1e-3 && Vec3::new(dx, dy, dz).norm() > 1e-3);
            let mu = dir(mx, my, mz);
            let neg = dir(-mx, -my, -mz);
            let d = dir(dx, dy, dz);
            prop_assert_eq!(binary_entry(&mu, &d, tau), binary_entry(&neg, &d, tau));
            prop_assert_eq!(soft_entry(&mu, &d, tau), soft_entry(&neg, &d, tau));
            prop_assert!(soft_entry(&mu, &d, tau) == 0.0 || binary_entry(&mu, &d, tau) == 1);
        }
    }
}
