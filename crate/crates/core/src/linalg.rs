//! Small dense helpers for cross-moment matrices.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative eigenvalue floor (on the unit-diagonal scaled matrix) below which a
/// cross-moment matrix is declared rank deficient.
const RANK_TOL: f64 = 1e-11;
/// Loading threshold for naming a column as part of a null direction.
const NULL_LOADING: f64 = 1e-4;

const CHUNK: usize = 4096;

/// `aᵀ · diag(v) · b`, accumulated over fixed row chunks (deterministic order).
pub fn weighted_cross(a: &DMatrix<f64>, v: &DVector<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let rows = a.nrows();
    let mut out = DMatrix::zeros(a.ncols(), b.ncols());
    let mut start = 0;
    while start < rows {
        let len = CHUNK.min(rows - start);
        let mut vb = b.rows(start, len).into_owned();
        for (r, mut row) in vb.row_iter_mut().enumerate() {
            row *= v[start + r];
        }
        out += a.rows(start, len).tr_mul(&vb);
        start += len;
    }
    out
}

/// Cholesky solver for a symmetric positive definite matrix, applied on the
/// unit-diagonal rescaling. Construction fails with the names of the columns
/// spanning any (near) null direction.
pub struct SpdSolver {
    scale: DVector<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl SpdSolver {
    pub fn new(m: &DMatrix<f64>, names: &[String], what: &str) -> Result<Self> {
        let p = m.nrows();
        let diag = m.diagonal();
        let zero: Vec<String> = (0..p)
            .filter(|&i| !(diag[i] > 0.0) || !diag[i].is_finite())
            .map(|i| names[i].clone())
            .collect();
        if !zero.is_empty() {
            return Err(Error::RankDeficient {
                matrix: what.to_string(),
                columns: zero,
            });
        }
        let scale = diag.map(|d| 1.0 / d.sqrt());
        let mut scaled = m.clone();
        for i in 0..p {
            for j in 0..p {
                scaled[(i, j)] *= scale[i] * scale[j];
            }
        }
        let scaled = (&scaled + scaled.transpose()) * 0.5;

        let eig = SymmetricEigen::new(scaled.clone());
        let max = eig.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
        let mut named = vec![false; p];
        let mut deficient = false;
        for (k, lambda) in eig.eigenvalues.iter().enumerate() {
            if *lambda <= RANK_TOL * max {
                deficient = true;
                for i in 0..p {
                    if eig.eigenvectors[(i, k)].abs() > NULL_LOADING {
                        named[i] = true;
                    }
                }
            }
        }
        if deficient {
            return Err(Error::RankDeficient {
                matrix: what.to_string(),
                columns: (0..p).filter(|&i| named[i]).map(|i| names[i].clone()).collect(),
            });
        }
        let chol = Cholesky::new(scaled).ok_or_else(|| Error::RankDeficient {
            matrix: what.to_string(),
            columns: names.to_vec(),
        })?;
        Ok(SpdSolver { scale, chol })
    }

    /// `M⁻¹ · b`
    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut rhs = b.clone();
        for (i, mut row) in rhs.row_iter_mut().enumerate() {
            row *= self.scale[i];
        }
        let mut x = self.chol.solve(&rhs);
        for (i, mut row) in x.row_iter_mut().enumerate() {
            row *= self.scale[i];
        }
        x
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve(&DMatrix::identity(self.scale.len(), self.scale.len()))
    }
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Square root of a symmetric positive semidefinite matrix: `L` with `L Lᵀ = m`.
/// Negative eigenvalues from rounding are clamped to zero.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    if let Some(ch) = Cholesky::new(m.clone()) {
        return ch.l();
    }
    let eig = SymmetricEigen::new(m.clone());
    let mut l = eig.eigenvectors.clone();
    for (k, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        l.column_mut(k).scale_mut(s);
    }
    l
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_collinear_columns() {
        let names: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        let x = DMatrix::from_row_slice(4, 3, &[1.0, 1.0, 2.0, 1.0, 2.0, 4.0, 1.0, 3.0, 6.0, 1.0, 5.0, 10.0]);
        let m = x.tr_mul(&x);
        match SpdSolver::new(&m, &names, "test") {
            Err(Error::RankDeficient { columns, .. }) => assert_eq!(columns, ["b", "c"]),
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn solves_spd() {
        let names: Vec<String> = ["a", "b"].iter().map(|s| s.to_string()).collect();
        let m = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let s = SpdSolver::new(&m, &names, "t").unwrap();
        let inv = s.inverse();
        assert!((&m * inv - DMatrix::identity(2, 2)).abs().max() < 1e-14);
    }

    #[test]
    fn weighted_cross_matches_direct() {
        let a = DMatrix::from_fn(9000, 3, |i, j| ((i * 3 + j) % 7) as f64);
        let b = DMatrix::from_fn(9000, 2, |i, j| ((i + j) % 5) as f64 - 2.0);
        let v = DVector::from_fn(9000, |i, _| 1.0 + (i % 3) as f64);
        let mut direct = DMatrix::<f64>::zeros(3, 2);
        for r in 0..9000 {
            for i in 0..3 {
                for j in 0..2 {
                    direct[(i, j)] += a[(r, i)] * v[r] * b[(r, j)];
                }
            }
        }
        assert!((weighted_cross(&a, &v, &b) - direct).abs().max() < 1e-8);
    }

    #[test]
    fn psd_factor_handles_zero() {
        let z = DMatrix::<f64>::zeros(3, 3);
        let l = psd_factor(&z);
        assert!(l.abs().max() == 0.0);
    }
}
