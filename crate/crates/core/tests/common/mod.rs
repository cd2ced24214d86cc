#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use xpe::ExperimentFrame;

/// Weighted OLS with HC0 covariance, from the normal equations.
pub fn ols_hc0(x: &DMatrix<f64>, y: &DVector<f64>, w: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let p = x.ncols();
    let mut xtx = DMatrix::zeros(p, p);
    let mut xty = DVector::zeros(p);
    for i in 0..x.nrows() {
        let r = x.row(i).transpose();
        xtx += w[i] * &r * r.transpose();
        xty += w[i] * y[i] * &r;
    }
    let inv = xtx.try_inverse().expect("singular oracle design");
    let beta = &inv * xty;
    let mut meat = DMatrix::zeros(p, p);
    for i in 0..x.nrows() {
        let r = x.row(i).transpose();
        let e = y[i] - (x.row(i) * &beta)[0];
        meat += (w[i] * e).powi(2) * &r * r.transpose();
    }
    (beta, &inv * meat * &inv)
}

/// `[1, T, x₁..x_k, T·x₁..T·x_k]` for a binary frame with numeric covariates.
pub fn interacted_design(frame: &ExperimentFrame, covariates: &[&[f64]]) -> DMatrix<f64> {
    let n = frame.n();
    let k = covariates.len();
    let treated = frame.arms()[1];
    DMatrix::from_fn(n, 2 + 2 * k, |i, j| {
        let t = f64::from(u8::from(frame.treated()[i] == treated));
        match j {
            0 => 1.0,
            1 => t,
            j if j < 2 + k => covariates[j - 2][i],
            j => t * covariates[j - 2 - k][i],
        }
    })
}

pub fn rel_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

pub fn max_rel_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let scale = a.abs().max().max(b.abs().max()).max(1.0);
    (a - b).abs().max() / scale
}
