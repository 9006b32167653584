//! Dense decompositions backed by `faer`.
//!
//! nalgebra's SVD can return factors that do not reproduce rank-deficient
//! inputs, which is the common case for manifold spreads, so SVDs go through
//! `faer` instead.

use faer::Mat;
use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// `x = u * diag(s) * v'` with singular values in descending order.
#[derive(Debug, Clone)]
pub(crate) struct ThinSvd {
    pub u: DMatrix<f64>,
    pub s: Vec<f64>,
    pub v: DMatrix<f64>,
}

pub(crate) fn thin_svd(x: &DMatrix<f64>) -> Result<ThinSvd> {
    let (r, c) = x.shape();
    let k = r.min(c);
    if k == 0 {
        return Ok(ThinSvd {
            u: DMatrix::zeros(r, 0),
            s: Vec::new(),
            v: DMatrix::zeros(c, 0),
        });
    }
    let m = Mat::<f64>::from_fn(r, c, |i, j| x[(i, j)]);
    let svd = m
        .thin_svd()
        .map_err(|e| Error::Numerical(format!("SVD did not converge: {e:?}")))?;
    let (u, s, v) = (svd.U(), svd.S().column_vector(), svd.V());
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
    Ok(ThinSvd {
        u: DMatrix::from_fn(r, k, |i, j| u[(i, order[j])]),
        s: order.iter().map(|&j| s[j]).collect(),
        v: DMatrix::from_fn(c, k, |i, j| v[(i, order[j])]),
    })
}

/// Minimum-norm least-squares solution of `a z = b`, discarding singular
/// values below `rel_tol` times the largest.
pub(crate) fn pseudo_solve(a: &DMatrix<f64>, b: &nalgebra::DVector<f64>, rel_tol: f64) -> Result<nalgebra::DVector<f64>> {
    let svd = thin_svd(a)?;
    let cutoff = rel_tol * svd.s.first().copied().unwrap_or(0.0);
    let mut z = nalgebra::DVector::zeros(a.ncols());
    for (k, &sk) in svd.s.iter().enumerate() {
        if sk > cutoff && sk > 0.0 {
            let coef = svd.u.column(k).dot(b) / sk;
            z += svd.v.column(k) * coef;
        }
    }
    Ok(z)
}
