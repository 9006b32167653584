//! Projection of a Gaussian sample onto the cone of vectors that see every
//! manifold point with margin at least `kappa`:
//!
//! ```text
//!     minimize   |v - t|^2
//!     subject to v . s_j >= kappa   for every manifold point s_j
//! ```
//!
//! Writing `v = t + S lambda` gives the dual
//! `min_{lambda >= 0} 1/2 lambda' G lambda + lambda' (S't - kappa)` with
//! `G = S'S`, solved with a Lawson-Hanson style active-set method. The
//! gradient of the dual is exactly the constraint slack `S'v - kappa`.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::linalg::pseudo_solve;

pub const MAX_ITERATIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSolution {
    pub v_star: DVector<f64>,
    /// Supporting convex combination of manifold points; `None` when `t`
    /// already satisfies every constraint.
    pub anchor: Option<DVector<f64>>,
    /// `|v_star - t|^2`.
    pub slack_norm: f64,
    /// Dual weights, one per manifold point.
    pub dual: DVector<f64>,
    pub iterations: usize,
}

/// Manifold points with a cached Gram matrix, reused across many samples.
#[derive(Debug, Clone)]
pub struct ProjectionProblem {
    points: DMatrix<f64>,
    gram: DMatrix<f64>,
    kappa: f64,
}

impl ProjectionProblem {
    pub fn new(points: DMatrix<f64>, kappa: f64) -> Result<Self> {
        if points.ncols() == 0 {
            return Err(Error::Validation("projection needs at least one manifold point".into()));
        }
        if points.iter().any(|v| !v.is_finite()) || !kappa.is_finite() {
            return Err(Error::Validation("non-finite projection input".into()));
        }
        let gram = points.tr_mul(&points);
        Ok(Self {
            points,
            gram,
            kappa,
        })
    }

    pub fn solve(&self, t: &DVector<f64>) -> Result<ProjectionSolution> {
        let s = &self.points;
        let m = s.ncols();
        if t.len() != s.nrows() {
            return Err(Error::Validation(format!(
                "sample has dimension {}, manifold points have {}",
                t.len(),
                s.nrows()
            )));
        }
        // c = S't - kappa ; gradient at lambda is G lambda + c
        let c = s.tr_mul(t).add_scalar(-self.kappa);
        let scale = 1.0 + c.amax() + self.gram.diagonal().amax();
        let tol = 1e-12 * scale;

        let mut lambda = DVector::<f64>::zeros(m);
        let mut passive = vec![false; m];
        let mut iterations = 0;
        loop {
            let grad = &self.gram * &lambda + &c;
            let entering = (0..m)
                .filter(|&j| !passive[j])
                .min_by(|&a, &b| grad[a].total_cmp(&grad[b]));
            match entering {
                Some(j) if grad[j] < -tol => passive[j] = true,
                _ => break,
            }
            loop {
                iterations += 1;
                if iterations > MAX_ITERATIONS {
                    return Err(Error::Numerical(format!(
                        "projection QP exceeded {MAX_ITERATIONS} iterations (m = {m}, max |grad| = {:.3e})",
                        grad.amax()
                    )));
                }
                let idx: Vec<usize> = (0..m).filter(|&j| passive[j]).collect();
                let z = self.passive_solution(&idx, &c);
                if z.iter().all(|&v| v > 0.0) {
                    for (k, &j) in idx.iter().enumerate() {
                        lambda[j] = z[k];
                    }
                    break;
                }
                // step towards z until the first weight hits zero
                let mut alpha = 1.0f64;
                for (k, &j) in idx.iter().enumerate() {
                    if z[k] <= 0.0 {
                        let denom = lambda[j] - z[k];
                        let a = if denom > 0.0 { lambda[j] / denom } else { 0.0 };
                        alpha = alpha.min(a);
                    }
                }
                for (k, &j) in idx.iter().enumerate() {
                    lambda[j] += alpha * (z[k] - lambda[j]);
                    if lambda[j] <= 1e-15 * scale || (z[k] <= 0.0 && lambda[j] <= tol) {
                        lambda[j] = 0.0;
                        passive[j] = false;
                    }
                }
                if !passive.iter().any(|&p| p) {
                    break;
                }
            }
        }

        let v_star = t + s * &lambda;
        let diff = &v_star - t;
        let slack_norm = diff.norm_squared();
        let total: f64 = lambda.sum();
        let anchor = (total > 0.0 && slack_norm > 0.0).then(|| s * &lambda / total);
        Ok(ProjectionSolution {
            v_star,
            anchor,
            slack_norm,
            dual: lambda,
            iterations,
        })
    }

    /// Unconstrained minimiser over the passive set: `G_PP z = -c_P`.
    fn passive_solution(&self, idx: &[usize], c: &DVector<f64>) -> DVector<f64> {
        let g = self.gram.select_rows(idx).select_columns(idx);
        let rhs = DVector::from_iterator(idx.len(), idx.iter().map(|&j| -c[j]));
        if let Some(ch) = g.clone().cholesky() {
            let z = ch.solve(&rhs);
            if z.iter().all(|v| v.is_finite()) {
                return z;
            }
        }
        pseudo_solve(&g, &rhs, 1e-12).unwrap_or_else(|_| DVector::zeros(idx.len()))
    }

    /// Largest violation of the KKT conditions at `sol`:
    /// primal feasibility, dual feasibility and complementary slackness.
    pub fn kkt_residual(&self, sol: &ProjectionSolution) -> f64 {
        let slack = self.points.tr_mul(&sol.v_star).add_scalar(-self.kappa);
        let primal = slack.iter().map(|&g| (-g).max(0.0)).fold(0.0, f64::max);
        let dual = sol.dual.iter().map(|&l| (-l).max(0.0)).fold(0.0, f64::max);
        let comp = sol
            .dual
            .iter()
            .zip(slack.iter())
            .map(|(l, g)| (l * g).abs())
            .fold(0.0, f64::max);
        primal.max(dual).max(comp)
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }
}

/// One-shot projection of `t` against `manifold_coords` (columns are points).
pub fn solve_projection_qp(t: &DVector<f64>, manifold_coords: &DMatrix<f64>, kappa: f64) -> Result<ProjectionSolution> {
    ProjectionProblem::new(manifold_coords.clone(), kappa)?.solve(t)
}
