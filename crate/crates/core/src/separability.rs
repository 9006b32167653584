//! Linear separability of labelled point clouds.
//!
//! A labelling is separable when some `w` gives `y_i (w . x_i) > 0` for every
//! point. The best achievable margin with `|w| = 1` equals the distance from
//! the origin to the convex hull of the signed points `z_i = y_i x_i`, so the
//! decision reduces to a minimum-norm-point problem, solved here with Wolfe's
//! algorithm. Every iterate gives a two-sided bound on the optimal margin:
//! `min_i z_i . x / |x| <= margin <= |x|`, which lets the search stop as soon
//! as the answer is certain.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Optimal margins at or below this value count as inseparable.
pub const MARGIN_THRESHOLD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Separator {
    /// Hyperplanes through the origin.
    #[default]
    Homogeneous,
    /// Hyperplanes with a free offset (a constant coordinate is appended).
    Affine,
}

/// Tests whether `labels` (±1, one per column of `points`) can be separated
/// with margin at least `margin` (in units of `|w|`).
pub fn is_separable(points: &DMatrix<f64>, labels: &[f64], margin: f64, separator: Separator) -> Result<bool> {
    let z = signed_points(points, labels, separator)?;
    if !(margin >= 0.0 && margin.is_finite()) {
        return Err(Error::Validation(format!("margin must be finite and >= 0, got {margin}")));
    }
    if margin == 0.0 {
        let mut z = z;
        if !normalize_columns(&mut z) {
            return Ok(false);
        }
        MinNormPoint::new(&z).decide(MARGIN_THRESHOLD)
    } else {
        MinNormPoint::new(&z).decide_at_least(margin.max(MARGIN_THRESHOLD))
    }
}

/// Largest `min_i y_i (w . x_i)` over unit-norm `w` (0 when inseparable).
pub fn max_margin(points: &DMatrix<f64>, labels: &[f64], separator: Separator) -> Result<f64> {
    let z = signed_points(points, labels, separator)?;
    let (x, _) = MinNormPoint::new(&z).solve()?;
    Ok(x.norm())
}

fn signed_points(points: &DMatrix<f64>, labels: &[f64], separator: Separator) -> Result<DMatrix<f64>> {
    if points.ncols() != labels.len() {
        return Err(Error::Validation(format!(
            "{} points but {} labels",
            points.ncols(),
            labels.len()
        )));
    }
    if points.ncols() == 0 {
        return Err(Error::Validation("no points".into()));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite coordinates".into()));
    }
    if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
        return Err(Error::Validation("labels must be +1 or -1".into()));
    }
    let extra = usize::from(separator == Separator::Affine);
    let n = points.nrows();
    let mut z = DMatrix::zeros(n + extra, points.ncols());
    for (j, &y) in labels.iter().enumerate() {
        for i in 0..n {
            z[(i, j)] = y * points[(i, j)];
        }
        if extra == 1 {
            z[(n, j)] = y;
        }
    }
    Ok(z)
}

/// Scales each column to unit length. Returns `false` if some column is zero
/// (a point at the origin can never be strictly separated).
pub(crate) fn normalize_columns(z: &mut DMatrix<f64>) -> bool {
    for mut col in z.column_iter_mut() {
        let n = col.norm();
        if n == 0.0 {
            return false;
        }
        col /= n;
    }
    true
}

/// Wolfe's minimum-norm-point search over the convex hull of the columns of `z`.
pub(crate) struct MinNormPoint<'a> {
    z: &'a DMatrix<f64>,
    /// Corral: indices into the columns of `z`.
    corral: Vec<usize>,
    /// Convex weights of the corral points.
    weights: Vec<f64>,
    /// Upper Cholesky factor of `11' + Z_S' Z_S`, stored by columns.
    chol: Vec<Vec<f64>>,
    scale: f64,
}

enum Step {
    Decided(bool),
    Optimal,
}

impl<'a> MinNormPoint<'a> {
    pub(crate) fn new(z: &'a DMatrix<f64>) -> Self {
        let scale = z.column_iter().map(|c| c.norm_squared()).fold(0.0, f64::max);
        Self {
            z,
            corral: Vec::new(),
            weights: Vec::new(),
            chol: Vec::new(),
            scale: scale.max(f64::MIN_POSITIVE),
        }
    }

    /// `true` iff the optimal margin exceeds `threshold` (unit-normalized points).
    pub(crate) fn decide(mut self, threshold: f64) -> Result<bool> {
        match self.run(Some(threshold))? {
            (_, Step::Decided(b)) => Ok(b),
            (x, Step::Optimal) => Ok(x.norm() > threshold),
        }
    }

    /// `true` iff the optimal margin is at least `margin`.
    pub(crate) fn decide_at_least(mut self, margin: f64) -> Result<bool> {
        let (x, _) = self.run(None)?;
        Ok(x.norm() >= margin * (1.0 - 1e-12))
    }

    pub(crate) fn solve(mut self) -> Result<(DVector<f64>, Vec<(usize, f64)>)> {
        let (x, _) = self.run(None)?;
        let support = self.corral.iter().copied().zip(self.weights.iter().copied()).collect();
        Ok((x, support))
    }

    fn current_point(&self) -> DVector<f64> {
        let mut x = DVector::zeros(self.z.nrows());
        for (&j, &w) in self.corral.iter().zip(&self.weights) {
            x.axpy(w, &self.z.column(j), 1.0);
        }
        x
    }

    fn run(&mut self, threshold: Option<f64>) -> Result<(DVector<f64>, Step)> {
        let count = self.z.ncols();
        // start from the shortest column
        let first = (0..count)
            .min_by(|&a, &b| {
                self.z.column(a).norm_squared().total_cmp(&self.z.column(b).norm_squared())
            })
            .expect("non-empty");
        self.corral.clear();
        self.weights.clear();
        self.chol.clear();
        if !self.push(first) {
            return Err(Error::Numerical("zero-length first point".into()));
        }
        self.weights.push(1.0);

        let max_major = 50 * (count + self.z.nrows()) + 100;
        let opt_tol = 1e-12 * self.scale;
        for _ in 0..max_major {
            let x = self.current_point();
            let xx = x.norm_squared();
            let norm = xx.sqrt();
            let dots = self.z.tr_mul(&x);
            let (best, min_dot) = dots
                .iter()
                .copied()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("non-empty");
            if let Some(t) = threshold {
                if norm <= t {
                    return Ok((x, Step::Decided(false)));
                }
                if min_dot > t * norm {
                    return Ok((x, Step::Decided(true)));
                }
            }
            if xx - min_dot <= opt_tol || self.corral.contains(&best) {
                return Ok((x, Step::Optimal));
            }
            if !self.push(best) {
                // numerically in the affine hull already
                return Ok((x, Step::Optimal));
            }
            self.weights.push(0.0);
            self.minor_cycle()?;
        }
        Err(Error::Numerical(format!(
            "min-norm search did not converge in {max_major} iterations"
        )))
    }

    /// Appends column `j` to the corral and its Cholesky factor.
    fn push(&mut self, j: usize) -> bool {
        let zj = self.z.column(j);
        let diag = 1.0 + zj.norm_squared();
        let s = self.corral.len();
        let mut r = Vec::with_capacity(s + 1);
        for i in 0..s {
            let a = 1.0 + self.z.column(self.corral[i]).dot(&zj);
            let col = &self.chol[i];
            let acc: f64 = (0..i).map(|k| col[k] * r[k]).sum();
            r.push((a - acc) / col[i]);
        }
        let rest = diag - r.iter().map(|v| v * v).sum::<f64>();
        if rest <= 1e-12 * diag {
            return false;
        }
        r.push(rest.sqrt());
        self.chol.push(r);
        self.corral.push(j);
        true
    }

    /// Removes corral slot `k`, restoring the triangular factor with Givens rotations.
    fn remove(&mut self, k: usize) {
        self.chol.remove(k);
        self.corral.remove(k);
        self.weights.remove(k);
        let s = self.chol.len();
        for j in k..s {
            // column j now has a spurious entry at row j + 1
            let a = self.chol[j][j];
            let b = self.chol[j][j + 1];
            let h = a.hypot(b);
            let (c, sn) = (a / h, b / h);
            for col in self.chol[j..].iter_mut() {
                let (u, v) = (col[j], col[j + 1]);
                col[j] = c * u + sn * v;
                col[j + 1] = -sn * u + c * v;
            }
            self.chol[j].truncate(j + 1);
        }
    }

    /// Weights of the affine minimiser of the corral (sum to one).
    fn affine_weights(&self) -> Vec<f64> {
        let s = self.chol.len();
        let mut u = vec![0.0; s];
        for i in 0..s {
            let col = &self.chol[i];
            let acc: f64 = (0..i).map(|k| col[k] * u[k]).sum();
            u[i] = (1.0 - acc) / col[i];
        }
        let mut mu = vec![0.0; s];
        for i in (0..s).rev() {
            let acc: f64 = (i + 1..s).map(|j| self.chol[j][i] * mu[j]).sum();
            mu[i] = (u[i] - acc) / self.chol[i][i];
        }
        let total: f64 = mu.iter().sum();
        mu.iter_mut().for_each(|m| *m /= total);
        mu
    }

    fn minor_cycle(&mut self) -> Result<()> {
        for _ in 0..=self.z.ncols() + 1 {
            let mu = self.affine_weights();
            let floor = 1e-14;
            if mu.iter().all(|&m| m > floor) {
                self.weights = mu;
                return Ok(());
            }
            let mut theta = 1.0f64;
            for (l, m) in self.weights.iter().zip(&mu) {
                if *m <= floor {
                    let step = l / (l - m);
                    if step < theta {
                        theta = step;
                    }
                }
            }
            for (l, m) in self.weights.iter_mut().zip(&mu) {
                *l = (1.0 - theta) * *l + theta * m;
            }
            // drop at least the binding point
            let drop_at = self
                .weights
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .expect("non-empty corral");
            self.remove(drop_at);
            let mut k = 0;
            while k < self.weights.len() {
                if self.weights[k] <= floor && self.weights.len() > 1 {
                    self.remove(k);
                } else {
                    k += 1;
                }
            }
            let total: f64 = self.weights.iter().sum();
            self.weights.iter_mut().for_each(|w| *w /= total);
        }
        Err(Error::Numerical("min-norm minor cycle did not terminate".into()))
    }
}
