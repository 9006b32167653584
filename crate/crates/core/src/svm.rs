//! Soft-margin linear SVM trained by sequential minimal optimization.
//!
//! Solves `min 1/2 |w|^2 + C sum_i max(0, 1 - y_i (w . x_i + b))` through its
//! dual with second-order working-set selection, then polishes the bias by
//! exact line search on the primal and checks the duality gap.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Largest relative duality gap accepted without a warning.
pub const GAP_TOLERANCE: f64 = 1e-4;

/// Relative gap the solver keeps tightening towards.
const TARGET_GAP: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperplane {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub class_label: String,
    pub c_param: f64,
}

impl Hyperplane {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.bias
    }

    pub fn weight_norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    /// Signed distance of `x` to the hyperplane.
    pub fn field(&self, x: &[f64]) -> f64 {
        self.decision(x) / self.weight_norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmFit {
    pub weights: DVector<f64>,
    pub bias: f64,
    pub dual: DVector<f64>,
    pub primal_objective: f64,
    pub dual_objective: f64,
    pub iterations: usize,
}

impl SvmFit {
    pub fn relative_gap(&self) -> f64 {
        (self.primal_objective - self.dual_objective) / self.primal_objective.abs().max(1.0)
    }
}

/// Primal soft-margin objective of `(w, b)`.
pub fn primal_objective(x: &DMatrix<f64>, y: &[f64], w: &DVector<f64>, b: f64, c: f64) -> f64 {
    let out = x.tr_mul(w);
    0.5 * w.norm_squared()
        + c * y
            .iter()
            .zip(out.iter())
            .map(|(yi, oi)| (1.0 - yi * (oi + b)).max(0.0))
            .sum::<f64>()
}

fn validate(x: &DMatrix<f64>, y: &[f64], c: f64) -> Result<()> {
    if x.ncols() != y.len() {
        return Err(Error::Validation(format!("{} points but {} labels", x.ncols(), y.len())));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(Error::Validation(format!("C must be positive, got {c}")));
    }
    if y.iter().any(|&v| v != 1.0 && v != -1.0) {
        return Err(Error::Validation("labels must be +1 or -1".into()));
    }
    if !(y.contains(&1.0) && y.contains(&-1.0)) {
        return Err(Error::Validation("SVM training needs both classes".into()));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite training data".into()));
    }
    Ok(())
}

/// Trains a linear SVM on the columns of `x`.
pub fn train_linear_svm(x: &DMatrix<f64>, y: &[f64], c_param: f64, seed: u64) -> Result<Hyperplane> {
    let fit = fit_linear_svm(x, y, c_param, seed)?;
    Ok(Hyperplane {
        weights: fit.weights.as_slice().to_vec(),
        bias: fit.bias,
        class_label: String::new(),
        c_param,
    })
}

pub fn fit_linear_svm(x: &DMatrix<f64>, y: &[f64], c_param: f64, seed: u64) -> Result<SvmFit> {
    validate(x, y, c_param)?;
    let gram = x.tr_mul(x);
    fit_with_gram(x, &gram, y, c_param, seed)
}

/// Like [`fit_linear_svm`] with a precomputed `x' x`, shared across one-vs-rest problems.
pub fn fit_with_gram(x: &DMatrix<f64>, gram: &DMatrix<f64>, y: &[f64], c: f64, seed: u64) -> Result<SvmFit> {
    validate(x, y, c)?;
    let n = y.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, &[0x5F0]));

    let mut alpha = vec![0.0; n];
    // gradient of 1/2 a'Qa - e'a
    let mut grad = vec![-1.0; n];
    let mut eps = 1e-3;
    let mut iterations = 0usize;
    let max_iter = (100 * n).max(1_000_000);
    let tau = 1e-12;

    loop {
        loop {
            // select i: max over I_up of -y G
            let mut gmax = f64::NEG_INFINITY;
            let mut i_sel = None;
            for &t in &order {
                let up = if y[t] > 0.0 { alpha[t] < c } else { alpha[t] > 0.0 };
                if up && -y[t] * grad[t] > gmax {
                    gmax = -y[t] * grad[t];
                    i_sel = Some(t);
                }
            }
            let mut gmin = f64::INFINITY;
            let mut j_sel = None;
            let mut best_obj = f64::INFINITY;
            if let Some(i) = i_sel {
                for &t in &order {
                    let low = if y[t] > 0.0 { alpha[t] > 0.0 } else { alpha[t] < c };
                    if !low {
                        continue;
                    }
                    let v = -y[t] * grad[t];
                    gmin = gmin.min(v);
                    let b = gmax - v;
                    if b > 0.0 {
                        let a = gram[(i, i)] + gram[(t, t)] - 2.0 * gram[(i, t)];
                        let a = if a > 0.0 { a } else { tau };
                        let obj = -(b * b) / a;
                        if obj < best_obj {
                            best_obj = obj;
                            j_sel = Some(t);
                        }
                    }
                }
            }
            let (Some(i), Some(j)) = (i_sel, j_sel) else { break };
            if gmax - gmin < eps {
                break;
            }
            iterations += 1;
            if iterations > max_iter {
                return Err(Error::Numerical(format!("SMO exceeded {max_iter} iterations")));
            }
            let (old_i, old_j) = (alpha[i], alpha[j]);
            let qii = gram[(i, i)];
            let qjj = gram[(j, j)];
            let qij = y[i] * y[j] * gram[(i, j)];
            if y[i] != y[j] {
                let quad = (qii + qjj + 2.0 * qij).max(tau);
                let delta = (-grad[i] - grad[j]) / quad;
                let diff = alpha[i] - alpha[j];
                alpha[i] += delta;
                alpha[j] += delta;
                if diff > 0.0 {
                    if alpha[j] < 0.0 {
                        alpha[j] = 0.0;
                        alpha[i] = diff;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = -diff;
                }
                if diff > 0.0 {
                    if alpha[i] > c {
                        alpha[i] = c;
                        alpha[j] = c - diff;
                    }
                } else if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = c + diff;
                }
            } else {
                let quad = (qii + qjj - 2.0 * qij).max(tau);
                let delta = (grad[i] - grad[j]) / quad;
                let sum = alpha[i] + alpha[j];
                alpha[i] -= delta;
                alpha[j] += delta;
                if sum > c {
                    if alpha[i] > c {
                        alpha[i] = c;
                        alpha[j] = sum - c;
                    }
                } else if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = sum;
                }
                if sum > c {
                    if alpha[j] > c {
                        alpha[j] = c;
                        alpha[i] = sum - c;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = sum;
                }
            }
            let di = alpha[i] - old_i;
            let dj = alpha[j] - old_j;
            for t in 0..n {
                grad[t] += y[t] * (y[i] * gram[(t, i)] * di + y[j] * gram[(t, j)] * dj);
            }
        }

        let fit = assemble(x, y, &alpha, &grad, c, iterations);
        if fit.relative_gap() <= TARGET_GAP || eps < 1e-12 {
            if fit.relative_gap() > GAP_TOLERANCE {
                warn!("SVM stopped with relative duality gap {:.3e}", fit.relative_gap());
            }
            return Ok(fit);
        }
        eps *= 0.1;
    }
}

fn assemble(x: &DMatrix<f64>, y: &[f64], alpha: &[f64], grad: &[f64], c: f64, iterations: usize) -> SvmFit {
    let n = y.len();
    let coef = DVector::from_iterator(n, alpha.iter().zip(y).map(|(a, yi)| a * yi));
    let w = x * &coef;

    // bias from free vectors, otherwise the midpoint of the feasible interval
    let (mut sum, mut free) = (0.0, 0usize);
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] > 0.0 && alpha[t] < c {
            sum += yg;
            free += 1;
        } else {
            let at_upper = alpha[t] >= c;
            if (at_upper && y[t] < 0.0) || (!at_upper && y[t] > 0.0) {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        }
    }
    let rho = if free > 0 {
        sum / free as f64
    } else if ub.is_finite() && lb.is_finite() {
        (ub + lb) / 2.0
    } else if ub.is_finite() {
        ub
    } else {
        lb
    };
    let mut bias = -rho;
    let out = x.tr_mul(&w);
    let best = optimal_bias(&out, y);
    let hinge = |b: f64| -> f64 {
        y.iter()
            .zip(out.iter())
            .map(|(yi, oi)| (1.0 - yi * (oi + b)).max(0.0))
            .sum()
    };
    if hinge(best) < hinge(bias) - 1e-12 * hinge(bias).max(1.0) {
        bias = best;
    }
    let primal = 0.5 * w.norm_squared() + c * hinge(bias);
    let dual = alpha.iter().sum::<f64>() - 0.5 * w.norm_squared();
    SvmFit {
        weights: w,
        bias,
        dual: DVector::from_column_slice(alpha),
        primal_objective: primal,
        dual_objective: dual,
        iterations,
    }
}

/// Bias minimising the total hinge loss for fixed outputs `out`.
fn optimal_bias(out: &DVector<f64>, y: &[f64]) -> f64 {
    // slope(b) = -#{y=+1 : b < 1 - o} + #{y=-1 : b > -1 - o}; find where it turns non-negative
    // every breakpoint y - o raises the slope by one
    let mut breakpoints: Vec<f64> = y.iter().zip(out.iter()).map(|(yi, oi)| yi - oi).collect();
    breakpoints.sort_by(f64::total_cmp);
    let mut slope = -(y.iter().filter(|&&v| v > 0.0).count() as i64);
    for &bp in &breakpoints {
        slope += 1;
        if slope >= 0 {
            return bp;
        }
    }
    breakpoints.last().copied().unwrap_or(0.0)
}
