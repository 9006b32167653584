//! Simulation manifold capacity.
//!
//! Points are projected to `n` random Gaussian dimensions and random ±1
//! labels are assigned per manifold. The critical dimension `N_c` is where
//! half of those dichotomies are linearly separable; capacity is `P / N_c`.

use std::collections::HashMap;

use log::warn;
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ManifoldSet;
use crate::error::{Error, Result};
use crate::rng;
use crate::separability::{normalize_columns, MinNormPoint, Separator, MARGIN_THRESHOLD};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub epsilon: f64,
    pub max_iter: usize,
    pub n_dichotomies: usize,
    pub instances_per_manifold: usize,
    pub seed: u64,
    pub separator: Separator,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.05,
            max_iter: 100,
            n_dichotomies: 51,
            instances_per_manifold: 20,
            seed: 0,
            separator: Separator::Homogeneous,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::Validation(format!("epsilon must be in (0, 0.5), got {}", self.epsilon)));
        }
        if self.n_dichotomies == 0 || self.n_dichotomies.is_multiple_of(2) {
            return Err(Error::Validation(format!(
                "n_dichotomies must be odd, got {}",
                self.n_dichotomies
            )));
        }
        if self.max_iter == 0 || self.instances_per_manifold == 0 {
            return Err(Error::Validation("max_iter and instances_per_manifold must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub n_dims: usize,
    pub separable_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimCapacityResult {
    pub alpha_sim: f64,
    pub n_critical: usize,
    pub trace: Vec<TraceEntry>,
    pub converged: bool,
    pub iterations: usize,
    pub num_manifolds: usize,
    /// Identical points found in manifolds with different labels.
    pub conflicting_duplicates: bool,
}

/// Fraction of `cfg.n_dichotomies` random manifold labellings that are
/// separable after projecting to `n_dims` dimensions.
///
/// The projection rows and the dichotomies are drawn from streams keyed by
/// `cfg.seed` only, so calls with growing `n_dims` see nested projections and
/// identical labellings.
pub fn separable_fraction(ms: &ManifoldSet, n_dims: usize, cfg: &SimConfig) -> Result<f64> {
    cfg.validate()?;
    fraction_at(ms, n_dims, cfg, cfg.seed)
}

fn fraction_at(ms: &ManifoldSet, n_dims: usize, cfg: &SimConfig, seed: u64) -> Result<f64> {
    let ambient = ms.ambient_dim();
    if n_dims == 0 || n_dims > ambient {
        return Err(Error::Validation(format!("n_dims must be in 1..={ambient}, got {n_dims}")));
    }
    let projected = project(ms, n_dims, cfg.separator, seed);
    let mut unit = projected;
    let usable = normalize_columns(&mut unit);
    let owner: Vec<usize> = ms
        .sizes()
        .iter()
        .enumerate()
        .flat_map(|(mu, &s)| std::iter::repeat_n(mu, s))
        .collect();
    let p = ms.num_manifolds();

    let outcomes: Vec<bool> = (0..cfg.n_dichotomies)
        .into_par_iter()
        .map(|d| {
            let labels = dichotomy(p, seed, d as u64);
            if !usable {
                return Ok(false);
            }
            let mut z = unit.clone();
            for (j, mut col) in z.column_iter_mut().enumerate() {
                if labels[owner[j]] < 0.0 {
                    col.neg_mut();
                }
            }
            MinNormPoint::new(&z).decide(MARGIN_THRESHOLD)
        })
        .collect::<Result<_>>()?;
    Ok(outcomes.iter().filter(|&&s| s).count() as f64 / cfg.n_dichotomies as f64)
}

/// Random ±1 per manifold; all-equal labellings are redrawn.
fn dichotomy(p: usize, seed: u64, index: u64) -> Vec<f64> {
    let mut r = rng::stream(seed, &[0xD1C0, index]);
    loop {
        let labels: Vec<f64> = (0..p)
            .map(|_| if r.random::<bool>() { 1.0 } else { -1.0 })
            .collect();
        if labels.iter().any(|&y| y > 0.0) && labels.iter().any(|&y| y < 0.0) {
            return labels;
        }
    }
}

/// Gaussian projection of all points (columns, manifold order) to `n_dims`.
/// Row `k` of the projection depends only on `(seed, k)`.
fn project(ms: &ManifoldSet, n_dims: usize, separator: Separator, seed: u64) -> DMatrix<f64> {
    let ambient = ms.ambient_dim();
    let scale = 1.0 / (n_dims as f64).sqrt();
    let mut proj = DMatrix::zeros(n_dims, ambient);
    for k in 0..n_dims {
        let mut r = rng::stream(seed, &[0x9A55, k as u64]);
        for c in 0..ambient {
            proj[(k, c)] = r.sample::<f64, _>(StandardNormal) * scale;
        }
    }
    let extra = usize::from(separator == Separator::Affine);
    let mut out = DMatrix::zeros(n_dims + extra, ms.total_points());
    let mut col = 0;
    for m in ms.manifolds() {
        let y = &proj * &m.points;
        out.view_mut((0, col), (n_dims, m.len())).copy_from(&y);
        col += m.len();
    }
    if extra == 1 {
        out.row_mut(n_dims).fill(1.0);
    }
    out
}

fn has_conflicting_duplicates(ms: &ManifoldSet) -> bool {
    let mut seen: HashMap<Vec<u64>, usize> = HashMap::new();
    for (mu, m) in ms.manifolds().iter().enumerate() {
        for col in m.points.column_iter() {
            let key: Vec<u64> = col.iter().map(|v| v.to_bits()).collect();
            if let Some(&other) = seen.get(&key) {
                if other != mu {
                    return true;
                }
            } else {
                seen.insert(key, mu);
            }
        }
    }
    false
}

/// Bisection search for the critical dimension.
///
/// Each manifold is first cut down to `cfg.instances_per_manifold` points.
/// Every evaluation draws a fresh projection and fresh dichotomies keyed by
/// `(cfg.seed, step)`. When the bracket has closed to adjacent integers the
/// endpoints are re-sampled until one lands inside `0.5 ± epsilon` or the
/// iteration budget runs out.
pub fn simulation_capacity(ms: &ManifoldSet, cfg: &SimConfig) -> Result<SimCapacityResult> {
    cfg.validate()?;
    let ms = ms.subsample(cfg.instances_per_manifold, cfg.seed);
    let p = ms.num_manifolds();
    let ambient = ms.ambient_dim();
    let conflicting = has_conflicting_duplicates(&ms);
    if conflicting {
        warn!(
            "task `{}` layer {}: identical points carry different labels",
            ms.task, ms.layer
        );
    }

    let mut trace = Vec::new();
    let eval = |n: usize, trace: &mut Vec<TraceEntry>| -> Result<f64> {
        let step = trace.len() as u64;
        let f = fraction_at(&ms, n, cfg, rng::derive_seed(cfg.seed, &[0xB15E, step]))?;
        trace.push(TraceEntry {
            n_dims: n,
            separable_fraction: f,
        });
        Ok(f)
    };
    let within = |f: f64| (f - 0.5).abs() <= cfg.epsilon + 1e-12;
    let finish = |n: usize, converged: bool, trace: Vec<TraceEntry>| SimCapacityResult {
        alpha_sim: p as f64 / n as f64,
        n_critical: n,
        iterations: trace.len(),
        trace,
        converged,
        num_manifolds: p,
        conflicting_duplicates: conflicting,
    };

    let top = eval(ambient, &mut trace)?;
    if within(top) {
        return Ok(finish(ambient, true, trace));
    }
    if top < 0.5 {
        warn!("separable fraction {top:.3} < 0.5 even at full dimension {ambient}");
        return Ok(finish(ambient, false, trace));
    }

    // lo: fraction known low (0 is always low), hi: fraction known high
    let (mut lo, mut hi) = (0usize, ambient);
    while trace.len() < cfg.max_iter {
        let n = if hi - lo >= 2 {
            lo + (hi - lo) / 2
        } else if trace.len() % 2 == 0 || lo == 0 {
            hi
        } else {
            lo
        };
        let f = eval(n, &mut trace)?;
        if within(f) {
            return Ok(finish(n, true, trace));
        }
        if f > 0.5 {
            hi = n;
            if lo >= hi {
                lo = hi - 1;
            }
        } else {
            lo = n;
            if hi <= lo {
                hi = (lo + 1).min(ambient);
            }
        }
    }
    let best = trace
        .iter()
        .min_by(|a, b| {
            (a.separable_fraction - 0.5)
                .abs()
                .total_cmp(&(b.separable_fraction - 0.5).abs())
        })
        .map(|e| e.n_dims)
        .unwrap_or(ambient);
    Ok(finish(best, false, trace))
}

/// Capacity of unstructured manifolds with the given sizes: `1 / mean(l_i / 2)`.
pub fn lower_bound_capacity(sizes: &[usize]) -> Result<f64> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::Validation("sizes must be non-empty and positive".into()));
    }
    let mean_half = sizes.iter().map(|&l| l as f64 / 2.0).sum::<f64>() / sizes.len() as f64;
    Ok(1.0 / mean_half)
}
