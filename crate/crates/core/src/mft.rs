//! Mean-field manifold capacity, radius and dimension.
//!
//! For every manifold, Gaussian samples `t` are drawn in the manifold's
//! `(D + 1)`-dimensional coordinate system (see
//! [`manifold_subspace`](crate::geometry::manifold_subspace)) and projected
//! onto the set of vectors that see all manifold points with margin `kappa`.
//!
//! * capacity contribution `alpha_mu = 1 / mean |v* - t|^2`;
//! * radius: RMS norm of the anchor's spread coordinates, per unit center coordinate;
//! * dimension: mean of `(t . u)^2` with `u` the unit spread direction of the anchor.
//!
//! The set-level capacity is the inverse of the mean inverse contribution.

use std::collections::HashSet;

use log::debug;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ManifoldSet;
use crate::error::{Error, Result};
use crate::geometry::{center_correlations_with, centroids, manifold_subspace, CorrelationKind, ProjectedManifold};
use crate::qp::ProjectionProblem;
use crate::rng;

/// How samples without an anchor enter the dimension average.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DimensionAveraging {
    /// Interior samples count as zero.
    #[default]
    ZeroCount,
    /// Only samples with an anchor are averaged.
    AnchoredOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MftConfig {
    pub kappa: f64,
    pub n_t: usize,
    pub seed: u64,
    /// Subtract the mean of all points (over every manifold) before analysis.
    pub global_centering: bool,
    pub dimension_averaging: DimensionAveraging,
    pub correlation: CorrelationKind,
}

impl Default for MftConfig {
    fn default() -> Self {
        Self {
            kappa: 1e-8,
            n_t: 300,
            seed: 0,
            global_centering: true,
            dimension_averaging: DimensionAveraging::ZeroCount,
            correlation: CorrelationKind::Cosine,
        }
    }
}

impl MftConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_t == 0 {
            return Err(Error::Validation("n_t must be >= 1".into()));
        }
        if !(self.kappa >= 0.0 && self.kappa.is_finite()) {
            return Err(Error::Validation(format!("kappa must be finite and >= 0, got {}", self.kappa)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifoldMetrics {
    #[serde(default)]
    pub label: String,
    /// `+inf` (serialized as `"inf"`) when every sample was interior.
    #[serde(with = "extended_float")]
    pub alpha_mu: f64,
    pub radius: f64,
    pub dimension: f64,
    pub n_t_used: usize,
    /// Samples that produced an anchor point.
    pub n_anchored: usize,
    pub intrinsic_dim: usize,
    pub center_norm: f64,
    /// No sample produced an anchor; `alpha_mu` is the `+inf` sentinel.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MftReport {
    pub schema_version: u32,
    pub task: String,
    pub layer: usize,
    #[serde(with = "extended_float")]
    pub alpha_m: f64,
    pub per_manifold: Vec<ManifoldMetrics>,
    pub mean_radius: f64,
    pub mean_dimension: f64,
    pub rho_center: f64,
    pub config: MftConfig,
}

impl MftReport {
    /// Aggregated capacity over the manifolds whose label is in `labels`.
    pub fn subset_capacity(&self, labels: &[String]) -> Result<f64> {
        let wanted: HashSet<&str> = labels.iter().map(String::as_str).collect();
        let alphas: Vec<f64> = self
            .per_manifold
            .iter()
            .filter(|m| wanted.contains(m.label.as_str()))
            .map(|m| m.alpha_mu)
            .collect();
        capacity_contribution_aggregate(&alphas)
    }
}

/// Inverse of the mean of inverses.
pub fn capacity_contribution_aggregate(alphas: &[f64]) -> Result<f64> {
    if alphas.is_empty() {
        return Err(Error::Validation("no capacities to aggregate".into()));
    }
    if let Some(bad) = alphas.iter().find(|a| !(**a > 0.0)) {
        return Err(Error::Validation(format!("capacities must be positive, got {bad}")));
    }
    let mean_inv = alphas.iter().map(|a| 1.0 / a).sum::<f64>() / alphas.len() as f64;
    Ok(1.0 / mean_inv)
}

fn gaussian_sample(dim: usize, seed: u64, index: usize) -> DVector<f64> {
    let mut r = rng::stream(seed, &[0x7E57, index as u64]);
    DVector::from_iterator(dim, (0..dim).map(|_| r.sample::<f64, _>(StandardNormal)))
}

/// Capacity contribution, radius and dimension of one projected manifold.
pub fn mft_single_manifold(pm: &ProjectedManifold, cfg: &MftConfig) -> Result<ManifoldMetrics> {
    cfg.validate()?;
    let d = pm.intrinsic_dim;
    let problem = ProjectionProblem::new(pm.coords.clone(), cfg.kappa)?;

    let mut slack_total = 0.0;
    let mut radius_sq_total = 0.0;
    let mut radius_count = 0usize;
    let mut dim_total = 0.0;
    let mut anchored = 0usize;
    for i in 0..cfg.n_t {
        let t = gaussian_sample(d + 1, cfg.seed, i);
        let sol = problem.solve(&t)?;
        slack_total += sol.slack_norm;
        let Some(anchor) = sol.anchor else { continue };
        anchored += 1;
        let spread = anchor.rows(0, d);
        let spread_norm = spread.norm();
        let center_coord = anchor[d];
        if center_coord > 0.0 {
            radius_sq_total += (spread_norm / center_coord).powi(2);
            radius_count += 1;
        }
        if spread_norm > 0.0 {
            let proj = t.rows(0, d).dot(&spread) / spread_norm;
            dim_total += proj * proj;
        }
    }
    let mean_slack = slack_total / cfg.n_t as f64;
    let degenerate = anchored == 0 || mean_slack == 0.0;
    let dim_den = match cfg.dimension_averaging {
        DimensionAveraging::ZeroCount => cfg.n_t,
        DimensionAveraging::AnchoredOnly => anchored.max(1),
    };
    Ok(ManifoldMetrics {
        label: String::new(),
        alpha_mu: if degenerate { f64::INFINITY } else { 1.0 / mean_slack },
        radius: if radius_count > 0 {
            (radius_sq_total / radius_count as f64).sqrt()
        } else {
            0.0
        },
        dimension: dim_total / dim_den as f64,
        n_t_used: cfg.n_t,
        n_anchored: anchored,
        intrinsic_dim: d,
        center_norm: pm.center_norm,
        degenerate,
    })
}

/// Full mean-field analysis of a manifold set.
pub fn mftma(ms: &ManifoldSet, cfg: &MftConfig) -> Result<MftReport> {
    cfg.validate()?;
    let rho_center = center_correlations_with(&centroids(ms), cfg.correlation)?;
    let offset = if cfg.global_centering {
        global_mean(ms)
    } else {
        DVector::zeros(ms.ambient_dim())
    };
    let per_manifold = ms
        .manifolds()
        .par_iter()
        .enumerate()
        .map(|(mu, m)| {
            let mut pts = m.points.clone();
            for mut col in pts.column_iter_mut() {
                col -= &offset;
            }
            let center = pts.column_mean();
            let local = MftConfig {
                seed: rng::derive_seed(cfg.seed, &[mu as u64]),
                ..cfg.clone()
            };
            let metrics = manifold_subspace(&pts, &center)
                .and_then(|pm| mft_single_manifold(&pm, &local))
                .map_err(|e| Error::in_manifold(&m.label, e))?;
            debug!(
                "{}: alpha {:.4} R {:.4} D {:.3} (intrinsic {})",
                m.label, metrics.alpha_mu, metrics.radius, metrics.dimension, metrics.intrinsic_dim
            );
            Ok(ManifoldMetrics {
                label: m.label.clone(),
                ..metrics
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let alphas: Vec<f64> = per_manifold.iter().map(|m| m.alpha_mu).collect();
    let p = per_manifold.len() as f64;
    Ok(MftReport {
        schema_version: crate::SCHEMA_VERSION,
        task: ms.task.clone(),
        layer: ms.layer,
        alpha_m: capacity_contribution_aggregate(&alphas)?,
        mean_radius: per_manifold.iter().map(|m| m.radius).sum::<f64>() / p,
        mean_dimension: per_manifold.iter().map(|m| m.dimension).sum::<f64>() / p,
        per_manifold,
        rho_center,
        config: cfg.clone(),
    })
}

fn global_mean(ms: &ManifoldSet) -> DVector<f64> {
    let mut sum = DVector::zeros(ms.ambient_dim());
    for m in ms.manifolds() {
        sum += m.points.column_sum();
    }
    sum / ms.total_points() as f64
}

/// Builds a projected manifold directly from `(D + 1) x M` coordinates whose
/// last row is the center coordinate. Handy for synthetic studies.
pub fn projected_from_coords(coords: DMatrix<f64>) -> ProjectedManifold {
    let d = coords.nrows() - 1;
    ProjectedManifold {
        center_norm: 1.0,
        intrinsic_dim: d,
        basis: DMatrix::identity(d + 1, d + 1),
        coords,
    }
}

/// Serializes non-finite floats as strings so reports round-trip through JSON.
pub(crate) mod extended_float {
    use serde::{de, Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            s.serialize_str("nan")
        } else if *v > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(v) => Ok(v),
            Repr::Text(t) => match t.as_str() {
                "inf" => Ok(f64::INFINITY),
                "-inf" => Ok(f64::NEG_INFINITY),
                "nan" => Ok(f64::NAN),
                other => Err(de::Error::custom(format!("bad float `{other}`"))),
            },
        }
    }
}
