//! Centroids, center correlations, manifold subspaces and global PCA.

use std::io::Write;

use log::warn;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::{LayeredFeatureSet, ManifoldSet};
use crate::error::{Error, Result};
use crate::linalg::thin_svd;

/// Singular values below `RANK_TOLERANCE * max` are treated as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

/// Manifold centers, one column per manifold.
#[derive(Debug, Clone, PartialEq)]
pub struct CentroidMatrix {
    pub labels: Vec<String>,
    pub centroids: DMatrix<f64>,
}

pub fn centroids(ms: &ManifoldSet) -> CentroidMatrix {
    let dim = ms.ambient_dim();
    let mut centroids = DMatrix::zeros(dim, ms.num_manifolds());
    for (mu, m) in ms.manifolds().iter().enumerate() {
        centroids.set_column(mu, &m.points.column_mean());
    }
    CentroidMatrix {
        labels: ms.manifolds().iter().map(|m| m.label.clone()).collect(),
        centroids,
    }
}

/// How pairwise similarity between two centroid vectors is measured.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationKind {
    /// Cosine of the angle between raw centroid vectors.
    #[default]
    Cosine,
    /// Pearson correlation across the coordinates of the two vectors.
    Pearson,
}

/// Mean of `|corr(c_mu, c_nu)|` over all unordered centroid pairs.
pub fn center_correlations(cm: &CentroidMatrix) -> Result<f64> {
    center_correlations_with(cm, CorrelationKind::Cosine)
}

pub fn center_correlations_with(cm: &CentroidMatrix, kind: CorrelationKind) -> Result<f64> {
    let p = cm.centroids.ncols();
    if p < 2 {
        return Err(Error::Validation(format!(
            "center correlation needs at least 2 centroids, got {p}"
        )));
    }
    let prepared: Vec<DVector<f64>> = (0..p)
        .map(|mu| {
            let mut c = cm.centroids.column(mu).into_owned();
            if kind == CorrelationKind::Pearson {
                let mean = c.mean();
                c.add_scalar_mut(-mean);
            }
            let norm = c.norm();
            if norm <= f64::MIN_POSITIVE {
                return Err(Error::DegenerateCentroid { index: mu });
            }
            Ok(c / norm)
        })
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for a in 0..p {
        for b in a + 1..p {
            total += prepared[a].dot(&prepared[b]).abs().min(1.0);
        }
    }
    Ok(total / (p * (p - 1) / 2) as f64)
}

/// A manifold expressed in an orthonormal basis of span{spread, center}.
///
/// `coords` has `intrinsic_dim + 1` rows and one column per point. The first
/// `intrinsic_dim` rows are spread coordinates (orthogonal to the center); the
/// last row is the projection on the center direction. All coordinates are
/// divided by `center_norm`, so the centroid maps to `(0, .., 0, 1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedManifold {
    pub center_norm: f64,
    pub intrinsic_dim: usize,
    pub coords: DMatrix<f64>,
    /// `N x (intrinsic_dim + 1)` orthonormal basis, center direction last.
    pub basis: DMatrix<f64>,
}

impl ProjectedManifold {
    /// Maps `coords` back to the ambient space.
    pub fn reconstruct(&self) -> DMatrix<f64> {
        &self.basis * &self.coords * self.center_norm
    }

    pub fn num_points(&self) -> usize {
        self.coords.ncols()
    }
}

/// Expresses `points` (columns) relative to `center` in a compact orthonormal basis.
pub fn manifold_subspace(points: &DMatrix<f64>, center: &DVector<f64>) -> Result<ProjectedManifold> {
    if points.ncols() == 0 {
        return Err(Error::Validation("manifold has no points".into()));
    }
    if points.nrows() != center.len() {
        return Err(Error::Validation(format!(
            "center has dimension {}, points have {}",
            center.len(),
            points.nrows()
        )));
    }
    let center_norm = center.norm();
    let mut spread = points.clone();
    for mut col in spread.column_iter_mut() {
        col -= center;
    }
    let scale = points.column_iter().map(|c| c.norm()).fold(0.0, f64::max);
    if center_norm <= 1e-12 * scale.max(f64::MIN_POSITIVE) || center_norm == 0.0 {
        let what = if spread.norm() == 0.0 {
            "zero center and zero spread"
        } else {
            "zero-norm center"
        };
        return Err(Error::DegenerateManifold(what.into()));
    }
    let center_dir = center / center_norm;
    // spread minus its component along the center direction
    let along = center_dir.transpose() * &spread;
    let perp = &spread - &center_dir * &along;

    let (intrinsic_basis, intrinsic_coords) = principal_axes(&perp)?;
    let d = intrinsic_basis.ncols();
    let m = points.ncols();

    let mut coords = DMatrix::zeros(d + 1, m);
    coords.view_mut((0, 0), (d, m)).copy_from(&intrinsic_coords);
    let center_row = center_dir.transpose() * points;
    coords.row_mut(d).copy_from(&center_row);
    coords /= center_norm;

    let mut basis = DMatrix::zeros(points.nrows(), d + 1);
    basis.view_mut((0, 0), (points.nrows(), d)).copy_from(&intrinsic_basis);
    basis.set_column(d, &center_dir);

    Ok(ProjectedManifold {
        center_norm,
        intrinsic_dim: d,
        coords,
        basis,
    })
}

/// Rank-truncated left singular vectors of `x` and the coordinates of its
/// columns in that basis. Each axis is oriented so the coordinate with the
/// largest magnitude is positive, which makes the result independent of the
/// SVD's sign choices.
fn principal_axes(x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let n = x.nrows();
    let m = x.ncols();
    if x.norm() == 0.0 {
        return Ok((DMatrix::zeros(n, 0), DMatrix::zeros(0, m)));
    }
    let svd = thin_svd(x)?;
    let smax = svd.s[0];
    let rank = svd.s.iter().take_while(|&&s| s > RANK_TOLERANCE * smax).count();
    let mut basis = svd.u.columns(0, rank).into_owned();
    let mut coords = basis.transpose() * x;
    for k in 0..rank {
        let row = coords.row(k);
        let pivot = row.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            coords.row_mut(k).neg_mut();
            basis.column_mut(k).neg_mut();
        }
    }
    Ok((basis, coords))
}

/// Shared-basis PCA coordinates for a token subset across layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub k: usize,
    pub layers: Vec<usize>,
    pub token_indices: Vec<usize>,
    /// Ratio of each retained component's variance to the total variance.
    pub explained_variance_ratio: Vec<f64>,
    /// `coords[l]` is a `tokens x k` row-major block for `layers[l]`.
    pub coords: Vec<Vec<f64>>,
}

impl ProjectionReport {
    pub fn coord(&self, layer_pos: usize, token_pos: usize, pc: usize) -> f64 {
        self.coords[layer_pos][token_pos * self.k + pc]
    }

    /// Sum of per-component variances of one layer's projected coordinates.
    pub fn projected_variance(&self, layer_pos: usize) -> f64 {
        let t = self.token_indices.len();
        (0..self.k)
            .map(|pc| {
                let vals: Vec<f64> = (0..t).map(|i| self.coord(layer_pos, i, pc)).collect();
                let mean = vals.iter().sum::<f64>() / t as f64;
                vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t as f64
            })
            .sum()
    }

    /// Writes `layer,token_index,label,pc_1..pc_k` rows.
    pub fn write_csv<W: Write>(&self, out: W, labels: Option<&[Option<String>]>) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["layer".to_string(), "token_index".into(), "label".into()];
        header.extend((1..=self.k).map(|i| format!("pc_{i}")));
        w.write_record(&header).map_err(csv_err)?;
        for (lp, layer) in self.layers.iter().enumerate() {
            for (tp, &tok) in self.token_indices.iter().enumerate() {
                let label = labels
                    .and_then(|l| l.get(tok).cloned().flatten())
                    .unwrap_or_default();
                let mut rec = vec![layer.to_string(), tok.to_string(), label];
                rec.extend((0..self.k).map(|pc| self.coord(lp, tp, pc).to_string()));
                w.write_record(&rec).map_err(csv_err)?;
            }
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv write failed: {e}"))
}

/// Fits one PCA basis on the selected tokens of all `layers` and projects every layer into it.
pub fn global_pca(
    fs: &LayeredFeatureSet,
    layers: &[usize],
    token_subset: &[usize],
    k: usize,
) -> Result<ProjectionReport> {
    if token_subset.is_empty() || layers.is_empty() {
        return Err(Error::Validation("PCA needs at least one token and one layer".into()));
    }
    let dim = fs.ambient_dim();
    if k == 0 || k > dim {
        return Err(Error::Validation(format!("k = {k} must be in 1..={dim}")));
    }
    if let Some(&bad) = layers.iter().find(|&&l| l >= fs.layer_count()) {
        return Err(Error::Validation(format!("layer {bad} out of range")));
    }
    if let Some(&bad) = token_subset.iter().find(|&&t| t >= fs.num_tokens()) {
        return Err(Error::Validation(format!("token {bad} out of range")));
    }
    let rows = layers.len() * token_subset.len();
    let mut data = DMatrix::zeros(rows, dim);
    for (lp, &layer) in layers.iter().enumerate() {
        for (tp, &tok) in token_subset.iter().enumerate() {
            let r = lp * token_subset.len() + tp;
            for (c, &v) in fs.row(layer, tok).iter().enumerate() {
                data[(r, c)] = v as f64;
            }
        }
    }
    let mean = data.row_mean();
    let mut centered = data.clone();
    for mut row in centered.row_iter_mut() {
        row -= &mean;
    }
    let (components, variances) = principal_components(&centered)?;
    let total: f64 = variances.iter().sum();
    let rank = variances
        .iter()
        .take_while(|&&v| v > RANK_TOLERANCE * variances.first().copied().unwrap_or(0.0))
        .count();
    let k_eff = if k > rank {
        warn!("requested {k} components but data rank is {rank}; reducing");
        rank.max(1)
    } else {
        k
    };
    let basis = components.columns(0, k_eff).into_owned();
    let explained = if total > 0.0 {
        variances[..k_eff].iter().map(|v| v / total).collect()
    } else {
        vec![0.0; k_eff]
    };
    let projected = &centered * &basis;
    let t = token_subset.len();
    let coords = (0..layers.len())
        .map(|lp| {
            (0..t)
                .flat_map(|tp| {
                    let r = lp * t + tp;
                    (0..k_eff).map(move |c| (r, c))
                })
                .map(|(r, c)| projected[(r, c)])
                .collect()
        })
        .collect();
    Ok(ProjectionReport {
        k: k_eff,
        layers: layers.to_vec(),
        token_indices: token_subset.to_vec(),
        explained_variance_ratio: explained,
        coords,
    })
}

/// Principal directions (columns, descending variance) of a row-centered matrix.
fn principal_components(centered: &DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>)> {
    let n = centered.nrows().max(1) as f64;
    let svd = thin_svd(centered)?;
    let mut vectors = svd.v;
    let values = svd.s.iter().map(|s| s * s / n).collect();
    for mut col in vectors.column_iter_mut() {
        let pivot = col.iter().copied().fold(0.0f64, |b, v| if v.abs() > b.abs() { v } else { b });
        if pivot < 0.0 {
            col.neg_mut();
        }
    }
    Ok((vectors, values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn cm(cols: &[&[f64]]) -> CentroidMatrix {
        let dim = cols[0].len();
        CentroidMatrix {
            labels: (0..cols.len()).map(|i| i.to_string()).collect(),
            centroids: DMatrix::from_fn(dim, cols.len(), |i, j| cols[j][i]),
        }
    }

    #[test]
    fn centroid_examples() {
        let a = DMatrix::from_column_slice(2, 2, &[0.0, 0.0, 2.0, 0.0]);
        let b = DMatrix::from_column_slice(2, 1, &[3.0, -4.0]);
        let c = DMatrix::from_column_slice(2, 2, &[1.0, 5.0, -1.0, -5.0]);
        let ms = ManifoldSet::from_points("t", vec![("a".into(), a), ("b".into(), b), ("c".into(), c)]).unwrap();
        let cm = centroids(&ms);
        assert_eq!(cm.centroids.column(0).as_slice(), &[1.0, 0.0]);
        assert_eq!(cm.centroids.column(1).as_slice(), &[3.0, -4.0]);
        assert_eq!(cm.centroids.column(2).as_slice(), &[0.0, 0.0]);
    }

    #[test]
    fn correlation_examples() {
        assert_relative_eq!(center_correlations(&cm(&[&[1.0, 2.0], &[1.0, 2.0]])).unwrap(), 1.0);
        assert_relative_eq!(center_correlations(&cm(&[&[1.0, 0.0], &[0.0, 3.0]])).unwrap(), 0.0);
        // pairwise cosines 0.5, -0.5, 0
        let s = 3f64.sqrt() / 2.0;
        let c = cm(&[&[1.0, 0.0, 0.0], &[0.5, s, 0.0], &[-0.5, s / 3.0, (2.0f64 / 3.0).sqrt()]]);
        let g = |a: usize, b: usize| c.centroids.column(a).dot(&c.centroids.column(b));
        assert_relative_eq!(g(0, 1), 0.5, epsilon = 1e-12);
        assert_relative_eq!(g(0, 2), -0.5, epsilon = 1e-12);
        assert_relative_eq!(g(1, 2), 0.0, epsilon = 1e-12);
        assert_relative_eq!(center_correlations(&c).unwrap(), 1.0 / 3.0, epsilon = 1e-12);
        assert!(matches!(
            center_correlations(&cm(&[&[1.0, 0.0], &[0.0, 0.0]])),
            Err(Error::DegenerateCentroid { index: 1 })
        ));
    }

    #[test]
    fn pearson_differs_from_cosine() {
        let c = cm(&[&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]]);
        assert_relative_eq!(center_correlations_with(&c, CorrelationKind::Pearson).unwrap(), 1.0, epsilon = 1e-12);
        assert!(center_correlations(&c).unwrap() < 0.8);
    }

    #[test]
    fn point_manifold_subspace() {
        let p = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 2.0]);
        let pm = manifold_subspace(&p, &p.column(0).into_owned()).unwrap();
        assert_eq!(pm.intrinsic_dim, 0);
        assert_eq!(pm.coords.shape(), (1, 1));
        assert_relative_eq!(pm.coords[(0, 0)], 1.0, epsilon = 1e-14);
        assert_relative_eq!(pm.center_norm, 3.0, epsilon = 1e-14);
    }

    #[test]
    fn collinear_points_have_one_dimension() {
        let p = DMatrix::from_column_slice(3, 3, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 2.0, 2.0]);
        let c = p.column_mean();
        let pm = manifold_subspace(&p, &c).unwrap();
        assert_eq!(pm.intrinsic_dim, 1);
        assert_relative_eq!(pm.reconstruct(), p, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_centers() {
        let z = DMatrix::zeros(2, 3);
        assert!(matches!(
            manifold_subspace(&z, &DVector::zeros(2)),
            Err(Error::DegenerateManifold(_))
        ));
        let sym = DMatrix::from_column_slice(2, 2, &[1.0, 0.0, -1.0, 0.0]);
        assert!(manifold_subspace(&sym, &sym.column_mean()).is_err());
    }
}
