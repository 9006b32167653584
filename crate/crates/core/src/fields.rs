//! One-vs-rest SVM fields.
//!
//! For each class a linear SVM separates it from all other classes on a
//! training split. The field of a held-out positive point is its signed
//! distance to that hyperplane, optionally divided by the field gap between
//! the positive and negative class centroids.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::ManifoldSet;
use crate::error::{Error, Result};
use crate::rng;
use crate::svm::fit_with_gram;
use crate::SCHEMA_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train_fraction: f64,
    pub test_fraction: f64,
}

impl Split {
    pub const EIGHTY_TWENTY: Split = Split {
        train_fraction: 0.8,
        test_fraction: 0.2,
    };
    pub const TEN_NINETY: Split = Split {
        train_fraction: 0.1,
        test_fraction: 0.9,
    };

    pub fn new(train_fraction: f64, test_fraction: f64) -> Result<Self> {
        let s = Split {
            train_fraction,
            test_fraction,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |f: f64| f > 0.0 && f < 1.0;
        if !ok(self.train_fraction) || !ok(self.test_fraction) || self.train_fraction + self.test_fraction > 1.0 + 1e-12 {
            return Err(Error::Validation(format!(
                "invalid split {}/{}: fractions must lie in (0, 1) and sum to at most 1",
                self.train_fraction, self.test_fraction
            )));
        }
        Ok(())
    }

    /// Train and test counts for a class of `n` points, each at least one.
    fn counts(&self, n: usize) -> (usize, usize) {
        let train = ((n as f64 * self.train_fraction).round() as usize).clamp(1, n - 1);
        let test = ((n as f64 * self.test_fraction).round() as usize).clamp(1, n - train);
        (train, test)
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    /// Parses `"80/20"` style percentages.
    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once('/')
            .ok_or_else(|| Error::Validation(format!("split `{s}` is not of the form TRAIN/TEST")))?;
        let parse = |v: &str| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Validation(format!("split `{s}`: `{v}` is not a number")))
        };
        Split::new(parse(a)? / 100.0, parse(b)? / 100.0)
    }
}

/// Which split the normalizing class centroids come from.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CentroidSource {
    #[default]
    Test,
    Train,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldEntry {
    pub label: String,
    pub token_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldDistribution {
    pub schema_version: u32,
    pub task: String,
    pub layer: usize,
    /// `None` for points of classes whose centroid gap was not positive.
    pub normalized_fields: Vec<Option<f64>>,
    pub raw_fields: Vec<f64>,
    /// Point behind each field, sorted by label then token index.
    pub entries: Vec<FieldEntry>,
    /// Number of measured test positives per class.
    pub per_class_counts: BTreeMap<String, usize>,
    pub split: Split,
    pub tpr: f64,
    pub c_param: f64,
    pub seed: u64,
    pub centroid_source: CentroidSource,
    pub excluded_classes: Vec<String>,
}

impl FieldDistribution {
    /// Normalized fields of the classes that were not excluded.
    pub fn normalized_pool(&self) -> Vec<f64> {
        self.normalized_fields.iter().flatten().copied().collect()
    }
}

/// Fraction of fields strictly above zero.
pub fn tpr(fields: &[f64]) -> Result<f64> {
    if fields.is_empty() {
        return Err(Error::Validation("no fields to score".into()));
    }
    Ok(fields.iter().filter(|&&f| f > 0.0).count() as f64 / fields.len() as f64)
}

/// Field normalized by the centroid gap `f(c+) - f(c-)`.
pub fn normalize_field(raw: f64, positive_centroid_field: f64, negative_centroid_field: f64) -> Option<f64> {
    let gap = positive_centroid_field - negative_centroid_field;
    (gap > 0.0).then(|| raw / gap)
}

struct ClassSplit {
    train: Vec<usize>,
    test: Vec<usize>,
}

fn stratify(ms: &ManifoldSet, split: Split, seed: u64) -> Result<Vec<ClassSplit>> {
    ms.manifolds()
        .iter()
        .map(|m| {
            if m.len() < 2 {
                return Err(Error::Validation(format!(
                    "class `{}` has {} point(s); a train and a test point are needed",
                    m.label,
                    m.len()
                )));
            }
            let (n_train, n_test) = split.counts(m.len());
            let mut order: Vec<usize> = (0..m.len()).collect();
            order.shuffle(&mut rng::stream(seed, &[0x5E1, rng::hash_str(&m.label)]));
            let mut test = order[n_train..n_train + n_test].to_vec();
            let mut train = order[..n_train].to_vec();
            train.sort_unstable();
            test.sort_unstable();
            Ok(ClassSplit { train, test })
        })
        .collect()
}

fn mean_column(cols: &[DVector<f64>]) -> DVector<f64> {
    let mut acc = DVector::zeros(cols[0].len());
    for c in cols {
        acc += c;
    }
    acc / cols.len() as f64
}

/// One-vs-rest fields with centroids taken from the test split.
pub fn fields_one_vs_rest(ms: &ManifoldSet, split: Split, c_param: f64, seed: u64) -> Result<FieldDistribution> {
    fields_one_vs_rest_with(ms, split, c_param, seed, CentroidSource::Test)
}

pub fn fields_one_vs_rest_with(
    ms: &ManifoldSet,
    split: Split,
    c_param: f64,
    seed: u64,
    centroid_source: CentroidSource,
) -> Result<FieldDistribution> {
    split.validate()?;
    let splits = stratify(ms, split, seed)?;
    let manifolds = ms.manifolds();
    let dim = ms.ambient_dim();

    // shared training matrix and Gram matrix
    let mut owner = Vec::new();
    let mut cols = Vec::new();
    for (p, (m, s)) in manifolds.iter().zip(&splits).enumerate() {
        for &j in &s.train {
            owner.push(p);
            cols.push(m.points.column(j).into_owned());
        }
    }
    let x_train = DMatrix::from_columns(&cols);
    let gram = x_train.tr_mul(&x_train);

    let centroid_of = |p: usize, positive: bool| -> DVector<f64> {
        let pick: Vec<DVector<f64>> = manifolds
            .iter()
            .zip(&splits)
            .enumerate()
            .filter(|(q, _)| (*q == p) == positive)
            .flat_map(|(_, (m, s))| {
                let idx = match centroid_source {
                    CentroidSource::Test => &s.test,
                    CentroidSource::Train => &s.train,
                };
                idx.iter().map(move |&j| m.points.column(j).into_owned())
            })
            .collect();
        mean_column(&pick)
    };

    struct ClassFields {
        label: String,
        tokens: Vec<usize>,
        raw: Vec<f64>,
        normalized: Vec<Option<f64>>,
        excluded: bool,
    }

    let per_class: Vec<ClassFields> = (0..manifolds.len())
        .into_par_iter()
        .map(|p| {
            let m = &manifolds[p];
            let y: Vec<f64> = owner.iter().map(|&o| if o == p { 1.0 } else { -1.0 }).collect();
            let fit = fit_with_gram(&x_train, &gram, &y, c_param, rng::derive_seed(seed, &[p as u64]))
                .map_err(|e| Error::in_manifold(&m.label, e))?;
            let norm = fit.weights.norm();
            if !(norm > 0.0) {
                return Err(Error::in_manifold(
                    &m.label,
                    Error::Numerical("SVM weight vector is zero".into()),
                ));
            }
            debug_assert_eq!(fit.weights.len(), dim);
            let field = |x: &DVector<f64>| (fit.weights.dot(x) + fit.bias) / norm;
            let f_pos = field(&centroid_of(p, true));
            let f_neg = field(&centroid_of(p, false));
            let excluded = f_pos - f_neg <= 0.0;
            if excluded {
                warn!(
                    "class `{}`: centroid field gap {:.3e} is not positive, excluded from the normalized pool",
                    m.label,
                    f_pos - f_neg
                );
            }
            let tokens: Vec<usize> = splits[p].test.iter().map(|&j| m.token_indices[j]).collect();
            let raw: Vec<f64> = splits[p]
                .test
                .iter()
                .map(|&j| field(&m.points.column(j).into_owned()))
                .collect();
            let normalized = raw.iter().map(|&r| normalize_field(r, f_pos, f_neg)).collect();
            Ok(ClassFields {
                label: m.label.clone(),
                tokens,
                raw,
                normalized,
                excluded,
            })
        })
        .collect::<Result<_>>()?;

    let mut rows: Vec<(FieldEntry, f64, Option<f64>)> = Vec::new();
    let mut per_class_counts = BTreeMap::new();
    let mut excluded_classes = Vec::new();
    for c in per_class {
        per_class_counts.insert(c.label.clone(), c.raw.len());
        if c.excluded {
            excluded_classes.push(c.label.clone());
        }
        for ((t, r), n) in c.tokens.into_iter().zip(c.raw).zip(c.normalized) {
            rows.push((
                FieldEntry {
                    label: c.label.clone(),
                    token_index: t,
                },
                r,
                n,
            ));
        }
    }
    rows.sort_by(|a, b| {
        a.0.label
            .cmp(&b.0.label)
            .then(a.0.token_index.cmp(&b.0.token_index))
    });
    excluded_classes.sort();

    let raw_fields: Vec<f64> = rows.iter().map(|r| r.1).collect();
    Ok(FieldDistribution {
        schema_version: SCHEMA_VERSION,
        task: ms.task.clone(),
        layer: ms.layer,
        tpr: tpr(&raw_fields)?,
        normalized_fields: rows.iter().map(|r| r.2).collect(),
        entries: rows.into_iter().map(|r| r.0).collect(),
        raw_fields,
        per_class_counts,
        split,
        c_param,
        seed,
        centroid_source,
        excluded_classes,
    })
}
