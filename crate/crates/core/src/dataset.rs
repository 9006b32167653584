//! Feature containers, labelled manifold sets and reproducible sampling.
//!
//! A feature container is a directory holding `manifest.json` plus one raw
//! little-endian `f32` file (or CSV file) per layer. Rows are tokens, columns
//! are feature dimensions.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub text: String,
    pub sentence: usize,
    pub position: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    num_tokens: usize,
    dim: usize,
    num_layers: usize,
    dtype: String,
    #[serde(default)]
    layer_files: Vec<String>,
    tokens: Vec<TokenRecord>,
    #[serde(default)]
    labels: BTreeMap<String, Vec<Option<String>>>,
}

/// Per-layer token features plus per-task token labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LayeredFeatureSet {
    tokens: Vec<TokenRecord>,
    dim: usize,
    /// One row-major `num_tokens x dim` buffer per layer.
    layers: Vec<Vec<f32>>,
    label_maps: BTreeMap<String, Vec<Option<String>>>,
}

impl LayeredFeatureSet {
    pub fn new(
        tokens: Vec<TokenRecord>,
        dim: usize,
        layers: Vec<Vec<f32>>,
        label_maps: BTreeMap<String, Vec<Option<String>>>,
    ) -> Result<Self> {
        let n = tokens.len();
        if n == 0 || dim == 0 {
            return Err(Error::Validation(format!(
                "feature set needs tokens and dimensions (got {n} tokens, dim {dim})"
            )));
        }
        if layers.is_empty() {
            return Err(Error::Validation("feature set has no layers".into()));
        }
        for (k, layer) in layers.iter().enumerate() {
            if layer.len() != n * dim {
                return Err(Error::Corruption(format!(
                    "layer {k} holds {} values, expected {n} x {dim}",
                    layer.len()
                )));
            }
        }
        for (task, labels) in &label_maps {
            if labels.len() != n {
                return Err(Error::Validation(format!(
                    "label map `{task}` has {} entries for {n} tokens",
                    labels.len()
                )));
            }
        }
        Ok(Self {
            tokens,
            dim,
            layers,
            label_maps,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.tokens.len()
    }

    pub fn ambient_dim(&self) -> usize {
        self.dim
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn tokens(&self) -> &[TokenRecord] {
        &self.tokens
    }

    pub fn tasks(&self) -> impl Iterator<Item = &str> {
        self.label_maps.keys().map(String::as_str)
    }

    pub fn labels(&self, task: &str) -> Option<&[Option<String>]> {
        self.label_maps.get(task).map(Vec::as_slice)
    }

    pub fn layer(&self, layer: usize) -> &[f32] {
        &self.layers[layer]
    }

    /// Feature vector of `token` at `layer`.
    pub fn row(&self, layer: usize, token: usize) -> &[f32] {
        &self.layers[layer][token * self.dim..(token + 1) * self.dim]
    }

    /// Gathers the given tokens of one layer as columns of an `f64` matrix.
    pub fn gather(&self, layer: usize, token_indices: &[usize]) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.dim, token_indices.len());
        for (j, &t) in token_indices.iter().enumerate() {
            for (i, &v) in self.row(layer, t).iter().enumerate() {
                out[(i, j)] = v as f64;
            }
        }
        out
    }

    /// Distinct labels of `task` in sorted order.
    pub fn distinct_labels(&self, task: &str) -> Result<Vec<String>> {
        let labels = self
            .labels(task)
            .ok_or_else(|| Error::UnknownTask(task.to_string()))?;
        let set: std::collections::BTreeSet<&String> = labels.iter().flatten().collect();
        Ok(set.into_iter().cloned().collect())
    }
}

fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Format(format!("missing {}", path.display()))
        } else {
            Error::io(&path, e)
        }
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// Loads a feature container directory.
pub fn load_feature_container(dir: impl AsRef<Path>) -> Result<LayeredFeatureSet> {
    let dir = dir.as_ref();
    let manifest = read_manifest(dir)?;
    if manifest.version != CONTAINER_VERSION {
        return Err(Error::UnsupportedFormat(format!(
            "container version {} (expected {CONTAINER_VERSION})",
            manifest.version
        )));
    }
    if manifest.tokens.len() != manifest.num_tokens {
        return Err(Error::Corruption(format!(
            "manifest lists {} tokens but declares num_tokens = {}",
            manifest.tokens.len(),
            manifest.num_tokens
        )));
    }
    let files: Vec<String> = if manifest.layer_files.is_empty() && manifest.dtype == "csv" {
        (0..manifest.num_layers)
            .map(|k| format!("layer_{k}.csv"))
            .collect()
    } else {
        manifest.layer_files.clone()
    };
    if files.len() != manifest.num_layers {
        return Err(Error::Corruption(format!(
            "manifest declares {} layers but lists {} layer files",
            manifest.num_layers,
            files.len()
        )));
    }
    let expected = manifest.num_tokens * manifest.dim;
    let layers = files
        .iter()
        .map(|f| {
            let path = dir.join(f);
            match manifest.dtype.as_str() {
                "f32le" => read_f32le(&path, expected),
                "csv" => read_csv_layer(&path, manifest.num_tokens, manifest.dim),
                other => Err(Error::UnsupportedFormat(format!("dtype `{other}`"))),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    LayeredFeatureSet::new(manifest.tokens, manifest.dim, layers, manifest.labels)
}

fn read_f32le(path: &Path, expected: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected * 4 {
        return Err(Error::Corruption(format!(
            "{} holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            expected * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn read_csv_layer(path: &Path, rows: usize, dim: usize) -> Result<Vec<f32>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut out = Vec::with_capacity(rows * dim);
    let mut count = 0;
    for record in reader.records() {
        let record = record.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if record.len() != dim {
            return Err(Error::Corruption(format!(
                "{} row {count} has {} columns, expected {dim}",
                path.display(),
                record.len()
            )));
        }
        for field in record.iter() {
            let v: f32 = field.trim().parse().map_err(|_| {
                Error::Format(format!("{} row {count}: bad value `{field}`", path.display()))
            })?;
            out.push(v);
        }
        count += 1;
    }
    if count != rows {
        return Err(Error::Corruption(format!(
            "{} has {count} rows, expected {rows}",
            path.display()
        )));
    }
    Ok(out)
}

/// Writes `fs` as an `f32le` container. Existing files in `dir` are overwritten.
pub fn write_feature_container(fs_set: &LayeredFeatureSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let layer_files: Vec<String> = (0..fs_set.layer_count())
        .map(|k| format!("layer_{k}.bin"))
        .collect();
    for (k, file) in layer_files.iter().enumerate() {
        let bytes: Vec<u8> = fs_set.layers[k]
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect();
        let path = dir.join(file);
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    let manifest = Manifest {
        version: CONTAINER_VERSION,
        num_tokens: fs_set.num_tokens(),
        dim: fs_set.dim,
        num_layers: fs_set.layer_count(),
        dtype: "f32le".into(),
        layer_files,
        tokens: fs_set.tokens.clone(),
        labels: fs_set.label_maps.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// All points sharing one label. Points are the columns of `points`.
#[derive(Debug, Clone, PartialEq)]
pub struct Manifold {
    pub label: String,
    pub token_indices: Vec<usize>,
    pub points: DMatrix<f64>,
}

impl Manifold {
    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.points.ncols() == 0
    }
}

/// `P` labelled manifolds in a shared `N`-dimensional space (one layer, one task).
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldSet {
    pub task: String,
    pub layer: usize,
    pub seed: u64,
    manifolds: Vec<Manifold>,
}

impl ManifoldSet {
    pub fn new(task: impl Into<String>, layer: usize, manifolds: Vec<Manifold>, seed: u64) -> Result<Self> {
        if manifolds.len() < 2 {
            return Err(Error::Validation(format!(
                "a manifold set needs at least 2 manifolds, got {}",
                manifolds.len()
            )));
        }
        let dim = manifolds[0].points.nrows();
        if dim == 0 {
            return Err(Error::Validation("points have zero dimension".into()));
        }
        for m in &manifolds {
            if m.is_empty() {
                return Err(Error::Validation(format!("manifold `{}` is empty", m.label)));
            }
            if m.points.nrows() != dim {
                return Err(Error::Validation(format!(
                    "manifold `{}` has dimension {}, expected {dim}",
                    m.label,
                    m.points.nrows()
                )));
            }
            if m.token_indices.len() != m.len() {
                return Err(Error::Validation(format!(
                    "manifold `{}` has {} token indices for {} points",
                    m.label,
                    m.token_indices.len(),
                    m.len()
                )));
            }
            let mut seen = HashSet::with_capacity(m.len());
            if !m.token_indices.iter().all(|t| seen.insert(*t)) {
                return Err(Error::Validation(format!(
                    "manifold `{}` repeats a token index",
                    m.label
                )));
            }
            if m.points.iter().any(|v| !v.is_finite()) {
                return Err(Error::Validation(format!(
                    "manifold `{}` has non-finite coordinates",
                    m.label
                )));
            }
        }
        Ok(Self {
            task: task.into(),
            layer,
            seed,
            manifolds,
        })
    }

    /// Builds a set from bare point matrices; token indices are assigned
    /// consecutively across manifolds.
    pub fn from_points(task: impl Into<String>, groups: Vec<(String, DMatrix<f64>)>) -> Result<Self> {
        let mut next = 0;
        let manifolds = groups
            .into_iter()
            .map(|(label, points)| {
                let token_indices = (next..next + points.ncols()).collect();
                next += points.ncols();
                Manifold {
                    label,
                    token_indices,
                    points,
                }
            })
            .collect();
        Self::new(task, 0, manifolds, 0)
    }

    pub fn manifolds(&self) -> &[Manifold] {
        &self.manifolds
    }

    pub fn num_manifolds(&self) -> usize {
        self.manifolds.len()
    }

    pub fn ambient_dim(&self) -> usize {
        self.manifolds[0].points.nrows()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.manifolds.iter().map(Manifold::len).collect()
    }

    pub fn total_points(&self) -> usize {
        self.manifolds.iter().map(Manifold::len).sum()
    }

    /// Applies `f` to every manifold's point matrix, keeping labels and tokens.
    pub fn map_points(&self, mut f: impl FnMut(&DMatrix<f64>) -> DMatrix<f64>) -> Result<Self> {
        let manifolds = self
            .manifolds
            .iter()
            .map(|m| Manifold {
                label: m.label.clone(),
                token_indices: m.token_indices.clone(),
                points: f(&m.points),
            })
            .collect();
        Self::new(self.task.clone(), self.layer, manifolds, self.seed)
    }

    /// Keeps at most `max_points` per manifold, chosen without replacement
    /// from a stream keyed by `seed` and the manifold position.
    pub fn subsample(&self, max_points: usize, seed: u64) -> Self {
        let manifolds = self
            .manifolds
            .iter()
            .enumerate()
            .map(|(mu, m)| {
                if m.len() <= max_points {
                    return m.clone();
                }
                let mut rng = rng::stream(seed, &[0x5eb5, mu as u64]);
                let mut picked = rand::seq::index::sample(&mut rng, m.len(), max_points).into_vec();
                picked.sort_unstable();
                Manifold {
                    label: m.label.clone(),
                    token_indices: picked.iter().map(|&i| m.token_indices[i]).collect(),
                    points: m.points.select_columns(picked.iter()),
                }
            })
            .collect();
        Self {
            task: self.task.clone(),
            layer: self.layer,
            seed: self.seed,
            manifolds,
        }
    }
}

/// How many instances to draw per tag, and how often.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPolicy {
    pub instances_per_tag: usize,
    pub repetitions: usize,
    pub tag_list: Vec<String>,
    pub seed: u64,
}

impl SamplingPolicy {
    pub const DEFAULT_INSTANCES: usize = 50;
    pub const DEFAULT_REPETITIONS: usize = 5;

    pub fn new(tag_list: Vec<String>, seed: u64) -> Self {
        Self {
            instances_per_tag: Self::DEFAULT_INSTANCES,
            repetitions: Self::DEFAULT_REPETITIONS,
            tag_list,
            seed,
        }
    }

    /// Policy over every label present for `task`, in sorted order.
    pub fn all_tags(fs: &LayeredFeatureSet, task: &str, seed: u64) -> Result<Self> {
        Ok(Self::new(fs.distinct_labels(task)?, seed))
    }

    pub fn validate(&self) -> Result<()> {
        if self.instances_per_tag == 0 {
            return Err(Error::Validation("instances_per_tag must be >= 1".into()));
        }
        if self.repetitions == 0 {
            return Err(Error::Validation("repetitions must be >= 1".into()));
        }
        if self.tag_list.is_empty() {
            return Err(Error::Validation("tag list is empty".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.tag_list.iter().find(|t| !seen.insert(t.as_str())) {
            return Err(Error::Validation(format!("tag `{dup}` listed twice")));
        }
        Ok(())
    }
}

/// Chooses token indices per tag for one repetition.
///
/// The choice depends only on `(policy.seed, task, tag, repetition)`, never on
/// the layer, so every layer sees the same tokens. Tags without instances are
/// dropped.
pub fn select_tokens(
    fs: &LayeredFeatureSet,
    task: &str,
    policy: &SamplingPolicy,
    repetition: usize,
) -> Result<Vec<(String, Vec<usize>)>> {
    policy.validate()?;
    if repetition >= policy.repetitions {
        return Err(Error::Validation(format!(
            "repetition {repetition} out of range (policy has {})",
            policy.repetitions
        )));
    }
    let labels = fs
        .labels(task)
        .ok_or_else(|| Error::UnknownTask(task.to_string()))?;
    let mut by_tag: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        if let Some(l) = l {
            by_tag.entry(l.as_str()).or_default().push(i);
        }
    }
    let mut out = Vec::with_capacity(policy.tag_list.len());
    for tag in &policy.tag_list {
        let Some(available) = by_tag.get(tag.as_str()) else {
            warn!("task `{task}`: tag `{tag}` has no instances, dropped");
            continue;
        };
        let k = policy.instances_per_tag.min(available.len());
        let mut rng = rng::stream(
            policy.seed,
            &[rng::hash_str(task), rng::hash_str(tag), repetition as u64],
        );
        let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, available.len(), k)
            .into_iter()
            .map(|i| available[i])
            .collect();
        picked.sort_unstable();
        out.push((tag.clone(), picked));
    }
    if out.len() < 2 {
        return Err(Error::InsufficientClasses {
            task: task.to_string(),
            found: out.len(),
        });
    }
    Ok(out)
}

/// Assembles the manifold set of `task` at `layer` for one repetition.
pub fn build_manifold_set(
    fs: &LayeredFeatureSet,
    task: &str,
    layer: usize,
    policy: &SamplingPolicy,
    repetition: usize,
) -> Result<ManifoldSet> {
    if layer >= fs.layer_count() {
        return Err(Error::Validation(format!(
            "layer {layer} out of range (container has {})",
            fs.layer_count()
        )));
    }
    let selection = select_tokens(fs, task, policy, repetition)?;
    manifolds_from_selection(fs, task, layer, &selection, policy.seed)
}

/// Slices one layer according to a token selection from [`select_tokens`].
pub fn manifolds_from_selection(
    fs: &LayeredFeatureSet,
    task: &str,
    layer: usize,
    selection: &[(String, Vec<usize>)],
    seed: u64,
) -> Result<ManifoldSet> {
    let manifolds = selection
        .iter()
        .map(|(tag, tokens)| Manifold {
            label: tag.clone(),
            token_indices: tokens.clone(),
            points: fs.gather(layer, tokens),
        })
        .collect();
    ManifoldSet::new(task, layer, manifolds, seed)
}

/// Pools all points and redistributes them at random into manifolds of the
/// original sizes (labels stay in their original order).
pub fn shuffle_labels(ms: &ManifoldSet, seed: u64) -> ManifoldSet {
    let mut pool: Vec<(usize, usize)> = ms
        .manifolds
        .iter()
        .enumerate()
        .flat_map(|(mu, m)| (0..m.len()).map(move |j| (mu, j)))
        .collect();
    let mut rng = rng::stream(seed, &[0x5_4u64]);
    pool.shuffle(&mut rng);
    let dim = ms.ambient_dim();
    let mut next = pool.into_iter();
    let manifolds = ms
        .manifolds
        .iter()
        .map(|m| {
            let picks: Vec<(usize, usize)> = next.by_ref().take(m.len()).collect();
            let mut points = DMatrix::zeros(dim, picks.len());
            let mut token_indices = Vec::with_capacity(picks.len());
            for (c, &(mu, j)) in picks.iter().enumerate() {
                points.set_column(c, &ms.manifolds[mu].points.column(j));
                token_indices.push(ms.manifolds[mu].token_indices[j]);
            }
            Manifold {
                label: m.label.clone(),
                token_indices,
                points,
            }
        })
        .collect();
    ManifoldSet {
        task: ms.task.clone(),
        layer: ms.layer,
        seed,
        manifolds,
    }
}
