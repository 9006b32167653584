//! Batch analysis driven by a TOML or JSON configuration.
//!
//! Every `(task, layer, repetition)` job writes its reports as `*.partial`
//! files. Once all jobs succeed the files are promoted to their final names
//! and the trajectories are written. On failure the partial files stay in
//! place next to an `error.json` describing what went wrong.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_feature_container, manifolds_from_selection, select_tokens, LayeredFeatureSet, SamplingPolicy};
use crate::error::{Error, Result};
use crate::fields::{fields_one_vs_rest_with, CentroidSource, FieldDistribution, Split};
use crate::mft::{mftma, MftConfig, MftReport};
use crate::report::{default_normalization_layer, layer_trajectory, Metric, TrajectoryReport};
use crate::rng;
use crate::sim::{simulation_capacity, SimCapacityResult, SimConfig};
use crate::SCHEMA_VERSION;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Sim,
    Mft,
    Svm,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::Sim => "sim",
            Engine::Mft => "mft",
            Engine::Svm => "svm",
        }
    }

    pub fn metrics(self) -> &'static [Metric] {
        match self {
            Engine::Sim => &[Metric::AlphaSim],
            Engine::Mft => &[Metric::Capacity, Metric::Radius, Metric::Dimension, Metric::RhoCenter],
            Engine::Svm => &[Metric::Tpr],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmSettings {
    /// Train/test percentages, e.g. `"80/20"`.
    pub split: String,
    pub c_param: f64,
    pub centroid_source: CentroidSource,
}

impl Default for SvmSettings {
    fn default() -> Self {
        Self {
            split: "80/20".into(),
            c_param: 1.0,
            centroid_source: CentroidSource::Test,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub container: PathBuf,
    pub tasks: Vec<String>,
    /// All container layers when absent.
    #[serde(default)]
    pub layers: Option<Vec<usize>>,
    pub engines: Vec<Engine>,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_repetitions")]
    pub repetitions: usize,
    #[serde(default = "default_instances")]
    pub instances_per_tag: usize,
    /// Per task, a plain-text file with one tag per line. All tags otherwise.
    #[serde(default)]
    pub tag_files: BTreeMap<String, PathBuf>,
    /// Named label subsets (one label per line) whose aggregated capacity is
    /// reported as extra trajectories.
    #[serde(default)]
    pub label_subsets: BTreeMap<String, PathBuf>,
    #[serde(default)]
    pub normalization_layer: Option<usize>,
    #[serde(default)]
    pub sim: SimConfig,
    #[serde(default)]
    pub mft: MftConfig,
    #[serde(default)]
    pub svm: SvmSettings,
}

fn default_repetitions() -> usize {
    SamplingPolicy::DEFAULT_REPETITIONS
}

fn default_instances() -> usize {
    SamplingPolicy::DEFAULT_INSTANCES
}

impl RunConfig {
    /// Reads a `.toml` or `.json` config. Relative paths inside it are taken
    /// relative to the config file.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?,
            _ => toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?,
        };
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.container);
        resolve(&mut cfg.output_dir);
        cfg.tag_files.values_mut().for_each(resolve);
        cfg.label_subsets.values_mut().for_each(resolve);
        Ok(cfg)
    }

    pub fn validate(&self, fs_set: &LayeredFeatureSet) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Validation("no tasks configured".into()));
        }
        if self.engines.is_empty() {
            return Err(Error::Validation("no engines configured".into()));
        }
        for t in &self.tasks {
            if fs_set.labels(t).is_none() {
                return Err(Error::UnknownTask(t.clone()));
            }
        }
        let layers = self.resolved_layers(fs_set);
        if layers.is_empty() {
            return Err(Error::Validation("no layers configured".into()));
        }
        if let Some(&bad) = layers.iter().find(|&&l| l >= fs_set.layer_count()) {
            return Err(Error::Validation(format!(
                "layer {bad} out of range (container has {})",
                fs_set.layer_count()
            )));
        }
        if let Some(n) = self.normalization_layer {
            if !layers.contains(&n) {
                return Err(Error::Validation(format!("normalization layer {n} is not among the analysed layers")));
            }
        }
        self.sim.validate()?;
        self.mft.validate()?;
        self.svm.split.parse::<Split>()?;
        if !(self.svm.c_param > 0.0 && self.svm.c_param.is_finite()) {
            return Err(Error::Validation(format!("svm c_param must be positive, got {}", self.svm.c_param)));
        }
        Ok(())
    }

    fn resolved_layers(&self, fs_set: &LayeredFeatureSet) -> Vec<usize> {
        let mut layers = self
            .layers
            .clone()
            .unwrap_or_else(|| (0..fs_set.layer_count()).collect());
        layers.sort_unstable();
        layers.dedup();
        layers
    }
}

/// Reads a plain-text list: one entry per line, blank lines and `#` comments skipped.
pub fn read_list_file(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// Simulation result with the context it was computed in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub schema_version: u32,
    pub task: String,
    pub layer: usize,
    pub repetition: usize,
    #[serde(flatten)]
    pub result: SimCapacityResult,
    pub config: SimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub schema_version: u32,
    pub error: String,
    pub causes: Vec<String>,
    pub job: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema_version: u32,
    /// Output files relative to the output directory, sorted.
    pub files: Vec<String>,
}

/// Writes `bytes` to `path` through a temporary file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Error::Format(format!("json: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

struct Job {
    task: String,
    layer: usize,
    repetition: usize,
    selection: Vec<(String, Vec<usize>)>,
}

impl Job {
    fn name(&self) -> String {
        format!("{}_layer{}_rep{}", self.task, self.layer, self.repetition)
    }
}

#[derive(Default)]
struct JobOutput {
    mft: Option<MftReport>,
    sim: Option<SimReport>,
    svm: Option<FieldDistribution>,
    files: Vec<PathBuf>,
}

struct Runner<'a> {
    cfg: &'a RunConfig,
    fs_set: &'a LayeredFeatureSet,
    split: Split,
}

impl Runner<'_> {
    fn partial_path(&self, engine: Engine, job: &Job) -> PathBuf {
        self.cfg
            .output_dir
            .join(engine.name())
            .join(format!("{}.json.partial", job.name()))
    }

    fn run_job(&self, job: &Job) -> Result<JobOutput> {
        let cfg = self.cfg;
        // seeds are shared by all layers of a repetition
        let seed = rng::derive_seed(cfg.seed, &[rng::hash_str(&job.task), job.repetition as u64]);
        let ms = manifolds_from_selection(self.fs_set, &job.task, job.layer, &job.selection, seed)?;
        let mut out = JobOutput::default();
        for &engine in &cfg.engines {
            let path = self.partial_path(engine, job);
            let bytes = match engine {
                Engine::Mft => {
                    let r = mftma(&ms, &MftConfig { seed, ..cfg.mft.clone() })?;
                    let b = to_json_bytes(&r)?;
                    out.mft = Some(r);
                    b
                }
                Engine::Sim => {
                    let sim_cfg = SimConfig { seed, ..cfg.sim.clone() };
                    let result = simulation_capacity(&ms, &sim_cfg)?;
                    if !result.converged {
                        warn!("{}: simulation capacity did not converge", job.name());
                    }
                    let r = SimReport {
                        schema_version: SCHEMA_VERSION,
                        task: job.task.clone(),
                        layer: job.layer,
                        repetition: job.repetition,
                        result,
                        config: sim_cfg,
                    };
                    let b = to_json_bytes(&r)?;
                    out.sim = Some(r);
                    b
                }
                Engine::Svm => {
                    let r = fields_one_vs_rest_with(&ms, self.split, cfg.svm.c_param, seed, cfg.svm.centroid_source)?;
                    let b = to_json_bytes(&r)?;
                    out.svm = Some(r);
                    b
                }
            };
            write_atomic(&path, &bytes)?;
            out.files.push(path);
        }
        info!("finished {}", job.name());
        Ok(out)
    }
}

fn strip_partial(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    PathBuf::from(s.strip_suffix(".partial").unwrap_or(&s).to_string())
}

fn error_chain(e: &Error) -> Vec<String> {
    let mut causes = Vec::new();
    let mut cur: Option<&dyn std::error::Error> = std::error::Error::source(e);
    while let Some(c) = cur {
        causes.push(c.to_string());
        cur = c.source();
    }
    causes
}

/// Executes a full run. On error an `error.json` is written to the output
/// directory and partial outputs are left with a `.partial` suffix.
pub fn run(cfg: &RunConfig) -> Result<RunSummary> {
    let outcome = run_inner(cfg);
    if let Err((e, job)) = &outcome {
        let report = ErrorReport {
            schema_version: SCHEMA_VERSION,
            error: e.to_string(),
            causes: error_chain(e),
            job: job.clone(),
        };
        if let Ok(bytes) = to_json_bytes(&report) {
            if let Err(w) = write_atomic(&cfg.output_dir.join("error.json"), &bytes) {
                warn!("could not write error report: {w}");
            }
        }
    }
    outcome.map_err(|(e, _)| e)
}

fn run_inner(cfg: &RunConfig) -> Result<RunSummary, (Error, Option<String>)> {
    let plain = |e: Error| (e, None);
    let fs_set = load_feature_container(&cfg.container).map_err(plain)?;
    cfg.validate(&fs_set).map_err(plain)?;
    let layers = cfg.resolved_layers(&fs_set);
    let split: Split = cfg.svm.split.parse().map_err(plain)?;
    fs::create_dir_all(&cfg.output_dir).map_err(|e| plain(Error::io(&cfg.output_dir, e)))?;
    let stale = cfg.output_dir.join("error.json");
    if stale.exists() {
        fs::remove_file(&stale).map_err(|e| plain(Error::io(&stale, e)))?;
    }

    let mut subsets = BTreeMap::new();
    for (name, path) in &cfg.label_subsets {
        subsets.insert(name.clone(), read_list_file(path).map_err(plain)?);
    }

    let mut jobs = Vec::new();
    for task in &cfg.tasks {
        let tags = match cfg.tag_files.get(task) {
            Some(p) => read_list_file(p).map_err(plain)?,
            None => fs_set.distinct_labels(task).map_err(plain)?,
        };
        let policy = SamplingPolicy {
            instances_per_tag: cfg.instances_per_tag,
            repetitions: cfg.repetitions,
            tag_list: tags,
            seed: cfg.seed,
        };
        for rep in 0..cfg.repetitions {
            let selection = select_tokens(&fs_set, task, &policy, rep).map_err(plain)?;
            for &layer in &layers {
                jobs.push(Job {
                    task: task.clone(),
                    layer,
                    repetition: rep,
                    selection: selection.clone(),
                });
            }
        }
    }

    let runner = Runner {
        cfg,
        fs_set: &fs_set,
        split,
    };
    let outputs: Vec<JobOutput> = jobs
        .par_iter()
        .map(|job| runner.run_job(job).map_err(|e| (e, Some(job.name()))))
        .collect::<Result<_, _>>()?;

    let mut files = Vec::new();
    for out in &outputs {
        for p in &out.files {
            let dest = strip_partial(p);
            fs::rename(p, &dest).map_err(|e| plain(Error::io(&dest, e)))?;
            files.push(dest);
        }
    }

    for task in &cfg.tasks {
        let task_outputs: Vec<(&Job, &JobOutput)> = jobs
            .iter()
            .zip(&outputs)
            .filter(|(j, _)| &j.task == task)
            .collect();
        for &engine in &cfg.engines {
            let norm_layer = cfg
                .normalization_layer
                .unwrap_or_else(|| default_normalization_layer(engine.metrics()[0], &layers));
            for &metric in engine.metrics() {
                let values = collect_metric(&task_outputs, &layers, |o| metric_value(o, metric));
                let traj = layer_trajectory(task, metric, &values, norm_layer, fs_set.layer_count()).map_err(plain)?;
                files.extend(write_trajectory(cfg, &traj, &format!("{task}_{metric}")).map_err(plain)?);
            }
            if engine == Engine::Mft {
                for (name, labels) in &subsets {
                    let values = collect_metric(&task_outputs, &layers, |o| {
                        o.mft.as_ref().and_then(|r| match r.subset_capacity(labels) {
                            Ok(v) => Some(v),
                            Err(e) => {
                                warn!("subset `{name}` at layer {}: {e}", r.layer);
                                None
                            }
                        })
                    });
                    if values.iter().any(|(_, v)| v.is_empty()) {
                        warn!("subset `{name}` has no manifolds in task `{task}`, skipped");
                        continue;
                    }
                    let mut traj = layer_trajectory(task, Metric::Capacity, &values, norm_layer, fs_set.layer_count())
                        .map_err(plain)?;
                    traj.subset = Some(name.clone());
                    files.extend(write_trajectory(cfg, &traj, &format!("{task}_capacity_{name}")).map_err(plain)?);
                }
            }
        }
    }

    let mut rel: Vec<String> = files
        .iter()
        .map(|p| {
            p.strip_prefix(&cfg.output_dir)
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/")
        })
        .collect();
    rel.sort();
    let summary = RunSummary {
        schema_version: SCHEMA_VERSION,
        files: rel,
    };
    write_atomic(&cfg.output_dir.join("summary.json"), &to_json_bytes(&summary).map_err(plain)?).map_err(plain)?;
    Ok(summary)
}

fn metric_value(o: &JobOutput, metric: Metric) -> Option<f64> {
    match metric {
        Metric::Capacity => o.mft.as_ref().map(|r| r.alpha_m),
        Metric::Radius => o.mft.as_ref().map(|r| r.mean_radius),
        Metric::Dimension => o.mft.as_ref().map(|r| r.mean_dimension),
        Metric::RhoCenter => o.mft.as_ref().map(|r| r.rho_center),
        Metric::AlphaSim => o.sim.as_ref().map(|r| r.result.alpha_sim),
        Metric::Tpr => o.svm.as_ref().map(|r| r.tpr),
    }
}

/// Per-layer values in repetition order.
fn collect_metric(
    outputs: &[(&Job, &JobOutput)],
    layers: &[usize],
    f: impl Fn(&JobOutput) -> Option<f64>,
) -> Vec<(usize, Vec<f64>)> {
    layers
        .iter()
        .map(|&l| {
            let mut reps: Vec<(usize, f64)> = outputs
                .iter()
                .filter(|(j, _)| j.layer == l)
                .filter_map(|(j, o)| f(o).map(|v| (j.repetition, v)))
                .collect();
            reps.sort_by_key(|r| r.0);
            (l, reps.into_iter().map(|r| r.1).collect())
        })
        .collect()
}

fn write_trajectory(cfg: &RunConfig, traj: &TrajectoryReport, stem: &str) -> Result<Vec<PathBuf>> {
    let dir = cfg.output_dir.join("trajectories");
    let json = dir.join(format!("{stem}.json"));
    write_atomic(&json, &to_json_bytes(traj)?)?;
    let mut csv_bytes = Vec::new();
    traj.write_csv(&mut csv_bytes)?;
    let csv = dir.join(format!("{stem}.csv"));
    write_atomic(&csv, &csv_bytes)?;
    Ok(vec![json, csv])
}
