use std::collections::BTreeMap;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{error, warn};
use serde_json::{json, Value};

use mg_core::dataset::{build_manifold_set, load_feature_container, SamplingPolicy};
use mg_core::fields::{fields_one_vs_rest_with, CentroidSource, Split};
use mg_core::geometry::global_pca;
use mg_core::mft::mftma;
use mg_core::report::{correlate, default_normalization_layer, histogram, layer_trajectory, write_histogram_csv, Metric};
use mg_core::run::{read_list_file, run, RunConfig, SimReport};
use mg_core::sim::simulation_capacity;
use mg_core::{LayeredFeatureSet, ManifoldSet, MftConfig, SimConfig, SCHEMA_VERSION};

#[derive(Parser)]
#[command(name = "mg", version, about = "Capacity and geometry of class manifolds in layered representations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Full run from a TOML or JSON config.
    Analyze {
        #[arg(long)]
        config: PathBuf,
    },
    /// Manifold capacity of one layer.
    Capacity {
        #[command(subcommand)]
        engine: CapacityEngine,
    },
    /// One-vs-rest SVM field distribution.
    SvmFields(SvmArgs),
    /// Shared-basis PCA coordinates as CSV.
    PcaExport(PcaArgs),
    /// Layer trajectory from per-layer report files.
    Trajectory(TrajectoryArgs),
    /// Pearson correlation of two CSV columns.
    Correlate(CorrelateArgs),
}

#[derive(Subcommand)]
enum CapacityEngine {
    /// Simulation capacity by bisection over projected dimension.
    Sim(SimArgs),
    /// Mean-field capacity, radius, dimension and center correlation.
    Mft(MftArgs),
}

#[derive(Args)]
struct Selection {
    #[arg(long)]
    container: PathBuf,
    #[arg(long)]
    task: String,
    /// Tags to use, one per line. All tags of the task otherwise.
    #[arg(long)]
    tags: Option<PathBuf>,
    #[arg(long, default_value_t = SamplingPolicy::DEFAULT_INSTANCES)]
    instances_per_tag: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Selection {
    fn load(&self) -> Result<LayeredFeatureSet> {
        load_feature_container(&self.container).with_context(|| format!("loading {}", self.container.display()))
    }

    fn manifolds(&self, fs: &LayeredFeatureSet, layer: usize) -> Result<ManifoldSet> {
        let tags = match &self.tags {
            Some(p) => read_list_file(p)?,
            None => fs.distinct_labels(&self.task)?,
        };
        let policy = SamplingPolicy {
            instances_per_tag: self.instances_per_tag,
            repetitions: 1,
            tag_list: tags,
            seed: self.seed,
        };
        Ok(build_manifold_set(fs, &self.task, layer, &policy, 0)?)
    }
}

#[derive(Args)]
struct SimArgs {
    #[command(flatten)]
    sel: Selection,
    #[arg(long)]
    layer: usize,
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    #[arg(long, default_value_t = 51)]
    dichotomies: usize,
    /// Points kept per manifold.
    #[arg(long, default_value_t = 20)]
    instances: usize,
}

#[derive(Args)]
struct MftArgs {
    #[command(flatten)]
    sel: Selection,
    #[arg(long, required_unless_present = "all_layers")]
    layer: Option<usize>,
    #[arg(long, default_value_t = 1e-8)]
    kappa: f64,
    #[arg(long, default_value_t = 300)]
    nt: usize,
    /// One report per container layer, as a JSON array.
    #[arg(long, conflicts_with = "layer")]
    all_layers: bool,
}

#[derive(Args)]
struct SvmArgs {
    #[command(flatten)]
    sel: Selection,
    #[arg(long)]
    layer: usize,
    #[arg(long, default_value = "80/20")]
    split: Split,
    #[arg(long = "c", default_value_t = 1.0)]
    c_param: f64,
    /// Take normalization centroids from the training split.
    #[arg(long)]
    train_centroids: bool,
    /// Also write a histogram of the normalized fields with this many bins.
    #[arg(long)]
    hist: Option<usize>,
    #[arg(long, default_value = "fields_histogram.csv", requires = "hist")]
    hist_out: PathBuf,
}

#[derive(Args)]
struct PcaArgs {
    #[arg(long)]
    container: PathBuf,
    /// Layers to project, comma separated. All layers otherwise.
    #[arg(long, value_delimiter = ',')]
    layers: Vec<usize>,
    /// Restrict to tokens labelled in this task; the label goes into the CSV.
    #[arg(long)]
    task: Option<String>,
    /// Restrict to these labels of `--task`, one per line.
    #[arg(long, requires = "task")]
    tags: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    k: usize,
    /// CSV destination; stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrajectoryArgs {
    /// Metric to extract from the reports.
    #[arg(long)]
    metric: Metric,
    #[arg(long)]
    normalization_layer: Option<usize>,
    /// Layer count of the model, for the normalized depth axis.
    #[arg(long)]
    num_layers: Option<usize>,
    /// Also write the trajectory as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// MFT, simulation or SVM report files (one per layer and repetition).
    #[arg(required = true)]
    reports: Vec<PathBuf>,
}

#[derive(Args)]
struct CorrelateArgs {
    /// CSV file with a header row.
    input: PathBuf,
    /// Column names; the first two columns otherwise.
    #[arg(long)]
    x: Option<String>,
    #[arg(long)]
    y: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        error!("{e:#}");
        return ExitCode::from(2);
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let report = json!({
                "schema_version": SCHEMA_VERSION,
                "error": e.to_string(),
                "causes": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
            });
            eprintln!("{}", serde_json::to_string_pretty(&report).unwrap_or_else(|_| format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}

fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("MG_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| anyhow!("MG_THREADS must be a positive integer, got `{v}`"))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Analyze { config } => {
            let cfg = RunConfig::from_file(&config)?;
            let summary = run(&cfg)?;
            print_json(&summary)
        }
        Command::Capacity { engine: CapacityEngine::Sim(a) } => capacity_sim(a),
        Command::Capacity { engine: CapacityEngine::Mft(a) } => capacity_mft(a),
        Command::SvmFields(a) => svm_fields(a),
        Command::PcaExport(a) => pca_export(a),
        Command::Trajectory(a) => trajectory(a),
        Command::Correlate(a) => correlate_columns(a),
    }
}

fn print_json<T: serde::Serialize + ?Sized>(value: &T) -> Result<()> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn capacity_sim(a: SimArgs) -> Result<()> {
    let fs = a.sel.load()?;
    let ms = a.sel.manifolds(&fs, a.layer)?;
    let cfg = SimConfig {
        epsilon: a.epsilon,
        n_dichotomies: a.dichotomies,
        instances_per_manifold: a.instances,
        seed: a.sel.seed,
        ..SimConfig::default()
    };
    let result = simulation_capacity(&ms, &cfg)?;
    if !result.converged {
        warn!("bisection did not converge");
    }
    print_json(&SimReport {
        schema_version: SCHEMA_VERSION,
        task: a.sel.task.clone(),
        layer: a.layer,
        repetition: 0,
        result,
        config: cfg,
    })
}

fn capacity_mft(a: MftArgs) -> Result<()> {
    let fs = a.sel.load()?;
    let cfg = MftConfig {
        kappa: a.kappa,
        n_t: a.nt,
        seed: a.sel.seed,
        ..MftConfig::default()
    };
    if a.all_layers {
        let reports = (0..fs.layer_count())
            .map(|l| Ok(mftma(&a.sel.manifolds(&fs, l)?, &cfg)?))
            .collect::<Result<Vec<_>>>()?;
        print_json(&reports)
    } else {
        let layer = a.layer.expect("clap requires --layer without --all-layers");
        print_json(&mftma(&a.sel.manifolds(&fs, layer)?, &cfg)?)
    }
}

fn svm_fields(a: SvmArgs) -> Result<()> {
    let fs = a.sel.load()?;
    let ms = a.sel.manifolds(&fs, a.layer)?;
    let source = if a.train_centroids { CentroidSource::Train } else { CentroidSource::Test };
    let dist = fields_one_vs_rest_with(&ms, a.split, a.c_param, a.sel.seed, source)?;
    if let Some(bins) = a.hist {
        let h = histogram(&dist.normalized_pool(), bins)?;
        let file = fs::File::create(&a.hist_out).with_context(|| format!("creating {}", a.hist_out.display()))?;
        write_histogram_csv(&h, io::BufWriter::new(file))?;
    }
    print_json(&dist)
}

fn pca_export(a: PcaArgs) -> Result<()> {
    let fs = load_feature_container(&a.container)?;
    let layers = if a.layers.is_empty() { (0..fs.layer_count()).collect() } else { a.layers.clone() };
    let labels = match &a.task {
        Some(t) => Some(fs.labels(t).ok_or_else(|| anyhow!("unknown task `{t}`"))?),
        None => None,
    };
    let wanted = a.tags.as_ref().map(read_list_file).transpose()?;
    let tokens: Vec<usize> = (0..fs.num_tokens())
        .filter(|&i| match (labels, &wanted) {
            (None, _) => true,
            (Some(l), None) => l[i].is_some(),
            (Some(l), Some(w)) => l[i].as_ref().is_some_and(|x| w.contains(x)),
        })
        .collect();
    if tokens.is_empty() {
        bail!("no tokens match the selection");
    }
    let report = global_pca(&fs, &layers, &tokens, a.k)?;
    match &a.out {
        Some(p) => {
            let file = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
            report.write_csv(io::BufWriter::new(file), labels)?;
        }
        None => report.write_csv(io::stdout().lock(), labels)?,
    }
    Ok(())
}

/// Task, layer and metric value of one report file.
fn read_report(path: &Path, metric: Metric) -> Result<(String, usize, f64)> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let v: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let field = match metric {
        Metric::Capacity => "alpha_m",
        Metric::Radius => "mean_radius",
        Metric::Dimension => "mean_dimension",
        Metric::RhoCenter => "rho_center",
        Metric::AlphaSim => "alpha_sim",
        Metric::Tpr => "tpr",
    };
    let get = |k: &str| v.get(k).ok_or_else(|| anyhow!("{}: no `{k}` field", path.display()));
    let task = get("task")?.as_str().unwrap_or_default().to_string();
    let layer = get("layer")?
        .as_u64()
        .ok_or_else(|| anyhow!("{}: `layer` is not an integer", path.display()))? as usize;
    let value = match get(field)? {
        Value::Number(n) => n.as_f64().unwrap_or(f64::NAN),
        Value::String(s) if s == "inf" => f64::INFINITY,
        other => bail!("{}: `{field}` is not a number: {other}", path.display()),
    };
    Ok((task, layer, value))
}

fn trajectory(a: TrajectoryArgs) -> Result<()> {
    let mut by_layer: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut task = None;
    for p in &a.reports {
        let (t, layer, value) = read_report(p, a.metric)?;
        match &task {
            None => task = Some(t),
            Some(prev) if *prev != t => bail!("reports mix tasks `{prev}` and `{t}`"),
            _ => {}
        }
        by_layer.entry(layer).or_default().push(value);
    }
    let layers: Vec<usize> = by_layer.keys().copied().collect();
    let norm = a
        .normalization_layer
        .unwrap_or_else(|| default_normalization_layer(a.metric, &layers));
    let num_layers = a.num_layers.unwrap_or(layers.last().map_or(1, |l| l + 1));
    let values: Vec<(usize, Vec<f64>)> = by_layer.into_iter().collect();
    let traj = layer_trajectory(&task.unwrap_or_default(), a.metric, &values, norm, num_layers)?;
    if let Some(p) = &a.csv {
        let file = fs::File::create(p).with_context(|| format!("creating {}", p.display()))?;
        traj.write_csv(io::BufWriter::new(file))?;
    }
    print_json(&traj)
}

fn correlate_columns(a: CorrelateArgs) -> Result<()> {
    let mut rdr = csv::Reader::from_path(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let headers = rdr.headers()?.clone();
    let column = |name: &Option<String>, fallback: usize| -> Result<usize> {
        match name {
            Some(n) => headers
                .iter()
                .position(|h| h.trim() == n)
                .ok_or_else(|| anyhow!("no column `{n}`")),
            None if fallback < headers.len() => Ok(fallback),
            None => bail!("need at least two columns"),
        }
    };
    let (ix, iy) = (column(&a.x, 0)?, column(&a.y, 1)?);
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            let s = rec.get(i).unwrap_or("").trim();
            s.parse().with_context(|| format!("row {}: `{s}` is not a number", row + 1))
        };
        xs.push(parse(ix)?);
        ys.push(parse(iy)?);
    }
    let r = correlate(&xs, &ys)?;
    print_json(&json!({
        "schema_version": SCHEMA_VERSION,
        "x": &headers[ix],
        "y": &headers[iy],
        "n": xs.len(),
        "pearson": r,
    }))
}
