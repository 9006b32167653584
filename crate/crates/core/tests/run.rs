use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use mg_core::report::TrajectoryReport;
use mg_core::run::{run, Engine, ErrorReport, RunConfig, RunSummary};
use mg_core::MftReport;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

fn config(out: &Path, engines: Vec<Engine>) -> RunConfig {
    let text = format!(
        r#"
container = "{}"
tasks = ["pos"]
layers = [0, 2]
engines = []
output_dir = "{}"
seed = 11
instances_per_tag = 12

[mft]
n_t = 40
"#,
        fixture("clusters").display(),
        out.display()
    );
    let path = out.with_extension("toml");
    fs::write(&path, text).unwrap();
    let mut cfg = RunConfig::from_file(&path).unwrap();
    cfg.engines = engines;
    cfg
}

fn files_under(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn one_report_per_layer_and_repetition() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = config(&out, vec![Engine::Mft]);
    assert_eq!(cfg.repetitions, 5);
    let summary = run(&cfg).unwrap();

    let reports: Vec<_> = fs::read_dir(out.join("mft")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(reports.len(), 2 * 5);
    for p in &reports {
        let r: MftReport = serde_json::from_slice(&fs::read(p).unwrap()).unwrap();
        assert_eq!(r.per_manifold.len(), 4);
        assert!(r.alpha_m > 0.0);
    }
    for metric in ["capacity", "radius", "dimension", "rho_center"] {
        let t: TrajectoryReport =
            serde_json::from_slice(&fs::read(out.join(format!("trajectories/pos_{metric}.json"))).unwrap()).unwrap();
        assert_eq!(t.per_layer.len(), 2);
        assert_eq!(t.repetitions, 5);
        assert!(t.per_layer.iter().all(|l| l.values.len() == 5));
        assert_eq!(t.layer(0).unwrap().normalized_value, 1.0);
        assert_eq!(t.layer(2).unwrap().x, 1.0);
        assert!(out.join(format!("trajectories/pos_{metric}.csv")).exists());
    }
    assert_eq!(summary.files.len(), 10 + 4 * 2);
    let on_disk: RunSummary = serde_json::from_slice(&fs::read(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(on_disk, summary);
    assert!(!out.join("error.json").exists());
}

#[test]
fn rerun_is_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let mut cfg = config(&out, vec![Engine::Mft, Engine::Svm]);
    cfg.repetitions = 2;
    run(&cfg).unwrap();
    let first = files_under(&out);
    fs::remove_dir_all(&out).unwrap();
    run(&cfg).unwrap();
    assert_eq!(files_under(&out), first);
}

#[test]
fn clusters_tighten_with_depth() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let mut cfg = config(&out, vec![Engine::Mft]);
    cfg.repetitions = 2;
    run(&cfg).unwrap();
    let t: TrajectoryReport =
        serde_json::from_slice(&fs::read(out.join("trajectories/pos_capacity.json")).unwrap()).unwrap();
    assert!(t.layer(2).unwrap().normalized_value > 1.0);
}

#[test]
fn failed_job_leaves_partials_and_error_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = config(&out, vec![Engine::Mft, Engine::Svm]);
    // a directory where one report should go makes that write fail
    let blocker = out.join("svm/pos_layer2_rep3.json.partial");
    fs::create_dir_all(&blocker).unwrap();
    fs::write(blocker.join("keep"), b"x").unwrap();

    assert!(run(&cfg).is_err());
    let err: ErrorReport = serde_json::from_slice(&fs::read(out.join("error.json")).unwrap()).unwrap();
    assert_eq!(err.job.as_deref(), Some("pos_layer2_rep3"));
    assert!(out.join("mft/pos_layer2_rep3.json.partial").is_file());
    let finals: Vec<_> = files_under(&out)
        .into_keys()
        .filter(|f| f.ends_with(".json") && f != "error.json")
        .collect();
    assert!(finals.is_empty(), "{finals:?}");
    assert!(!out.join("summary.json").exists());

    // a clean rerun clears the stale error report
    fs::remove_dir_all(&blocker).unwrap();
    run(&cfg).unwrap();
    assert!(!out.join("error.json").exists());
}

#[test]
fn label_subsets_get_their_own_trajectories() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let mut cfg = config(&out, vec![Engine::Mft]);
    cfg.repetitions = 2;
    cfg.label_subsets.insert("open".into(), fixture("open_class.txt"));
    cfg.label_subsets.insert("closed".into(), fixture("closed_class.txt"));
    run(&cfg).unwrap();

    let load = |name: &str| -> TrajectoryReport {
        serde_json::from_slice(&fs::read(out.join(format!("trajectories/pos_capacity_{name}.json"))).unwrap()).unwrap()
    };
    let open = load("open");
    let closed = load("closed");
    assert_eq!(open.subset.as_deref(), Some("open"));
    assert_eq!(closed.subset.as_deref(), Some("closed"));

    // recompute the open-class aggregate from the per-manifold values
    let open_labels: Vec<String> = ["NN", "VB", "JJ"].map(String::from).to_vec();
    for layer in [0, 2] {
        let r: MftReport =
            serde_json::from_slice(&fs::read(out.join(format!("mft/pos_layer{layer}_rep0.json"))).unwrap()).unwrap();
        let inv: f64 = r
            .per_manifold
            .iter()
            .filter(|m| open_labels.contains(&m.label))
            .map(|m| 1.0 / m.alpha_mu)
            .sum::<f64>()
            / 3.0;
        let v = open.layer(layer).unwrap().values[0];
        assert!((v - 1.0 / inv).abs() < 1e-12, "{v} vs {}", 1.0 / inv);
    }
}

#[test]
fn tag_files_restrict_the_manifolds() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let mut cfg = config(&out, vec![Engine::Mft]);
    cfg.repetitions = 1;
    cfg.tag_files.insert("pos".into(), fixture("open_class.txt"));
    run(&cfg).unwrap();
    let r: MftReport = serde_json::from_slice(&fs::read(out.join("mft/pos_layer0_rep0.json")).unwrap()).unwrap();
    let mut labels: Vec<_> = r.per_manifold.iter().map(|m| m.label.as_str()).collect();
    labels.sort();
    assert_eq!(labels, ["JJ", "NN", "VB"]);
}

#[test]
fn config_problems_are_reported_before_running() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let mut cfg = config(&out, vec![Engine::Mft]);
    cfg.tasks = vec!["ner".into()];
    assert!(run(&cfg).is_err());
    assert!(out.join("error.json").exists());
    assert!(!out.join("mft").exists());

    let mut cfg = config(&out, vec![Engine::Mft]);
    cfg.layers = Some(vec![0, 7]);
    assert!(run(&cfg).is_err());

    let mut cfg = config(&out, vec![Engine::Svm]);
    cfg.svm.c_param = -1.0;
    assert!(run(&cfg).is_err());

    let path = tmp.path().join("bad.toml");
    fs::write(&path, "container = \"x\"\ntasks = []\nengines = []\noutput_dir = \"o\"\nbogus = 1\n").unwrap();
    assert!(RunConfig::from_file(&path).is_err());
}

#[test]
fn json_config_paths_are_relative_to_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("run.json");
    fs::write(
        &path,
        r#"{"container": "data", "tasks": ["pos"], "engines": ["mft", "sim"], "output_dir": "results"}"#,
    )
    .unwrap();
    let cfg = RunConfig::from_file(&path).unwrap();
    assert_eq!(cfg.container, tmp.path().join("data"));
    assert_eq!(cfg.output_dir, tmp.path().join("results"));
    assert_eq!(cfg.engines, vec![Engine::Mft, Engine::Sim]);
    assert_eq!(cfg.layers, None);
}
