use std::fs;

use fsdd::runner::{run_experiment, ExperimentConfig};
use fsdd::Error;

fn config(sweep: &str, design: &str, repeats: usize) -> ExperimentConfig {
    let text = format!(
        r#"{{
            "data": {{"synth": {{"spec": {{"dim": 8, "n_super": 4, "classes_per_super": 6, "images_per_class": 16,
                        "super_separation": 0.8, "intra_super_spread": 0.3, "within_class_noise": 0.2, "seed": 3}},
                      "novel_fraction": 0.25, "placement": "far"}}}},
            "design": {design},
            "sweep": {sweep},
            "train": {{"epochs": 2, "batch_size": 16, "out_dim": 4}},
            "eval": {{"classifiers": ["cc", "proto"], "shots": [1], "query": 5, "episodes": 20}},
            "repeats": {repeats},
            "seed": 11
        }}"#
    );
    ExperimentConfig::from_json(&text).unwrap()
}

fn ratio_config(repeats: usize) -> ExperimentConfig {
    config(
        r#"{"key": "class_ratio", "values": [0.125, 0.25, 0.5, 1, 2, 4, 8]}"#,
        r#"{"relabel": {"method": "balanced"}}"#,
        repeats,
    )
}

#[test]
fn class_ratio_sweep_has_one_aggregate_row_per_ratio() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_experiment(&ratio_config(1), dir.path()).unwrap();
    let cc: Vec<f64> = out
        .aggregate
        .iter()
        .filter(|a| a.classifier.to_string() == "cc")
        .map(|a| a.sweep_value)
        .collect();
    assert_eq!(cc, vec![0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0]);
    let agg = fs::read_to_string(dir.path().join("aggregate.csv")).unwrap();
    assert!(agg.starts_with("sweep_key,sweep_value,classifier,nway,kshot,repeats,mean_acc,std_acc\n"));
    assert_eq!(agg.lines().count(), 1 + 14);
    assert!(agg.lines().nth(1).unwrap().starts_with("class_ratio,0.125,cc,5,1,1,"));
    let results = fs::read_to_string(dir.path().join("results.csv")).unwrap();
    assert!(results.starts_with("sweep_key,sweep_value,repeat,classifier,nway,kshot,mean_acc,ci95\n"));

    let point = dir.path().join("points/class_ratio=8/repeat0");
    for f in ["design.json", "model.json", "model.bin", "eval_cc_1shot.json", "relabel/relabel.json"] {
        assert!(point.join(f).exists(), "{f}");
    }
    let design: serde_json::Value = serde_json::from_str(&fs::read_to_string(point.join("design.json")).unwrap()).unwrap();
    assert_eq!(design["base_classes"], 18 * 8);
    let design: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("points/class_ratio=0.125/repeat0/design.json")).unwrap())
            .unwrap();
    assert_eq!(design["base_classes"], 3);
}

#[test]
fn aggregate_is_mean_and_std_over_repeats() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ratio_config(3);
    cfg.sweep.values = vec![0.5, 2.0];
    let out = run_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(out.rows.len(), 2 * 3 * 2);
    for a in &out.aggregate {
        let accs: Vec<f64> = out
            .rows
            .iter()
            .filter(|r| r.sweep_value == a.sweep_value && r.classifier == a.classifier && r.kshot == a.kshot)
            .map(|r| r.mean_acc)
            .collect();
        assert_eq!(accs.len(), 3);
        assert_eq!(a.repeats, 3);
        let mean = accs.iter().sum::<f64>() / 3.0;
        assert!((a.mean_acc - mean).abs() < 1e-12);
        let var = accs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 2.0;
        assert!((a.std_acc - var.sqrt()).abs() < 1e-12);
    }
    let seeds: Vec<u64> = out.reports.iter().map(|r| r.config.seed).collect();
    assert_eq!(&seeds[..6], &[11, 11, 12, 12, 13, 13]);
}

#[test]
fn reruns_and_parallel_runs_are_byte_identical() {
    let cfg = config(
        r#"{"key": "classes", "values": [4, 8, 12]}"#,
        r#"{"selection": {"mode": "random", "count": 4, "budget": 48}}"#,
        2,
    );
    let read = |d: &std::path::Path| {
        (
            fs::read(d.join("results.csv")).unwrap(),
            fs::read(d.join("aggregate.csv")).unwrap(),
            fs::read(d.join("points/classes=8/repeat1/model.bin")).unwrap(),
        )
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let c = tempfile::tempdir().unwrap();
    run_experiment(&cfg, a.path()).unwrap();
    run_experiment(&cfg, b.path()).unwrap();
    let mut par = cfg.clone();
    par.parallel = true;
    run_experiment(&par, c.path()).unwrap();
    assert_eq!(read(a.path()), read(b.path()));
    assert_eq!(read(a.path()), read(c.path()));
    let design: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join("points/classes=12/repeat0/design.json")).unwrap()).unwrap();
    assert_eq!(design["images_per_class"], 4);
    assert_eq!(design["base_records"], 48);
    assert_eq!(design["budget_remainder"], 0);
}

#[test]
fn resolved_config_materializes_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ratio_config(1);
    cfg.sweep.values = vec![1.0];
    run_experiment(&cfg, dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join("config.resolved.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["rng"], fsdd::rng::ALGORITHM);
    assert_eq!(v["train"]["momentum"], 0.9);
    assert_eq!(v["train"]["lr_milestones"], serde_json::json!([20, 25]));
    assert_eq!(v["embedder"], "linear");
    assert_eq!(v["design"]["relabel"]["max_iters"], 100);
    let back: ExperimentConfig = serde_json::from_value(v).unwrap();
    assert_eq!(back, cfg);
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ratio_config(1);
    cfg.sweep.values.clear();
    assert!(matches!(run_experiment(&cfg, dir.path()), Err(Error::InvalidArgument(_))));
    let mut cfg = ratio_config(1);
    cfg.repeats = 0;
    assert!(run_experiment(&cfg, dir.path()).is_err());
    let cfg = config(r#"{"key": "classes", "values": [4]}"#, "{}", 1);
    assert!(run_experiment(&cfg, dir.path()).is_err());
    assert!(ExperimentConfig::from_json("{\"data\": 3}").is_err());
}

#[test]
fn stage_errors_name_the_sweep_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(
        r#"{"key": "classes", "values": [4, 40]}"#,
        r#"{"selection": {"mode": "closest", "count": 4, "images_per_class": 8}}"#,
        1,
    );
    match run_experiment(&cfg, dir.path()) {
        Err(Error::Stage { key, value, repeat, .. }) => {
            assert_eq!((key.as_str(), value, repeat), ("classes", 40.0, 0));
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn dataset_paths_as_source() {
    let dir = tempfile::tempdir().unwrap();
    let spec = fsdd::synth::SynthSpec {
        dim: 6,
        n_super: 3,
        classes_per_super: 5,
        images_per_class: 12,
        seed: 1,
        ..Default::default()
    };
    let bn = fsdd::synth::gen_base_novel(&spec, 0.34, fsdd::synth::Placement::Far, 0).unwrap();
    fsdd::dataset::save_dataset(&bn.base, dir.path().join("base")).unwrap();
    fsdd::dataset::save_dataset(&bn.novel, dir.path().join("novel")).unwrap();
    let text = format!(
        r#"{{"data": {{"paths": {{"base": {:?}, "novel": {:?}}}}},
            "design": {{"relabel": {{"method": "kmeans"}}}},
            "sweep": {{"key": "class_ratio", "values": [0.5, 1]}},
            "embedder": "identity",
            "eval": {{"shots": [1, 5], "query": 5, "episodes": 10}}}}"#,
        dir.path().join("base"),
        dir.path().join("novel")
    );
    let cfg = ExperimentConfig::from_json(&text).unwrap();
    let out = run_experiment(&cfg, dir.path().join("run")).unwrap();
    assert_eq!(out.rows.len(), 4);
    // the identity embedder ignores the base set, so every point agrees
    assert_eq!(out.rows[0].mean_acc, out.rows[2].mean_acc);
    assert_eq!(out.rows[1].mean_acc, out.rows[3].mean_acc);
    let mut bad = cfg.clone();
    bad.data = fsdd::runner::DataSource::Paths {
        base: dir.path().join("missing"),
        novel: dir.path().join("novel"),
    };
    assert!(run_experiment(&bad, dir.path().join("run2")).is_err());
}
