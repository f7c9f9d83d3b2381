//! Config-driven sweeps: data → base-set design → training → evaluation.
//!
//! Repeat `r` of a run with seed `s` uses seed `s + r` for selection,
//! relabeling, training and evaluation. Synthetic data uses
//! `synth.seed + r`, so every repeat also sees a fresh instance.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{apply_relabel, load_dataset, save_relabel, subset, EmbeddingDataset};
use crate::error::{Error, Result};
use crate::eval::{evaluate, Classifier, EvalConfig, EvalReport};
use crate::learner::{embed, save_model, train_embedder, EmbedderKind, TrainConfig};
use crate::relabel::{bpc_split, greedy_group, kmeans_relabel};
use crate::rng;
use crate::selection::{select, BinMetric, SelectionMode, SelectionSpec};
use crate::synth::{gen_base_novel, Placement, SynthSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synth {
        spec: SynthSpec,
        #[serde(default = "default_novel_fraction")]
        novel_fraction: f64,
        #[serde(default = "default_placement")]
        placement: Placement,
    },
    Paths {
        base: PathBuf,
        novel: PathBuf,
    },
}

fn default_novel_fraction() -> f64 {
    0.25
}

fn default_placement() -> Placement {
    Placement::Near
}

/// A [`SelectionSpec`] without its seed, which the runner derives.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionStage {
    pub mode: SelectionMode,
    pub count: usize,
    #[serde(default)]
    pub images_per_class: Option<usize>,
    #[serde(default)]
    pub budget: Option<usize>,
    #[serde(default)]
    pub bin_index: Option<usize>,
    #[serde(default)]
    pub bin_metric: Option<BinMetric>,
    #[serde(default)]
    pub distance_filter: Option<(f64, f64)>,
}

impl SelectionStage {
    fn spec(&self, seed: u64) -> SelectionSpec {
        SelectionSpec {
            mode: self.mode,
            count: self.count,
            images_per_class: self.images_per_class,
            budget: self.budget,
            bin_index: self.bin_index,
            bin_metric: self.bin_metric,
            distance_filter: self.distance_filter,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelabelMethod {
    /// BPC splitting for ratios above 1, greedy grouping below 1.
    Balanced,
    /// K-means on record embeddings with `k = round(ratio · C)`.
    Kmeans,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelabelStage {
    pub method: RelabelMethod,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
}

fn default_ratio() -> f64 {
    1.0
}

fn default_max_iters() -> usize {
    100
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Design {
    #[serde(default)]
    pub selection: Option<SelectionStage>,
    #[serde(default)]
    pub relabel: Option<RelabelStage>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKey {
    Classes,
    Budget,
    ImagesPerClass,
    Bin,
    ClassRatio,
}

impl std::fmt::Display for SweepKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SweepKey::Classes => "classes",
            SweepKey::Budget => "budget",
            SweepKey::ImagesPerClass => "images_per_class",
            SweepKey::Bin => "bin",
            SweepKey::ClassRatio => "class_ratio",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub key: SweepKey,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalStage {
    pub classifiers: Vec<Classifier>,
    pub way: usize,
    pub shots: Vec<usize>,
    pub query: usize,
    pub episodes: usize,
    pub topk: usize,
}

impl Default for EvalStage {
    fn default() -> Self {
        Self {
            classifiers: vec![Classifier::Cc],
            way: 5,
            shots: vec![1, 5],
            query: 15,
            episodes: 10_000,
            topk: 1,
        }
    }
}

fn default_embedder() -> EmbedderKind {
    EmbedderKind::Linear
}

fn default_repeats() -> usize {
    1
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    #[serde(default)]
    pub design: Design,
    pub sweep: Sweep,
    #[serde(default = "default_embedder")]
    pub embedder: EmbedderKind,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalStage,
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub seed: u64,
    /// Run sweep points and repeats concurrently.
    #[serde(default)]
    pub parallel: bool,
    /// Write per-point models, designs and reports under `points/`.
    #[serde(default = "default_true")]
    pub artifacts: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("experiment config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::invalid("repeats must be at least 1"));
        }
        if self.sweep.values.is_empty() {
            return Err(Error::invalid("sweep has no values"));
        }
        if self.sweep.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("sweep values must be finite"));
        }
        let e = &self.eval;
        if e.classifiers.is_empty() || e.shots.is_empty() {
            return Err(Error::invalid("eval needs at least one classifier and one shot count"));
        }
        let integral = self.sweep.values.iter().all(|v| v.fract() == 0.0 && *v >= 0.0);
        match self.sweep.key {
            SweepKey::ClassRatio => {
                if self.design.relabel.is_none() {
                    return Err(Error::invalid("class_ratio sweeps need a relabel stage"));
                }
                if self.sweep.values.iter().any(|v| *v <= 0.0) {
                    return Err(Error::invalid("class ratios must be positive"));
                }
            }
            _ => {
                if self.design.selection.is_none() {
                    return Err(Error::invalid(format!("{} sweeps need a selection stage", self.sweep.key)));
                }
                if !integral {
                    return Err(Error::invalid(format!("{} values must be whole numbers", self.sweep.key)));
                }
            }
        }
        if let DataSource::Paths { base, novel } = &self.data {
            for p in [base, novel] {
                if !p.exists() {
                    return Err(Error::invalid(format!("{} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    /// The design for one sweep value.
    fn design_at(&self, value: f64) -> Design {
        let mut d = self.design.clone();
        let n = value as usize;
        match (self.sweep.key, d.selection.as_mut()) {
            (SweepKey::Classes, Some(s)) => s.count = n,
            (SweepKey::Budget, Some(s)) => {
                s.budget = Some(n);
                s.images_per_class = None;
            }
            (SweepKey::ImagesPerClass, Some(s)) => {
                s.images_per_class = Some(n);
                s.budget = None;
            }
            (SweepKey::Bin, Some(s)) => s.bin_index = Some(n),
            _ => {}
        }
        if let (SweepKey::ClassRatio, Some(r)) = (self.sweep.key, d.relabel.as_mut()) {
            r.ratio = value;
        }
        d
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResultRow {
    pub sweep_key: String,
    pub sweep_value: f64,
    pub repeat: usize,
    pub classifier: Classifier,
    pub nway: usize,
    pub kshot: usize,
    pub mean_acc: f64,
    pub ci95: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AggregateRow {
    pub sweep_key: String,
    pub sweep_value: f64,
    pub classifier: Classifier,
    pub nway: usize,
    pub kshot: usize,
    pub repeats: usize,
    pub mean_acc: f64,
    /// Sample standard deviation of the repeat means; 0 for one repeat.
    pub std_acc: f64,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub rows: Vec<ResultRow>,
    pub aggregate: Vec<AggregateRow>,
    pub reports: Vec<EvalReport>,
}

#[derive(Serialize)]
struct Resolved<'a> {
    rng: &'static str,
    #[serde(flatten)]
    config: &'a ExperimentConfig,
}

#[derive(Serialize)]
struct DesignRecord {
    sweep_key: String,
    sweep_value: f64,
    repeat: usize,
    seed: u64,
    selected_classes: Option<Vec<u32>>,
    images_per_class: Option<usize>,
    budget_remainder: Option<usize>,
    base_records: usize,
    base_classes: usize,
}

struct PointResult {
    rows: Vec<ResultRow>,
    reports: Vec<EvalReport>,
}

fn load_data(source: &DataSource, repeat: usize, seed: u64) -> Result<(EmbeddingDataset, EmbeddingDataset)> {
    match source {
        DataSource::Synth {
            spec,
            novel_fraction,
            placement,
        } => {
            let spec = SynthSpec {
                seed: spec.seed + repeat as u64,
                ..spec.clone()
            };
            let bn = gen_base_novel(&spec, *novel_fraction, *placement, seed)?;
            Ok((bn.base, bn.novel))
        }
        DataSource::Paths { base, novel } => Ok((load_dataset(base)?, load_dataset(novel)?)),
    }
}

fn point_dir(out: &Path, key: SweepKey, value: f64, repeat: usize) -> PathBuf {
    out.join("points").join(format!("{key}={value}")).join(format!("repeat{repeat}"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run_point(cfg: &ExperimentConfig, value: f64, repeat: usize, preloaded: Option<&(EmbeddingDataset, EmbeddingDataset)>, out: &Path) -> Result<PointResult> {
    let seed = cfg.seed + repeat as u64;
    let owned;
    let (base, novel) = match preloaded {
        Some(pair) => (&pair.0, &pair.1),
        None => {
            owned = load_data(&cfg.data, repeat, seed)?;
            (&owned.0, &owned.1)
        }
    };
    let design = cfg.design_at(value);
    let dir = point_dir(out, cfg.sweep.key, value, repeat);
    if cfg.artifacts {
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }

    let mut record = DesignRecord {
        sweep_key: cfg.sweep.key.to_string(),
        sweep_value: value,
        repeat,
        seed,
        selected_classes: None,
        images_per_class: None,
        budget_remainder: None,
        base_records: 0,
        base_classes: 0,
    };
    let mut designed = match &design.selection {
        Some(stage) => {
            let sel = select(base, novel, &stage.spec(seed))?;
            record.selected_classes = Some(sel.class_ids.clone());
            record.images_per_class = Some(sel.per_class);
            record.budget_remainder = stage.budget.map(|_| sel.remainder);
            subset(base, &sel.keep)?
        }
        None => base.clone(),
    };
    if let Some(stage) = &design.relabel {
        let map = match stage.method {
            RelabelMethod::Balanced if stage.ratio > 1.0 => {
                if stage.ratio.fract() != 0.0 {
                    return Err(Error::invalid(format!("split ratio {} is not a whole number", stage.ratio)));
                }
                Some(bpc_split(&designed, stage.ratio as u32)?)
            }
            RelabelMethod::Balanced if stage.ratio < 1.0 => Some(greedy_group(&designed, stage.ratio)?),
            RelabelMethod::Balanced => None,
            RelabelMethod::Kmeans => {
                let k = ((stage.ratio * designed.num_classes() as f64).round() as usize).max(1);
                Some(kmeans_relabel(&designed, k, seed, stage.max_iters)?.0)
            }
        };
        if let Some(map) = map {
            if cfg.artifacts {
                save_relabel(&map, dir.join("relabel"))?;
            }
            designed = apply_relabel(&designed, &map)?;
        }
    }
    record.base_records = designed.len();
    record.base_classes = designed.num_classes();

    let train = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let embedder = train_embedder(&designed, &train, cfg.embedder)?;
    let embedded = embed(&embedder, novel)?;
    if cfg.artifacts {
        write_json(&dir.join("design.json"), &record)?;
        save_model(&embedder, dir.join("model.json"))?;
    }

    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for &classifier in &cfg.eval.classifiers {
        for &shot in &cfg.eval.shots {
            let ec = EvalConfig {
                classifier,
                way: cfg.eval.way,
                shot,
                query: cfg.eval.query,
                episodes: cfg.eval.episodes,
                seed,
                topk: cfg.eval.topk,
            };
            let report = evaluate(&embedded, &ec)?;
            if cfg.artifacts {
                let path = dir.join(format!("eval_{classifier}_{shot}shot.json"));
                fs::write(&path, report.to_json()).map_err(|e| Error::io(&path, e))?;
            }
            rows.push(ResultRow {
                sweep_key: cfg.sweep.key.to_string(),
                sweep_value: value,
                repeat,
                classifier,
                nway: cfg.eval.way,
                kshot: shot,
                mean_acc: report.mean_acc,
                ci95: report.ci95,
            });
            reports.push(report);
        }
    }
    Ok(PointResult { rows, reports })
}

/// Mean and sample standard deviation of each (value, classifier, shot)
/// group, in first-appearance order.
pub fn aggregate(rows: &[ResultRow]) -> Vec<AggregateRow> {
    let mut groups: Vec<(AggregateRow, Vec<f64>)> = Vec::new();
    for row in rows {
        let found = groups.iter_mut().find(|(a, _)| {
            a.sweep_value == row.sweep_value && a.classifier == row.classifier && a.kshot == row.kshot
        });
        match found {
            Some((_, accs)) => accs.push(row.mean_acc),
            None => groups.push((
                AggregateRow {
                    sweep_key: row.sweep_key.clone(),
                    sweep_value: row.sweep_value,
                    classifier: row.classifier,
                    nway: row.nway,
                    kshot: row.kshot,
                    repeats: 0,
                    mean_acc: 0.0,
                    std_acc: 0.0,
                },
                vec![row.mean_acc],
            )),
        }
    }
    groups
        .into_iter()
        .map(|(mut a, accs)| {
            let n = accs.len() as f64;
            let mean = accs.iter().sum::<f64>() / n;
            a.repeats = accs.len();
            a.mean_acc = mean;
            a.std_acc = if accs.len() > 1 {
                (accs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            a
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub const RESULTS_HEADER: [&str; 8] = ["sweep_key", "sweep_value", "repeat", "classifier", "nway", "kshot", "mean_acc", "ci95"];
pub const AGGREGATE_HEADER: [&str; 8] = ["sweep_key", "sweep_value", "classifier", "nway", "kshot", "repeats", "mean_acc", "std_acc"];

/// Runs every sweep point × repeat and writes `results.csv`,
/// `aggregate.csv` and `config.resolved.json` under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: impl AsRef<Path>) -> Result<RunOutput> {
    let out = out.as_ref();
    cfg.validate()?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_json(
        &out.join("config.resolved.json"),
        &Resolved {
            rng: rng::ALGORITHM,
            config: cfg,
        },
    )?;
    let preloaded = match &cfg.data {
        DataSource::Paths { .. } => Some(load_data(&cfg.data, 0, cfg.seed)?),
        DataSource::Synth { .. } => None,
    };
    let jobs: Vec<(f64, usize)> = cfg
        .sweep
        .values
        .iter()
        .flat_map(|&v| (0..cfg.repeats).map(move |r| (v, r)))
        .collect();
    let run = |&(value, repeat): &(f64, usize)| {
        log::info!("{}={value} repeat {repeat}", cfg.sweep.key);
        run_point(cfg, value, repeat, preloaded.as_ref(), out).map_err(|e| Error::Stage {
            key: cfg.sweep.key.to_string(),
            value,
            repeat,
            source: Box::new(e),
        })
    };
    let results: Vec<PointResult> = if cfg.parallel {
        jobs.par_iter().map(run).collect::<Result<_>>()?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };
    let mut rows = Vec::new();
    let mut reports = Vec::new();
    for r in results {
        rows.extend(r.rows);
        reports.extend(r.reports);
    }
    let aggregate = aggregate(&rows);
    write_csv(&out.join("results.csv"), &rows, &RESULTS_HEADER)?;
    write_csv(&out.join("aggregate.csv"), &aggregate, &AGGREGATE_HEADER)?;
    Ok(RunOutput {
        rows,
        aggregate,
        reports,
    })
}
