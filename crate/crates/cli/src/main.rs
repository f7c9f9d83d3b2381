use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use fsdd::dataset::{apply_relabel, load_dataset, load_relabel, save_dataset, save_relabel, subset, EmbeddingDataset};
use fsdd::eval::{evaluate_with_workers, Classifier, EvalConfig};
use fsdd::learner::{embed, load_model, save_model, train_embedder, EmbedderKind, TrainConfig};
use fsdd::relabel::{bpc_split, greedy_group, imbalance, kmeans_relabel};
use fsdd::runner::{run_experiment, ExperimentConfig};
use fsdd::selection::{select, BinMetric, SelectionMode, SelectionSpec, DEFAULT_BAND};
use fsdd::stats::{compute_class_stats, prototypes, write_stats_csv, DEFAULT_HOLDOUT};
use fsdd::synth::{gen_base_novel, gen_hierarchical, Placement, SynthSpec};

#[derive(Parser)]
#[command(name = "fsdd", version, about = "Design and evaluate base training sets for few-shot classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic hierarchical dataset
    Synth(SynthArgs),
    /// Per-class diversity, difficulty and distance to a test set
    Stats(StatsArgs),
    /// Split every class into balanced sub-classes along principal components
    Split(RelabelArgs),
    /// Greedily merge the most similar classes into balanced meta-classes
    Group(GroupArgs),
    /// Relabel records by K-means clusters
    Kmeans(KmeansArgs),
    /// Write a dataset with labels taken from a relabel directory
    Apply(ApplyArgs),
    /// Select base classes by similarity to a test set
    Select(SelectArgs),
    /// Select base classes from a diversity or difficulty decile
    SelectBin(SelectBinArgs),
    /// Train an embedder with a cosine classifier
    Train(TrainArgs),
    /// Episodic few-shot evaluation
    Eval(EvalArgs),
    /// Run a config-driven sweep
    Run(RunArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 8)]
    supers: usize,
    #[arg(long, default_value_t = 4)]
    classes_per_super: usize,
    #[arg(long, default_value_t = 50)]
    images: usize,
    #[arg(long, default_value_t = 1.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.1)]
    spread: f64,
    #[arg(long, default_value_t = 0.01)]
    noise: f64,
    /// Confine each super-cluster's class offsets to a random subspace of this dimension
    #[arg(long)]
    subspace: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write `base/` and `novel/` instead of a single dataset
    #[arg(long)]
    novel_fraction: Option<f64>,
    #[arg(long, default_value = "near")]
    placement: Placement,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    test_dataset: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_HOLDOUT)]
    holdout: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RelabelArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    ratio: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct GroupArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    ratio: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KmeansArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    max_iters: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ApplyArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    relabel: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Images {
    /// Total image budget, split evenly over the chosen classes
    #[arg(long, conflicts_with = "images_per_class")]
    budget: Option<usize>,
    #[arg(long)]
    images_per_class: Option<usize>,
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    test_dataset: PathBuf,
    #[arg(long)]
    mode: SelectionMode,
    #[arg(long)]
    classes: usize,
    #[command(flatten)]
    images: Images,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SelectBinArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    test_dataset: PathBuf,
    #[arg(long)]
    metric: BinMetric,
    #[arg(long)]
    bin: usize,
    /// Quantile band of distances to the test classes, as `lo,hi`
    #[arg(long, value_parser = parse_band)]
    band: Option<(f64, f64)>,
    #[arg(long)]
    classes: usize,
    #[command(flatten)]
    images: Images,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_band(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(',').ok_or("expected lo,hi")?;
    let lo = lo.trim().parse().map_err(|e| format!("{e}"))?;
    let hi = hi.trim().parse().map_err(|e| format!("{e}"))?;
    Ok((lo, hi))
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "linear")]
    kind: EmbedderKind,
    /// JSON training config; the flags below override it
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    out_dim: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Embed the dataset with this model before evaluating
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, default_value = "cc")]
    classifier: Classifier,
    #[arg(long, default_value_t = 5)]
    nway: usize,
    #[arg(long, default_value_t = 5)]
    kshot: usize,
    #[arg(long, default_value_t = 15)]
    query: usize,
    #[arg(long, default_value_t = 10_000)]
    episodes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    topk: usize,
    /// Worker threads; defaults to the number of CPUs
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn load(path: &Path) -> Result<EmbeddingDataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        dim: a.dim,
        n_super: a.supers,
        classes_per_super: a.classes_per_super,
        images_per_class: a.images,
        super_separation: a.separation,
        intra_super_spread: a.spread,
        within_class_noise: a.noise,
        class_subspace_dim: a.subspace,
        seed: a.seed,
    };
    match a.novel_fraction {
        None => {
            let h = gen_hierarchical(&spec)?;
            save_dataset(&h.dataset, &a.out)?;
            let supers: serde_json::Map<String, serde_json::Value> =
                h.super_of.iter().map(|(c, s)| (c.to_string(), (*s).into())).collect();
            write(&a.out.join("super_of.json"), &(serde_json::to_string_pretty(&supers)? + "\n"))?;
            println!("{} records, {} classes", h.dataset.len(), h.dataset.num_classes());
        }
        Some(f) => {
            let bn = gen_base_novel(&spec, f, a.placement, a.seed)?;
            save_dataset(&bn.base, a.out.join("base"))?;
            save_dataset(&bn.novel, a.out.join("novel"))?;
            write(&a.out.join("placement.json"), &(serde_json::to_string_pretty(&bn.base_tags)? + "\n"))?;
            println!("base: {} classes, novel: {} classes", bn.base.num_classes(), bn.novel.num_classes());
        }
    }
    Ok(())
}

fn stats(a: StatsArgs) -> Result<()> {
    let ds = load(&a.dataset)?;
    let tests: Option<Vec<Vec<f64>>> = match &a.test_dataset {
        Some(p) => Some(prototypes(&load(p)?)?.into_values().collect()),
        None => None,
    };
    let stats = compute_class_stats(&ds, tests.as_deref(), a.holdout, a.seed)?;
    let mut buf = Vec::new();
    write_stats_csv(&stats, &mut buf)?;
    write(&a.out, std::str::from_utf8(&buf)?)
}

fn report_relabel(map: &fsdd::RelabelMap, out: &Path) -> Result<()> {
    save_relabel(map, out)?;
    println!("{} classes, imbalance {:.3}", map.num_classes(), imbalance(map));
    Ok(())
}

fn selection(ds: &EmbeddingDataset, test: &Path, spec: SelectionSpec, out: &Path) -> Result<()> {
    let test = load(test)?;
    let sel = select(ds, &test, &spec)?;
    save_dataset(&subset(ds, &sel.keep)?, out)?;
    let summary = serde_json::json!({
        "class_ids": sel.class_ids,
        "images_per_class": sel.per_class,
        "budget_remainder": sel.remainder,
        "selection": spec,
        "rng": fsdd::rng::ALGORITHM,
    });
    write(&out.join("selection.json"), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    if sel.remainder > 0 {
        println!("{} images of the budget unused", sel.remainder);
    }
    println!("{} classes x {} images", sel.class_ids.len(), sel.per_class);
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let ds = load(&a.dataset)?;
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?).with_context(|| format!("parsing {}", p.display()))?,
        None => TrainConfig::default(),
    };
    cfg.epochs = a.epochs.unwrap_or(cfg.epochs);
    cfg.learning_rate = a.lr.unwrap_or(cfg.learning_rate);
    cfg.batch_size = a.batch_size.unwrap_or(cfg.batch_size);
    cfg.seed = a.seed.unwrap_or(cfg.seed);
    if a.out_dim.is_some() {
        cfg.out_dim = a.out_dim;
    }
    let embedder = train_embedder(&ds, &cfg, a.kind)?;
    save_model(&embedder, &a.out)?;
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut ds = load(&a.dataset)?;
    if let Some(m) = &a.model {
        let model = load_model(m).with_context(|| format!("loading model {}", m.display()))?;
        ds = embed(&model, &ds)?;
    }
    let cfg = EvalConfig {
        classifier: a.classifier,
        way: a.nway,
        shot: a.kshot,
        query: a.query,
        episodes: a.episodes,
        seed: a.seed,
        topk: a.topk,
    };
    let workers = a.workers.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    let report = evaluate_with_workers(&ds, &cfg, workers)?;
    if let Some(p) = &a.out {
        write(p, &report.to_json())?;
    }
    if let Some(p) = &a.csv {
        write(p, &report.to_csv()?)?;
    }
    println!("{} {}-way {}-shot: {:.4} ± {:.4}", a.classifier, a.nway, a.kshot, report.mean_acc, report.ci95);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Synth(a) => synth(a),
        Command::Stats(a) => stats(a),
        Command::Split(a) => {
            if ![2, 4, 8].contains(&a.ratio) {
                bail!("split ratio must be 2, 4 or 8");
            }
            report_relabel(&bpc_split(&load(&a.dataset)?, a.ratio)?, &a.out)
        }
        Command::Group(a) => report_relabel(&greedy_group(&load(&a.dataset)?, a.ratio)?, &a.out),
        Command::Kmeans(a) => {
            let (map, fit) = kmeans_relabel(&load(&a.dataset)?, a.k, a.seed, a.max_iters)?;
            log::info!("k-means stopped after {} iterations", fit.iterations);
            report_relabel(&map, &a.out)
        }
        Command::Apply(a) => {
            let ds = load(&a.dataset)?;
            let map = load_relabel(&a.relabel)?;
            save_dataset(&apply_relabel(&ds, &map)?, &a.out)?;
            Ok(())
        }
        Command::Select(a) => {
            if a.mode == SelectionMode::Bin {
                bail!("use select-bin for decile selection");
            }
            let spec = SelectionSpec {
                mode: a.mode,
                count: a.classes,
                images_per_class: a.images.images_per_class,
                budget: a.images.budget,
                bin_index: None,
                bin_metric: None,
                distance_filter: None,
                seed: a.seed,
            };
            selection(&load(&a.dataset)?, &a.test_dataset, spec, &a.out)
        }
        Command::SelectBin(a) => {
            let spec = SelectionSpec {
                mode: SelectionMode::Bin,
                count: a.classes,
                images_per_class: a.images.images_per_class,
                budget: a.images.budget,
                bin_index: Some(a.bin),
                bin_metric: Some(a.metric),
                distance_filter: Some(a.band.unwrap_or(DEFAULT_BAND)),
                seed: a.seed,
            };
            selection(&load(&a.dataset)?, &a.test_dataset, spec, &a.out)
        }
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Run(a) => {
            let text = fs::read_to_string(&a.config).with_context(|| format!("reading {}", a.config.display()))?;
            let cfg = ExperimentConfig::from_json(&text)?;
            let out = run_experiment(&cfg, &a.out)?;
            println!("{} result rows, {} aggregate rows", out.rows.len(), out.aggregate.len());
            Ok(())
        }
    }
}
