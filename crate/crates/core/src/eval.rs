//! Episodic N-way K-shot evaluation.
//!
//! Episode `i` of a run with seed `s` draws from the generator keyed by
//! `(s, i)`, so any episode can be regenerated alone and episodes can be
//! evaluated in parallel. Per-episode accuracies are aggregated in episode
//! order, which keeps reports bit-identical across thread counts.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::stats::class_prototype;
use crate::vector::{dot, normalized, squared_distance, top_k, widen};

/// Classes that cannot supply `k + q` records are skipped at most this many
/// times per episode.
pub const MAX_CLASS_RETRIES: usize = 100;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Episode {
    pub way: usize,
    pub shot: usize,
    pub query_per_class: usize,
    /// `support[c]` holds the `shot` record ids of episode-class `c`.
    pub support: Vec<Vec<usize>>,
    /// `query[c]` holds the `query_per_class` record ids of episode-class `c`.
    pub query: Vec<Vec<usize>>,
    pub class_ids: Vec<u32>,
}

impl Episode {
    /// `(record, true episode-class)` for every query, class by class.
    pub fn queries(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.query
            .iter()
            .enumerate()
            .flat_map(|(c, rs)| rs.iter().map(move |&r| (r, c)))
    }
}

pub fn sample_episode(novel: &EmbeddingDataset, way: usize, shot: usize, query: usize, seed: u64, index: u64) -> Result<Episode> {
    if way == 0 || shot == 0 {
        return Err(Error::invalid("way and shot must be positive"));
    }
    let groups: Vec<(u32, Vec<usize>)> = novel.members_by_class().into_iter().filter(|(_, m)| !m.is_empty()).collect();
    if groups.len() < way {
        return Err(Error::invalid(format!(
            "{way}-way episodes need {way} classes, dataset has {}",
            groups.len()
        )));
    }
    let need = shot + query;
    let mut r = rng::keyed(seed, index);
    let order = rng::sample_without_replacement(&mut r, groups.len(), groups.len());
    let mut chosen = Vec::with_capacity(way);
    let mut skipped = 0;
    for g in order {
        if chosen.len() == way {
            break;
        }
        if groups[g].1.len() >= need {
            chosen.push(g);
        } else {
            skipped += 1;
            if skipped > MAX_CLASS_RETRIES {
                break;
            }
        }
    }
    if chosen.len() < way {
        return Err(Error::invalid(format!(
            "could not find {way} classes with at least {need} records each"
        )));
    }
    let mut support = Vec::with_capacity(way);
    let mut queries = Vec::with_capacity(way);
    let mut class_ids = Vec::with_capacity(way);
    for g in chosen {
        let members = &groups[g].1;
        let picks: Vec<usize> = rng::sample_without_replacement(&mut r, members.len(), need)
            .into_iter()
            .map(|i| members[i])
            .collect();
        support.push(picks[..shot].to_vec());
        queries.push(picks[shot..].to_vec());
        class_ids.push(groups[g].0);
    }
    Ok(Episode {
        way,
        shot,
        query_per_class: query,
        support,
        query: queries,
        class_ids,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Classifier {
    /// Cosine classifier: mean of normalized support vectors, dot with the
    /// normalized query.
    Cc,
    /// Negative ℓ2 distance to the mean of raw support vectors.
    Proto,
    /// Softmax attention over support cosines, summed per class.
    Matching,
}

impl std::str::FromStr for Classifier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cc" => Ok(Self::Cc),
            "proto" => Ok(Self::Proto),
            "matching" => Ok(Self::Matching),
            other => Err(Error::invalid(format!("unknown classifier {other:?}"))),
        }
    }
}

impl std::fmt::Display for Classifier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Classifier::Cc => "cc",
            Classifier::Proto => "proto",
            Classifier::Matching => "matching",
        })
    }
}

fn unit(ds: &EmbeddingDataset, r: usize) -> Result<Vec<f64>> {
    normalized(&widen(ds.vector(r))).ok_or(Error::ZeroVector)
}

/// Prepared per-class state for scoring one episode's queries.
enum Scorer {
    Cc(Vec<Vec<f64>>),
    Proto(Vec<Vec<f64>>),
    Matching { units: Vec<Vec<f64>>, owner: Vec<usize>, way: usize },
}

impl Scorer {
    fn new(classifier: Classifier, episode: &Episode, ds: &EmbeddingDataset) -> Result<Self> {
        Ok(match classifier {
            Classifier::Cc => Scorer::Cc(
                episode
                    .support
                    .iter()
                    .map(|rs| {
                        let rows: Vec<&[f32]> = rs.iter().map(|&r| ds.vector(r)).collect();
                        class_prototype(&rows)
                    })
                    .collect::<Result<_>>()?,
            ),
            Classifier::Proto => Scorer::Proto(
                episode
                    .support
                    .iter()
                    .map(|rs| {
                        let mut c = vec![0.0; ds.dim()];
                        for &r in rs {
                            c.iter_mut().zip(ds.vector(r)).for_each(|(a, &x)| *a += x as f64);
                        }
                        c.iter_mut().for_each(|a| *a /= rs.len() as f64);
                        c
                    })
                    .collect(),
            ),
            Classifier::Matching => {
                let mut units = Vec::new();
                let mut owner = Vec::new();
                for (c, rs) in episode.support.iter().enumerate() {
                    for &r in rs {
                        units.push(unit(ds, r)?);
                        owner.push(c);
                    }
                }
                Scorer::Matching {
                    units,
                    owner,
                    way: episode.way,
                }
            }
        })
    }

    fn scores(&self, ds: &EmbeddingDataset, r: usize) -> Result<Vec<f64>> {
        Ok(match self {
            Scorer::Cc(protos) => {
                let q = unit(ds, r)?;
                protos.iter().map(|p| dot(&q, p)).collect()
            }
            Scorer::Proto(centroids) => {
                let q = widen(ds.vector(r));
                centroids.iter().map(|c| -squared_distance(&q, c)).collect()
            }
            Scorer::Matching { units, owner, way } => {
                let q = unit(ds, r)?;
                let weights = attention(&q, units);
                let mut out = vec![0.0; *way];
                for (a, &c) in weights.iter().zip(owner) {
                    out[c] += a;
                }
                out
            }
        })
    }
}

/// Softmax over the cosines between `query` (unit) and each unit support vector.
pub fn attention(query: &[f64], support_units: &[Vec<f64>]) -> Vec<f64> {
    let cos: Vec<f64> = support_units.iter().map(|s| dot(query, s)).collect();
    let max = cos.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = cos.iter().map(|c| (c - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / total).collect()
}

/// Per-query class scores (higher is better), queries in [`Episode::queries`] order.
pub fn class_scores(classifier: Classifier, episode: &Episode, ds: &EmbeddingDataset) -> Result<Vec<Vec<f64>>> {
    let scorer = Scorer::new(classifier, episode, ds)?;
    episode.queries().map(|(r, _)| scorer.scores(ds, r)).collect()
}

/// Top-1 predicted episode-class per query; ties go to the lowest index.
pub fn classify(classifier: Classifier, episode: &Episode, ds: &EmbeddingDataset) -> Result<Vec<usize>> {
    Ok(class_scores(classifier, episode, ds)?
        .iter()
        .map(|s| top_k(s, 1)[0])
        .collect())
}

pub fn cc_classify(episode: &Episode, ds: &EmbeddingDataset) -> Result<Vec<usize>> {
    classify(Classifier::Cc, episode, ds)
}

pub fn proto_classify(episode: &Episode, ds: &EmbeddingDataset) -> Result<Vec<usize>> {
    classify(Classifier::Proto, episode, ds)
}

pub fn matching_classify(episode: &Episode, ds: &EmbeddingDataset) -> Result<Vec<usize>> {
    classify(Classifier::Matching, episode, ds)
}

/// Fraction of queries whose true class is among the `topk` best scores.
pub fn episode_accuracy(classifier: Classifier, episode: &Episode, ds: &EmbeddingDataset, topk: usize) -> Result<f64> {
    let scores = class_scores(classifier, episode, ds)?;
    let mut correct = 0usize;
    for ((_, truth), s) in episode.queries().zip(&scores) {
        if top_k(s, topk).contains(&truth) {
            correct += 1;
        }
    }
    Ok(correct as f64 / scores.len().max(1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub classifier: Classifier,
    pub way: usize,
    pub shot: usize,
    pub query: usize,
    pub episodes: usize,
    pub seed: u64,
    pub topk: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            classifier: Classifier::Cc,
            way: 5,
            shot: 5,
            query: 15,
            episodes: 10_000,
            seed: 0,
            topk: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub rng: String,
    pub n_episodes: usize,
    pub mean_acc: f64,
    pub ci95: f64,
    pub accuracies: Vec<f64>,
}

/// Mean and 95% normal-approximation half-width `1.96 · sd / √n` (sample
/// standard deviation; 0 for a single value).
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mut sum = 0.0;
    for v in values {
        sum += v;
    }
    let mean = sum / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let mut ss = 0.0;
    for v in values {
        ss += (v - mean) * (v - mean);
    }
    let sd = (ss / (n - 1) as f64).sqrt();
    (mean, 1.96 * sd / (n as f64).sqrt())
}

impl EvalReport {
    pub fn from_accuracies(config: EvalConfig, accuracies: Vec<f64>) -> Self {
        let (mean_acc, ci95) = mean_ci95(&accuracies);
        Self {
            config,
            rng: rng::ALGORITHM.into(),
            n_episodes: accuracies.len(),
            mean_acc,
            ci95,
            accuracies,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// Header plus one row: classifier, nway, kshot, query, episodes, seed, mean_acc, ci95.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["classifier", "nway", "kshot", "query", "episodes", "seed", "mean_acc", "ci95"])?;
        let c = &self.config;
        w.write_record([
            c.classifier.to_string(),
            c.way.to_string(),
            c.shot.to_string(),
            c.query.to_string(),
            self.n_episodes.to_string(),
            c.seed.to_string(),
            self.mean_acc.to_string(),
            self.ci95.to_string(),
        ])?;
        let bytes = w.into_inner().map_err(|e| Error::Csv(e.into_error().into()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

/// Runs episodes `0..cfg.episodes` on the current rayon pool.
pub fn evaluate(novel: &EmbeddingDataset, cfg: &EvalConfig) -> Result<EvalReport> {
    if cfg.topk == 0 || cfg.topk > cfg.way {
        return Err(Error::invalid(format!("topk must be in 1..={}", cfg.way)));
    }
    let accuracies = (0..cfg.episodes as u64)
        .into_par_iter()
        .map(|i| {
            let ep = sample_episode(novel, cfg.way, cfg.shot, cfg.query, cfg.seed, i)?;
            episode_accuracy(cfg.classifier, &ep, novel, cfg.topk)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(EvalReport::from_accuracies(cfg.clone(), accuracies))
}

/// [`evaluate`] on a dedicated pool of `workers` threads.
pub fn evaluate_with_workers(novel: &EmbeddingDataset, cfg: &EvalConfig, workers: usize) -> Result<EvalReport> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    pool.install(|| evaluate(novel, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ds(rows: &[[f32; 2]], labels: &[u32]) -> EmbeddingDataset {
        EmbeddingDataset::from_rows(rows, labels.to_vec()).unwrap()
    }

    fn manual(support: Vec<Vec<usize>>, query: Vec<Vec<usize>>) -> Episode {
        Episode {
            way: support.len(),
            shot: support[0].len(),
            query_per_class: query[0].len(),
            class_ids: (0..support.len() as u32).collect(),
            support,
            query,
        }
    }

    fn grid(classes: usize, per: usize) -> EmbeddingDataset {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..classes {
            for i in 0..per {
                let a = c as f32 + 0.01 * i as f32;
                rows.push([a.cos(), a.sin()]);
                labels.push(c as u32);
            }
        }
        ds(&rows, &labels)
    }

    #[test]
    fn episode_shape_and_disjointness() {
        let d = grid(8, 20);
        let ep = sample_episode(&d, 5, 1, 15, 3, 0).unwrap();
        assert_eq!(ep.support.iter().map(Vec::len).sum::<usize>(), 5);
        assert_eq!(ep.query.iter().map(Vec::len).sum::<usize>(), 75);
        let mut all: Vec<usize> = ep.support.concat();
        all.extend(ep.query.concat());
        let n = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), n);
        for (c, rs) in ep.support.iter().chain(&ep.query).enumerate() {
            let class = ep.class_ids[c % 5];
            assert!(rs.iter().all(|&r| d.label(r) == class));
        }
        assert_eq!(ep, sample_episode(&d, 5, 1, 15, 3, 0).unwrap());
        assert_ne!(ep, sample_episode(&d, 5, 1, 15, 3, 1).unwrap());
    }

    #[test]
    fn boundary_class_uses_every_record() {
        let d = grid(5, 16);
        let ep = sample_episode(&d, 5, 1, 15, 0, 0).unwrap();
        let mut all: Vec<usize> = ep.support.concat();
        all.extend(ep.query.concat());
        assert_eq!(all.len(), 80);
    }

    #[test]
    fn sampling_errors() {
        let d = grid(4, 20);
        assert!(sample_episode(&d, 5, 1, 15, 0, 0).is_err());
        let small = grid(6, 10);
        assert!(sample_episode(&small, 5, 1, 15, 0, 0).is_err());
    }

    #[test]
    fn short_classes_are_skipped() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..7u32 {
            let per = if c % 3 == 0 { 3 } else { 20 };
            for i in 0..per {
                rows.push([c as f32 + 1.0, i as f32]);
                labels.push(c);
            }
        }
        let d = ds(&rows, &labels);
        for i in 0..20 {
            let ep = sample_episode(&d, 4, 5, 10, 1, i).unwrap();
            assert!(ep.class_ids.iter().all(|c| c % 3 != 0));
        }
    }

    #[test]
    fn cc_examples() {
        let d = ds(&[[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]], &[0, 1, 0]);
        let ep = manual(vec![vec![0], vec![1]], vec![vec![2], vec![1]]);
        assert_eq!(cc_classify(&ep, &d).unwrap(), vec![0, 1]);
        // equidistant query goes to the first class
        let d = ds(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], &[0, 1, 0]);
        let ep = manual(vec![vec![0], vec![1]], vec![vec![2], vec![]]);
        assert_eq!(cc_classify(&ep, &d).unwrap(), vec![0]);
    }

    #[test]
    fn proto_examples() {
        let d = ds(&[[0.0, 0.0], [2.0, 0.0], [4.0, 4.0], [6.0, 4.0], [5.0, 4.0]], &[0, 0, 1, 1, 1]);
        let ep = manual(vec![vec![0, 1], vec![2, 3]], vec![vec![], vec![4]]);
        assert_eq!(proto_classify(&ep, &d).unwrap(), vec![1]);
        let d = ds(&[[1.0, 0.0], [-1.0, 0.0], [0.0, 3.0]], &[0, 1, 0]);
        let ep = manual(vec![vec![0], vec![1]], vec![vec![2], vec![]]);
        assert_eq!(proto_classify(&ep, &d).unwrap(), vec![0]);
    }

    #[test]
    fn matching_examples() {
        let d = ds(&[[1.0, 0.0], [0.0, 1.0], [0.0, 2.0]], &[0, 1, 1]);
        let ep = manual(vec![vec![0], vec![1]], vec![vec![], vec![2]]);
        assert_eq!(matching_classify(&ep, &d).unwrap(), vec![1]);
        let d = ds(&[[1.0, 1.0], [1.0, 1.0], [0.3, 0.9]], &[0, 1, 1]);
        let ep = manual(vec![vec![0], vec![1]], vec![vec![], vec![2]]);
        assert_eq!(matching_classify(&ep, &d).unwrap(), vec![0]);
        let scores = class_scores(Classifier::Matching, &ep, &d).unwrap();
        assert!((scores[0][0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn offset_invariance_of_proto_but_not_cc() {
        let shift = |dx: f32, dy: f32| ds(&[[2.0 + dx, dy], [dx, 2.0 + dy], [1.5 + dx, 0.9 + dy]], &[0, 1, 0]);
        let ep = manual(vec![vec![0], vec![1]], vec![vec![2], vec![]]);
        let plain = shift(0.0, 0.0);
        let moved = shift(-1.7, -0.3);
        assert_eq!(proto_classify(&ep, &plain).unwrap(), vec![0]);
        assert_eq!(proto_classify(&ep, &moved).unwrap(), vec![0]);
        assert_eq!(cc_classify(&ep, &plain).unwrap(), vec![0]);
        // the origin now sits between the query and its class
        assert_eq!(cc_classify(&ep, &moved).unwrap(), vec![1]);
    }

    #[test]
    fn ci_formula() {
        let (m, ci) = mean_ci95(&[0.0, 1.0]);
        assert_eq!(m, 0.5);
        assert!((ci - 1.96 * 0.5f64.sqrt() / 2f64.sqrt()).abs() < 1e-15);
        assert!((ci - 0.98).abs() < 1e-3);
        assert_eq!(mean_ci95(&[0.3]), (0.3, 0.0));
    }

    #[test]
    fn orthogonal_constant_classes_are_perfect() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for c in 0..6usize {
            for _ in 0..20 {
                let mut v = [0.0f32; 6];
                v[c] = 1.0;
                rows.push(v);
                labels.push(c as u32);
            }
        }
        let d = EmbeddingDataset::from_rows(&rows, labels).unwrap();
        for classifier in [Classifier::Cc, Classifier::Proto, Classifier::Matching] {
            let cfg = EvalConfig {
                classifier,
                episodes: 50,
                ..Default::default()
            };
            let report = evaluate(&d, &cfg).unwrap();
            assert_eq!(report.mean_acc, 1.0);
            assert_eq!(report.ci95, 0.0);
        }
        let csv = evaluate(&d, &EvalConfig { episodes: 3, ..Default::default() }).unwrap().to_csv().unwrap();
        assert_eq!(csv, "classifier,nway,kshot,query,episodes,seed,mean_acc,ci95\ncc,5,5,15,3,0,1,0\n");
    }

    #[test]
    fn topk_bounds() {
        let d = grid(6, 20);
        let cfg = EvalConfig { topk: 6, episodes: 2, ..Default::default() };
        assert!(evaluate(&d, &cfg).is_err());
        let cfg = EvalConfig { topk: 5, episodes: 2, ..Default::default() };
        assert_eq!(evaluate(&d, &cfg).unwrap().mean_acc, 1.0);
    }
}
