//! Base-class selection: similarity to the test classes, fixed annotation
//! budgets, and metric deciles with a distance band.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{EmbeddingDataset, KeepMap};
use crate::error::{Error, Result};
use crate::rng;
use crate::stats::{compute_class_stats, distance_to_test, ClassStats, DEFAULT_HOLDOUT};

pub const NUM_BINS: usize = 10;
pub const DEFAULT_BAND: (f64, f64) = (0.4, 0.6);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    Random,
    Closest,
    Farthest,
    Bin,
}

impl std::str::FromStr for SelectionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(Self::Random),
            "closest" => Ok(Self::Closest),
            "farthest" => Ok(Self::Farthest),
            "bin" => Ok(Self::Bin),
            other => Err(Error::invalid(format!("unknown selection mode {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BinMetric {
    Diversity,
    Difficulty,
}

impl std::str::FromStr for BinMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "diversity" => Ok(Self::Diversity),
            "difficulty" => Ok(Self::Difficulty),
            other => Err(Error::invalid(format!("unknown bin metric {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionSpec {
    pub mode: SelectionMode,
    pub count: usize,
    pub images_per_class: Option<usize>,
    pub budget: Option<usize>,
    pub bin_index: Option<usize>,
    pub bin_metric: Option<BinMetric>,
    pub distance_filter: Option<(f64, f64)>,
    pub seed: u64,
}

impl SelectionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::invalid("selection count must be positive"));
        }
        match (self.images_per_class, self.budget) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(Error::invalid("set exactly one of images_per_class and budget"))
            }
            (Some(0), _) => return Err(Error::invalid("images_per_class must be positive")),
            _ => {}
        }
        if self.mode == SelectionMode::Bin {
            match self.bin_index {
                Some(b) if b < NUM_BINS => {}
                _ => return Err(Error::invalid(format!("bin mode needs bin_index in 0..{NUM_BINS}"))),
            }
            if self.bin_metric.is_none() {
                return Err(Error::invalid("bin mode needs bin_metric"));
            }
        }
        if let Some(band) = self.distance_filter {
            check_band(band)?;
        }
        Ok(())
    }

    /// Images kept per class once `count` classes are chosen.
    pub fn per_class(&self) -> Result<usize> {
        match (self.images_per_class, self.budget) {
            (Some(m), None) => Ok(m),
            (None, Some(b)) => per_class_for_budget(b, self.count),
            _ => Err(Error::invalid("set exactly one of images_per_class and budget")),
        }
    }
}

fn check_band((lo, hi): (f64, f64)) -> Result<()> {
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(Error::invalid(format!("band ({lo}, {hi}) must satisfy 0 <= lo <= hi <= 1")));
    }
    Ok(())
}

fn per_class_for_budget(budget: usize, classes: usize) -> Result<usize> {
    if classes == 0 {
        return Err(Error::invalid("budget needs at least one class"));
    }
    let m = budget / classes;
    if m == 0 {
        return Err(Error::invalid(format!("budget {budget} gives no image to each of {classes} classes")));
    }
    Ok(m)
}

fn distance_of(stats: &ClassStats, test_prototypes: &[Vec<f64>]) -> Result<f64> {
    match stats.dist_to_test {
        Some(d) => Ok(d),
        None => distance_to_test(&stats.prototype, test_prototypes),
    }
}

/// `count` class ids by distance to the test prototypes (closest first, or
/// farthest first) or uniformly at random. Ties go to the lowest class id;
/// random picks are returned in ascending id order.
pub fn select_by_similarity(
    pool: &[ClassStats],
    test_prototypes: &[Vec<f64>],
    mode: SelectionMode,
    count: usize,
    seed: u64,
) -> Result<Vec<u32>> {
    if count > pool.len() {
        return Err(Error::invalid(format!("cannot select {count} classes from a pool of {}", pool.len())));
    }
    let mut ranked: Vec<(f64, u32)> = Vec::with_capacity(pool.len());
    match mode {
        SelectionMode::Random => {
            let mut ids: Vec<u32> = pool.iter().map(|s| s.class_id).collect();
            ids.sort_unstable();
            let mut r = rng::seeded(seed);
            let mut picked: Vec<u32> = rng::sample_without_replacement(&mut r, ids.len(), count)
                .into_iter()
                .map(|i| ids[i])
                .collect();
            picked.sort_unstable();
            return Ok(picked);
        }
        SelectionMode::Closest | SelectionMode::Farthest => {
            for s in pool {
                ranked.push((distance_of(s, test_prototypes)?, s.class_id));
            }
        }
        SelectionMode::Bin => return Err(Error::invalid("bin mode selects through bin_by_metric")),
    }
    let farthest = mode == SelectionMode::Farthest;
    ranked.sort_by(|a, b| {
        let by_distance = if farthest { b.0.total_cmp(&a.0) } else { a.0.total_cmp(&b.0) };
        by_distance.then(a.1.cmp(&b.1))
    });
    Ok(ranked.into_iter().take(count).map(|(_, id)| id).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct BudgetSample {
    pub keep: KeepMap,
    pub per_class: usize,
    /// Images of the budget left unused by the floor rule.
    pub remainder: usize,
}

/// `⌊budget / |class_ids|⌋` records per class, sampled without replacement.
/// Class `c` draws from the generator keyed by `(seed, c)`.
pub fn budget_sample(ds: &EmbeddingDataset, class_ids: &[u32], budget: usize, seed: u64) -> Result<BudgetSample> {
    let m = per_class_for_budget(budget, class_ids.len())?;
    let keep = sample_per_class(ds, class_ids, m, seed)?;
    Ok(BudgetSample {
        keep,
        per_class: m,
        remainder: budget - m * class_ids.len(),
    })
}

/// `m` records per listed class, sampled as in [`budget_sample`].
pub fn sample_per_class(ds: &EmbeddingDataset, class_ids: &[u32], m: usize, seed: u64) -> Result<KeepMap> {
    let members = ds.members_by_class();
    let mut keep = KeepMap::new();
    for &c in class_ids {
        let pool = members.get(&c).ok_or(Error::UnknownClass(c))?;
        if pool.len() < m {
            return Err(Error::ClassTooSmall {
                class: c,
                have: pool.len(),
                need: m,
            });
        }
        let mut r = rng::keyed(seed, c as u64);
        let picked: BTreeSet<usize> = rng::sample_without_replacement(&mut r, pool.len(), m)
            .into_iter()
            .map(|i| pool[i])
            .collect();
        if keep.insert(c, picked).is_some() {
            return Err(Error::invalid(format!("class {c} listed twice")));
        }
    }
    Ok(keep)
}

fn metric_of(s: &ClassStats, metric: BinMetric) -> Result<f64> {
    let v = match metric {
        BinMetric::Diversity => s.diversity,
        BinMetric::Difficulty => s.difficulty,
    };
    if v.is_nan() {
        return Err(Error::invalid(format!("class {} has no {metric:?} value", s.class_id)));
    }
    Ok(v)
}

/// Ten contiguous bins of the pool sorted ascending by `metric` (ties by
/// class id). The first `len % 10` bins hold one extra class.
pub fn bin_by_metric(pool: &[ClassStats], metric: BinMetric) -> Result<Vec<Vec<u32>>> {
    if pool.len() < NUM_BINS {
        return Err(Error::invalid(format!("binning needs at least {NUM_BINS} classes, pool has {}", pool.len())));
    }
    let mut ranked = pool
        .iter()
        .map(|s| Ok((metric_of(s, metric)?, s.class_id)))
        .collect::<Result<Vec<_>>>()?;
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let base = ranked.len() / NUM_BINS;
    let extra = ranked.len() % NUM_BINS;
    let mut bins = Vec::with_capacity(NUM_BINS);
    let mut it = ranked.into_iter().map(|(_, id)| id);
    for b in 0..NUM_BINS {
        let size = base + usize::from(b < extra);
        bins.push(it.by_ref().take(size).collect());
    }
    Ok(bins)
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Samples `count` classes of `bin` whose distance to the test classes lies in
/// the `[q_lo, q_hi]` quantile band of the whole pool's distances.
pub fn distance_filtered_sample(
    bin: &[u32],
    pool: &[ClassStats],
    test_prototypes: &[Vec<f64>],
    count: usize,
    band: (f64, f64),
    seed: u64,
) -> Result<Vec<u32>> {
    check_band(band)?;
    if pool.is_empty() {
        return Err(Error::Empty("class pool"));
    }
    let distances: BTreeMap<u32, f64> = pool
        .iter()
        .map(|s| Ok((s.class_id, distance_of(s, test_prototypes)?)))
        .collect::<Result<_>>()?;
    let mut sorted: Vec<f64> = distances.values().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let lo = quantile(&sorted, band.0);
    let hi = quantile(&sorted, band.1);
    let mut eligible = Vec::new();
    for &c in bin {
        let d = *distances.get(&c).ok_or(Error::UnknownClass(c))?;
        if d >= lo && d <= hi {
            eligible.push(c);
        }
    }
    eligible.sort_unstable();
    if eligible.len() < count {
        return Err(Error::FilteredTooSmall {
            remaining: eligible.len(),
            requested: count,
        });
    }
    let mut r = rng::seeded(seed);
    let mut picked: Vec<u32> = rng::sample_without_replacement(&mut r, eligible.len(), count)
        .into_iter()
        .map(|i| eligible[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Selection {
    pub class_ids: Vec<u32>,
    pub per_class: usize,
    pub remainder: usize,
    pub keep: KeepMap,
}

/// Runs a whole [`SelectionSpec`] against a base pool and the test set.
pub fn select(base: &EmbeddingDataset, test: &EmbeddingDataset, spec: &SelectionSpec) -> Result<Selection> {
    spec.validate()?;
    let test_prototypes: Vec<Vec<f64>> = crate::stats::prototypes(test)?.into_values().collect();
    if test_prototypes.is_empty() {
        return Err(Error::Empty("test dataset"));
    }
    let pool = compute_class_stats(base, Some(&test_prototypes), DEFAULT_HOLDOUT, spec.seed)?;
    let class_ids = match spec.mode {
        SelectionMode::Bin => {
            let metric = spec.bin_metric.expect("validated");
            let bins = bin_by_metric(&pool, metric)?;
            let bin = &bins[spec.bin_index.expect("validated")];
            let band = spec.distance_filter.unwrap_or((0.0, 1.0));
            distance_filtered_sample(bin, &pool, &test_prototypes, spec.count, band, spec.seed)?
        }
        mode => select_by_similarity(&pool, &test_prototypes, mode, spec.count, spec.seed)?,
    };
    let per_class = spec.per_class()?;
    let keep = sample_per_class(base, &class_ids, per_class, spec.seed)?;
    let remainder = spec.budget.map_or(0, |b| b - per_class * class_ids.len());
    Ok(Selection {
        class_ids,
        per_class,
        remainder,
        keep,
    })
}
