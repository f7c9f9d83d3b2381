//! Class relabeling over a fixed image set.
//!
//! * [`bpc_split`]: recursive bisection of every class along its top
//!   principal component, cutting at the median so sub-classes stay balanced.
//! * [`greedy_group`]: repeated pairing of the two most similar classes
//!   (cosine of prototypes) into meta-classes, one pass per halving.
//! * [`kmeans_relabel`]: plain Lloyd K-means on normalized vectors. It
//!   produces unbalanced clusters and serves as the comparison baseline.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::dataset::{EmbeddingDataset, Provenance, RelabelMap};
use crate::error::{Error, Result};
use crate::rng;
use crate::stats::{class_prototype, class_similarity};
use crate::vector::{dot, norm, normalized, squared_distance, widen};

const POWER_ITERATIONS: usize = 100;
const POWER_TOLERANCE: f64 = 1e-10;

/// Top principal direction of `rows` (mean-centered internally), or `None`
/// when the rows have no variance.
///
/// Power iteration on the covariance, started from its largest-norm column
/// (ties to the lowest index). The sign is fixed so the largest-magnitude
/// coordinate is positive, again breaking ties by lowest index.
pub fn principal_direction(rows: &[Vec<f64>]) -> Option<Vec<f64>> {
    let m = rows.len();
    if m == 0 {
        return None;
    }
    let dim = rows[0].len();
    let mean: Vec<f64> = (0..dim).map(|d| rows.iter().map(|r| r[d]).sum::<f64>() / m as f64).collect();
    let mut cov = vec![0.0; dim * dim];
    let mut centered = vec![0.0; dim];
    let mut scale = 0.0;
    for r in rows {
        for d in 0..dim {
            centered[d] = r[d] - mean[d];
        }
        scale += dot(r, r);
        for i in 0..dim {
            let ci = centered[i];
            if ci == 0.0 {
                continue;
            }
            let row = &mut cov[i * dim..(i + 1) * dim];
            for (c, x) in row.iter_mut().zip(&centered) {
                *c += ci * x;
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= m as f64);
    let trace: f64 = (0..dim).map(|i| cov[i * dim + i]).sum();
    if trace <= 1e-24 * (1.0 + scale / m as f64) {
        return None;
    }

    let column = |j: usize| -> Vec<f64> { (0..dim).map(|i| cov[i * dim + j]).collect() };
    let mut best = 0;
    let mut best_norm = norm(&column(0));
    for j in 1..dim {
        let n = norm(&column(j));
        if n > best_norm {
            best = j;
            best_norm = n;
        }
    }
    let mut v = normalized(&column(best))?;
    for _ in 0..POWER_ITERATIONS {
        let next: Vec<f64> = (0..dim).map(|i| dot(&cov[i * dim..(i + 1) * dim], &v)).collect();
        let next = normalized(&next)?;
        let change = next.iter().zip(&v).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        v = next;
        if change < POWER_TOLERANCE {
            break;
        }
    }
    canonicalize_sign(&mut v);
    Some(v)
}

fn canonicalize_sign(v: &mut [f64]) {
    let mut lead = 0;
    for i in 1..v.len() {
        if v[i].abs() > v[lead].abs() {
            lead = i;
        }
    }
    if v[lead] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// One node of a class's bisection tree.
#[derive(Clone, Debug, PartialEq)]
pub enum SplitNode {
    Leaf {
        members: Vec<usize>,
    },
    Branch {
        /// `None` when the members had no variance and were cut by record order.
        direction: Option<Vec<f64>>,
        /// Midpoint between the last left and first right projection of the raw
        /// vectors onto `direction`.
        threshold: f64,
        left: Box<SplitNode>,
        right: Box<SplitNode>,
    },
}

impl SplitNode {
    /// Leaf member sets, left to right.
    pub fn leaves(&self) -> Vec<&[usize]> {
        match self {
            SplitNode::Leaf { members } => vec![members.as_slice()],
            SplitNode::Branch { left, right, .. } => {
                let mut out = left.leaves();
                out.extend(right.leaves());
                out
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitTree {
    pub class_id: u32,
    pub root: SplitNode,
}

/// Splits `members` (record ids, ascending) into halves: sorted ascending by
/// projection on the principal direction, ties by record id, the first
/// `⌈m/2⌉` go left.
pub fn bisect(ds: &EmbeddingDataset, members: &[usize]) -> (Option<Vec<f64>>, f64, Vec<usize>, Vec<usize>) {
    let rows: Vec<Vec<f64>> = members.iter().map(|&r| ds.vector_f64(r)).collect();
    let cut = members.len().div_ceil(2);
    let Some(direction) = principal_direction(&rows) else {
        log::warn!("zero-variance class of {} records split by record order", members.len());
        let mut sorted = members.to_vec();
        sorted.sort_unstable();
        let right = sorted.split_off(cut);
        return (None, f64::NAN, sorted, right);
    };
    let mut order: Vec<(f64, usize)> = rows.iter().zip(members).map(|(x, &r)| (dot(x, &direction), r)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let threshold = if cut < order.len() {
        0.5 * (order[cut - 1].0 + order[cut].0)
    } else {
        order[cut - 1].0
    };
    let mut left: Vec<usize> = order[..cut].iter().map(|p| p.1).collect();
    let mut right: Vec<usize> = order[cut..].iter().map(|p| p.1).collect();
    left.sort_unstable();
    right.sort_unstable();
    (Some(direction), threshold, left, right)
}

fn split_recursive(ds: &EmbeddingDataset, members: Vec<usize>, depth: u32) -> SplitNode {
    if depth == 0 {
        return SplitNode::Leaf { members };
    }
    let (direction, threshold, left, right) = bisect(ds, &members);
    SplitNode::Branch {
        direction,
        threshold,
        left: Box::new(split_recursive(ds, left, depth - 1)),
        right: Box::new(split_recursive(ds, right, depth - 1)),
    }
}

fn split_depth(ratio: u32) -> Result<u32> {
    if ratio < 2 || !ratio.is_power_of_two() {
        return Err(Error::invalid(format!("split ratio must be a power of two >= 2, got {ratio}")));
    }
    Ok(ratio.trailing_zeros())
}

/// BPC splitting, returning the bisection trees alongside the map.
///
/// Sub-class `j` of the class at table position `i` gets id `i·ratio + j`,
/// leaves numbered left to right.
pub fn bpc_split_trees(ds: &EmbeddingDataset, ratio: u32) -> Result<(RelabelMap, Vec<SplitTree>)> {
    let depth = split_depth(ratio)?;
    let groups = ds.members_by_class();
    for (&class, members) in &groups {
        if members.len() < ratio as usize {
            return Err(Error::ClassTooSmall {
                class,
                have: members.len(),
                need: ratio as usize,
            });
        }
    }
    let mut new_class_of = vec![0u32; ds.len()];
    let mut names = BTreeMap::new();
    let mut trees = Vec::new();
    for (pos, (class, members)) in groups.into_iter().enumerate() {
        let root = split_recursive(ds, members, depth);
        let base_name = &ds.class(class).expect("class from table").name;
        for (leaf_idx, leaf) in root.leaves().into_iter().enumerate() {
            let id = pos as u32 * ratio + leaf_idx as u32;
            for &r in leaf {
                new_class_of[r] = id;
            }
            names.insert(id, format!("{base_name}/{leaf_idx:0width$b}", width = depth as usize));
        }
        trees.push(SplitTree { class_id: class, root });
    }
    let map = RelabelMap::from_assignment(
        new_class_of,
        |id| names.get(&id).cloned().unwrap_or_default(),
        Provenance::Split { ratio },
    );
    Ok((map, trees))
}

/// Splits every class into `ratio` balanced sub-classes along principal components.
pub fn bpc_split(ds: &EmbeddingDataset, ratio: u32) -> Result<RelabelMap> {
    bpc_split_trees(ds, ratio).map(|(map, _)| map)
}

/// Result of one greedy pairing pass over items `0..n`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pairing {
    /// Merged pairs `(i, j)` with `i < j`, in merge order.
    pub merges: Vec<(usize, usize)>,
    pub leftover: Option<usize>,
}

/// Repeatedly pairs the two most cosine-similar unprocessed items; ties go
/// to the lexicographically lowest `(i, j)`.
pub fn greedy_pairing<P: AsRef<[f64]>>(prototypes: &[P]) -> Result<Pairing> {
    let n = prototypes.len();
    let mut pairs: Vec<(f64, u32, u32)> = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            let s = class_similarity(prototypes[i].as_ref(), prototypes[j].as_ref())?;
            pairs.push((s, i as u32, j as u32));
        }
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut done = vec![false; n];
    let mut merges = Vec::with_capacity(n / 2);
    for (_, i, j) in pairs {
        let (i, j) = (i as usize, j as usize);
        if !done[i] && !done[j] {
            done[i] = true;
            done[j] = true;
            merges.push((i, j));
            if merges.len() == n / 2 {
                break;
            }
        }
    }
    let leftover = done.iter().position(|d| !d);
    Ok(Pairing { merges, leftover })
}

fn group_passes(ratio: f64) -> Result<u32> {
    let inv = 1.0 / ratio;
    let rounded = inv.round();
    if !(ratio > 0.0) || (inv - rounded).abs() > 1e-9 || rounded < 2.0 || !(rounded as u64).is_power_of_two() {
        return Err(Error::invalid(format!(
            "group ratio must be a reciprocal power of two <= 1/2, got {ratio}"
        )));
    }
    Ok((rounded as u64).trailing_zeros())
}

/// Greedy grouping with the per-pass pairings.
///
/// Meta-classes are ordered by their smallest member table position; a
/// meta-class's prototype for the next pass is the unweighted mean of its
/// original member-class prototypes. Final meta-class `i` gets id `i`.
pub fn greedy_group_detailed(ds: &EmbeddingDataset, ratio: f64) -> Result<(RelabelMap, Vec<Pairing>)> {
    let passes = group_passes(ratio)?;
    let groups: Vec<(u32, Vec<usize>)> = ds.members_by_class().into_iter().filter(|(_, m)| !m.is_empty()).collect();
    if groups.len() < 2 {
        return Err(Error::invalid("grouping needs at least two classes"));
    }
    let base: Vec<Vec<f64>> = groups
        .iter()
        .map(|(_, m)| {
            let rows: Vec<&[f32]> = m.iter().map(|&r| ds.vector(r)).collect();
            class_prototype(&rows)
        })
        .collect::<Result<_>>()?;

    let mut metas: Vec<Vec<usize>> = (0..groups.len()).map(|i| vec![i]).collect();
    let mut history = Vec::new();
    for _ in 0..passes {
        let protos: Vec<Vec<f64>> = metas
            .iter()
            .map(|members| {
                let mut p = vec![0.0; ds.dim()];
                for &c in members {
                    p.iter_mut().zip(&base[c]).for_each(|(a, x)| *a += x);
                }
                p.iter_mut().for_each(|a| *a /= members.len() as f64);
                p
            })
            .collect();
        let pairing = greedy_pairing(&protos)?;
        let mut next: Vec<Vec<usize>> = pairing
            .merges
            .iter()
            .map(|&(i, j)| {
                let mut m = metas[i].clone();
                m.extend(&metas[j]);
                m.sort_unstable();
                m
            })
            .collect();
        if let Some(l) = pairing.leftover {
            next.push(metas[l].clone());
        }
        next.sort_by_key(|m| m[0]);
        metas = next;
        history.push(pairing);
    }

    let mut new_class_of = vec![0u32; ds.len()];
    let mut names = Vec::with_capacity(metas.len());
    for (meta_id, members) in metas.iter().enumerate() {
        for &c in members {
            for &r in &groups[c].1 {
                new_class_of[r] = meta_id as u32;
            }
        }
        let label: Vec<&str> = members
            .iter()
            .map(|&c| ds.class(groups[c].0).expect("class from table").name.as_str())
            .collect();
        names.push(label.join("+"));
    }
    let map = RelabelMap::from_assignment(new_class_of, |id| names[id as usize].clone(), Provenance::Group { ratio, passes });
    Ok((map, history))
}

/// Groups classes into `ratio · C` meta-classes (rounded up for odd counts).
pub fn greedy_group(ds: &EmbeddingDataset, ratio: f64) -> Result<RelabelMap> {
    greedy_group_detailed(ds, ratio).map(|(map, _)| map)
}

#[derive(Clone, Debug)]
pub struct KMeansFit {
    pub assignment: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    /// Within-cluster sum of squares after the initial assignment and after
    /// every Lloyd iteration.
    pub objective: Vec<f64>,
    pub iterations: usize,
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, squared_distance(point, &centroids[0]));
    for (c, centroid) in centroids.iter().enumerate().skip(1) {
        let d = squared_distance(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn assign(points: &[Vec<f64>], centroids: &[Vec<f64>]) -> (Vec<usize>, f64) {
    let mut total = 0.0;
    let labels = points
        .iter()
        .map(|p| {
            let (c, d) = nearest(p, centroids);
            total += d;
            c
        })
        .collect();
    (labels, total)
}

/// Lloyd's algorithm from `k` seeded distinct data points.
///
/// Stops after `max_iters` updates or once assignments stop changing. An
/// empty cluster is re-seeded with the point farthest from its centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, seed: u64, max_iters: usize) -> Result<KMeansFit> {
    if k == 0 {
        return Err(Error::invalid("k must be positive"));
    }
    if k > points.len() {
        return Err(Error::invalid(format!("k = {k} exceeds the {} points", points.len())));
    }
    let dim = points[0].len();
    let mut r = rng::seeded(seed);
    let mut centroids: Vec<Vec<f64>> = rng::sample_without_replacement(&mut r, points.len(), k)
        .into_iter()
        .map(|i| points[i].clone())
        .collect();
    let (mut labels, j0) = assign(points, &centroids);
    let mut objective = vec![j0];
    let mut iterations = 0;
    while iterations < max_iters {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &c) in points.iter().zip(&labels) {
            counts[c] += 1;
            sums[c].iter_mut().zip(p).for_each(|(s, x)| *s += x);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empty.is_empty() {
            let mut far: Vec<(f64, usize)> = points
                .iter()
                .zip(&labels)
                .enumerate()
                .map(|(i, (p, &c))| (squared_distance(p, &centroids[c]), i))
                .collect();
            far.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            for (&c, &(_, i)) in empty.iter().zip(&far) {
                centroids[c] = points[i].clone();
            }
        }
        let (next, j) = assign(points, &centroids);
        iterations += 1;
        objective.push(j);
        let unchanged = next == labels;
        labels = next;
        if unchanged {
            break;
        }
    }
    Ok(KMeansFit {
        assignment: labels,
        centroids,
        objective,
        iterations,
    })
}

/// K-means relabeling on ℓ2-normalized vectors. Clusters left empty are
/// dropped and the rest numbered densely in centroid order.
pub fn kmeans_relabel(ds: &EmbeddingDataset, k: usize, seed: u64, max_iters: usize) -> Result<(RelabelMap, KMeansFit)> {
    let points: Vec<Vec<f64>> = (0..ds.len())
        .map(|r| normalized(&widen(ds.vector(r))).ok_or(Error::ZeroVector))
        .collect::<Result<_>>()?;
    if points.is_empty() {
        return Err(Error::Empty("dataset"));
    }
    let fit = kmeans(&points, k, seed, max_iters)?;
    let mut dense = vec![u32::MAX; k];
    let mut used = vec![false; k];
    fit.assignment.iter().for_each(|&c| used[c] = true);
    let mut next = 0;
    for c in 0..k {
        if used[c] {
            dense[c] = next;
            next += 1;
        }
    }
    let new_class_of = fit.assignment.iter().map(|&c| dense[c]).collect();
    let map = RelabelMap::from_assignment(
        new_class_of,
        |id| format!("cluster{id}"),
        Provenance::Kmeans {
            k,
            seed,
            max_iters,
            iterations: fit.iterations,
        },
    );
    Ok((map, fit))
}

fn cmp_f64(a: &f64, b: &f64) -> Ordering {
    a.total_cmp(b)
}

/// Size of the largest over the smallest class of a relabeling.
pub fn imbalance(map: &RelabelMap) -> f64 {
    let counts: Vec<f64> = map.new_classes.iter().map(|c| c.count as f64).collect();
    let max = counts.iter().copied().max_by(cmp_f64).unwrap_or(0.0);
    let min = counts.iter().copied().min_by(cmp_f64).unwrap_or(0.0);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}
