//! Per-class measures: prototypes, similarity, diversity, difficulty, and
//! distance to a set of test classes.
//!
//! A class prototype is the mean of the class's ℓ2-normalized member
//! vectors, *not* renormalized; its dot product with a unit query is the
//! query's average cosine similarity to the members.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::EmbeddingDataset;
use crate::error::{Error, Result};
use crate::rng;
use crate::vector::{argmax, dot, norm, normalized, widen};

/// Default fraction of each class held out when measuring difficulty.
pub const DEFAULT_HOLDOUT: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub class_id: u32,
    pub n_members: usize,
    pub prototype: Vec<f64>,
    pub diversity: f64,
    /// Held-out nearest-prototype accuracy; higher means easier.
    pub difficulty: f64,
    pub dist_to_test: Option<f64>,
}

fn normalized_members<T, V>(vectors: &[V]) -> Result<Vec<Vec<f64>>>
where
    T: Copy + Into<f64>,
    V: AsRef<[T]>,
{
    if vectors.is_empty() {
        return Err(Error::Empty("class has no members"));
    }
    vectors
        .iter()
        .map(|v| normalized(&widen(v.as_ref())).ok_or(Error::ZeroVector))
        .collect()
}

fn mean_of(units: &[Vec<f64>]) -> Vec<f64> {
    let dim = units[0].len();
    let mut acc = vec![0.0; dim];
    for u in units {
        for (a, x) in acc.iter_mut().zip(u) {
            *a += x;
        }
    }
    let n = units.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Mean of the ℓ2-normalized inputs.
pub fn class_prototype<T, V>(vectors: &[V]) -> Result<Vec<f64>>
where
    T: Copy + Into<f64>,
    V: AsRef<[T]>,
{
    Ok(mean_of(&normalized_members(vectors)?))
}

/// Cosine of the angle between two prototypes.
pub fn class_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Trace of the (biased) covariance of the normalized members:
/// `(1/n) Σ ||x̂ᵢ − μ||²` with `μ` the prototype.
pub fn class_diversity<T, V>(vectors: &[V]) -> Result<f64>
where
    T: Copy + Into<f64>,
    V: AsRef<[T]>,
{
    let units = normalized_members(vectors)?;
    // shifted by the first member, so identical members give exactly 0
    let shifted: Vec<Vec<f64>> = units
        .iter()
        .map(|u| u.iter().zip(&units[0]).map(|(x, o)| x - o).collect())
        .collect();
    let mean = mean_of(&shifted);
    let spread = shifted.iter().map(|d| dot(d, d)).sum::<f64>() / units.len() as f64;
    Ok((spread - dot(&mean, &mean)).max(0.0))
}

/// Mean cosine distance `1 − cos` from a base prototype to each test prototype.
pub fn distance_to_test<P: AsRef<[f64]>>(base_prototype: &[f64], test_prototypes: &[P]) -> Result<f64> {
    if test_prototypes.is_empty() {
        return Err(Error::Empty("test prototype set"));
    }
    let mut total = 0.0;
    for t in test_prototypes {
        total += 1.0 - class_similarity(base_prototype, t.as_ref())?;
    }
    Ok(total / test_prototypes.len() as f64)
}

/// Per-class prototypes, keyed by class id.
pub fn prototypes(ds: &EmbeddingDataset) -> Result<BTreeMap<u32, Vec<f64>>> {
    ds.members_by_class()
        .into_iter()
        .filter(|(_, m)| !m.is_empty())
        .map(|(c, m)| {
            let rows: Vec<&[f32]> = m.iter().map(|&r| ds.vector(r)).collect();
            Ok((c, class_prototype(&rows)?))
        })
        .collect()
}

/// Held-out split used by [`class_difficulty`].
///
/// Within each class (members in record order) the same seeded draw picks
/// which positions are held out, so identically laid-out classes get the
/// same split. A class of `m ≥ 2` members holds out
/// `clamp(round(fraction·m), 1, m−1)` records; singletons hold out nothing.
#[derive(Clone, Debug)]
pub struct HoldoutSplit {
    pub train: BTreeMap<u32, Vec<usize>>,
    pub held_out: BTreeMap<u32, Vec<usize>>,
}

pub fn holdout_split(ds: &EmbeddingDataset, fraction: f64, seed: u64) -> Result<HoldoutSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("holdout fraction must be in (0, 1), got {fraction}")));
    }
    let mut train = BTreeMap::new();
    let mut held_out = BTreeMap::new();
    for (class, members) in ds.members_by_class() {
        let m = members.len();
        let h = if m >= 2 {
            ((fraction * m as f64).round() as usize).clamp(1, m - 1)
        } else {
            0
        };
        let mut r = rng::keyed(seed, m as u64);
        let mut picked = rng::sample_without_replacement(&mut r, m, h);
        picked.sort_unstable();
        let mut is_held = vec![false; m];
        picked.iter().for_each(|&p| is_held[p] = true);
        let (held, kept): (Vec<_>, Vec<_>) = members.iter().enumerate().partition(|(i, _)| is_held[*i]);
        train.insert(class, kept.into_iter().map(|(_, &r)| r).collect());
        held_out.insert(class, held.into_iter().map(|(_, &r)| r).collect());
    }
    Ok(HoldoutSplit { train, held_out })
}

/// Nearest-prototype classifier over every class of `split.train`.
struct HoldoutClassifier {
    ids: Vec<u32>,
    protos: Vec<Vec<f64>>,
}

impl HoldoutClassifier {
    fn fit(ds: &EmbeddingDataset, split: &HoldoutSplit) -> Result<Self> {
        let mut ids = Vec::new();
        let mut protos = Vec::new();
        for (&c, members) in &split.train {
            if members.is_empty() {
                continue;
            }
            let rows: Vec<&[f32]> = members.iter().map(|&r| ds.vector(r)).collect();
            ids.push(c);
            protos.push(class_prototype(&rows)?);
        }
        Ok(Self { ids, protos })
    }

    fn predict(&self, x: &[f32]) -> Result<u32> {
        let u = normalized(&widen(x)).ok_or(Error::ZeroVector)?;
        let scores: Vec<f64> = self.protos.iter().map(|p| dot(&u, p)).collect();
        Ok(self.ids[argmax(&scores)])
    }

    fn accuracy(&self, ds: &EmbeddingDataset, class: u32, held: &[usize]) -> Result<f64> {
        let mut correct = 0usize;
        for &r in held {
            if self.predict(ds.vector(r))? == class {
                correct += 1;
            }
        }
        Ok(correct as f64 / held.len() as f64)
    }
}

/// Fraction of `class_id`'s held-out members that a cosine nearest-prototype
/// classifier (prototypes from non-held-out members of every class) assigns
/// back to `class_id`. Ties go to the lowest class id.
pub fn class_difficulty(ds: &EmbeddingDataset, class_id: u32, holdout_fraction: f64, seed: u64) -> Result<f64> {
    let info = ds.class(class_id).ok_or(Error::UnknownClass(class_id))?;
    if info.count < 2 {
        return Err(Error::ClassTooSmall {
            class: class_id,
            have: info.count,
            need: 2,
        });
    }
    if ds.classes().iter().filter(|c| c.count > 0).count() < 2 {
        return Err(Error::invalid("difficulty needs at least two non-empty classes"));
    }
    let split = holdout_split(ds, holdout_fraction, seed)?;
    let clf = HoldoutClassifier::fit(ds, &split)?;
    clf.accuracy(ds, class_id, &split.held_out[&class_id])
}

/// Computes [`ClassStats`] for every non-empty class.
///
/// Difficulty shares one holdout split and one classifier across classes, so
/// the result is identical to calling [`class_difficulty`] per class.
pub fn compute_class_stats<P: AsRef<[f64]>>(
    ds: &EmbeddingDataset,
    test_prototypes: Option<&[P]>,
    holdout_fraction: f64,
    seed: u64,
) -> Result<Vec<ClassStats>> {
    let split = holdout_split(ds, holdout_fraction, seed)?;
    let clf = HoldoutClassifier::fit(ds, &split)?;
    let multi_class = ds.classes().iter().filter(|c| c.count > 0).count() >= 2;
    let mut out = Vec::new();
    for (class, members) in ds.members_by_class() {
        if members.is_empty() {
            continue;
        }
        let rows: Vec<&[f32]> = members.iter().map(|&r| ds.vector(r)).collect();
        let prototype = class_prototype(&rows)?;
        let diversity = class_diversity(&rows)?;
        let held = &split.held_out[&class];
        let difficulty = if multi_class && !held.is_empty() {
            clf.accuracy(ds, class, held)?
        } else {
            f64::NAN
        };
        let dist_to_test = match test_prototypes {
            Some(t) => Some(distance_to_test(&prototype, t)?),
            None => None,
        };
        out.push(ClassStats {
            class_id: class,
            n_members: members.len(),
            prototype,
            diversity,
            difficulty,
            dist_to_test,
        });
    }
    Ok(out)
}

/// Writes the `stats` CSV: class_id, n_members, diversity, difficulty, dist_to_test.
pub fn write_stats_csv<W: std::io::Write>(stats: &[ClassStats], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["class_id", "n_members", "diversity", "difficulty", "dist_to_test"])?;
    for s in stats {
        w.write_record([
            s.class_id.to_string(),
            s.n_members.to_string(),
            s.diversity.to_string(),
            s.difficulty.to_string(),
            s.dist_to_test.map(|d| d.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::Csv(e.into()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn prototype_examples() {
        assert_eq!(class_prototype(&[[1.0f64, 0.0]]).unwrap(), vec![1.0, 0.0]);
        assert_eq!(class_prototype(&[[2.0f64, 0.0], [0.0, 3.0]]).unwrap(), vec![0.5, 0.5]);
        // (1,1)/√2 + (1,-1)/√2 + (1,0) = (√2 + 1, 0), divided by 3.
        let p = class_prototype(&[[1.0f64, 1.0], [1.0, -1.0], [2.0, 0.0]]).unwrap();
        assert!(close(p[0], (2f64.sqrt() + 1.0) / 3.0), "{p:?}");
        assert!(p[1].abs() < 1e-15);
        assert!((p[0] - 0.80474).abs() < 1e-5);
    }

    #[test]
    fn prototype_errors() {
        let empty: [[f64; 2]; 0] = [];
        assert!(matches!(class_prototype(&empty), Err(Error::Empty(_))));
        assert!(matches!(class_prototype(&[[0.0f64, 0.0]]), Err(Error::ZeroVector)));
    }

    #[test]
    fn similarity_examples() {
        assert!(close(class_similarity(&[0.5, 0.5], &[0.5, 0.5]).unwrap(), 1.0));
        assert_eq!(class_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let h = 1.0 / 2f64.sqrt();
        assert!(close(class_similarity(&[1.0, 0.0], &[h, h]).unwrap(), 2f64.sqrt() / 2.0));
        assert!(matches!(class_similarity(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector)));
    }

    #[test]
    fn diversity_examples() {
        assert_eq!(class_diversity(&[[3.0f64, 4.0]; 5]).unwrap(), 0.0);
        // scaled copies normalize to the same direction up to rounding
        assert!(class_diversity(&[[3.0f64, 4.0], [6.0, 8.0], [0.3, 0.4]]).unwrap() < 1e-30);
        assert!(close(class_diversity(&[[1.0f64, 0.0], [0.0, 1.0]]).unwrap(), 0.5));
    }

    #[test]
    fn distance_examples() {
        assert!(distance_to_test(&[0.6, 0.8], &[[0.6, 0.8]]).unwrap().abs() < 1e-12);
        assert!(close(distance_to_test(&[1.0, 0.0], &[[0.0, 1.0], [0.0, -1.0]]).unwrap(), 1.0));
        assert!(close(distance_to_test(&[1.0, 0.0], &[[1.0, 0.0], [0.0, 1.0]]).unwrap(), 0.5));
        let none: [[f64; 2]; 0] = [];
        assert!(matches!(distance_to_test(&[1.0, 0.0], &none), Err(Error::Empty(_))));
    }

    fn two_point_classes(a: [f32; 2], b: [f32; 2], per: usize) -> EmbeddingDataset {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (c, v) in [a, b].into_iter().enumerate() {
            for _ in 0..per {
                rows.push(v);
                labels.push(c as u32);
            }
        }
        EmbeddingDataset::from_rows(&rows, labels).unwrap()
    }

    #[test]
    fn difficulty_perfect_separation() {
        let ds = two_point_classes([1.0, 0.0], [0.0, 1.0], 10);
        assert_eq!(class_difficulty(&ds, 0, 0.2, 3).unwrap(), 1.0);
        assert_eq!(class_difficulty(&ds, 1, 0.2, 3).unwrap(), 1.0);
    }

    #[test]
    fn difficulty_tie_goes_to_lower_class() {
        let rows: Vec<[f32; 2]> = (0..8).map(|i| [1.0 + i as f32, 0.5 * i as f32]).collect();
        let mut all = rows.clone();
        all.extend(rows);
        let labels = (0..16).map(|i| (i / 8) as u32).collect();
        let ds = EmbeddingDataset::from_rows(&all, labels).unwrap();
        assert_eq!(class_difficulty(&ds, 0, 0.25, 11).unwrap(), 1.0);
        assert_eq!(class_difficulty(&ds, 1, 0.25, 11).unwrap(), 0.0);
    }

    #[test]
    fn difficulty_errors() {
        let ds = EmbeddingDataset::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], vec![0, 0, 1]).unwrap();
        assert!(matches!(class_difficulty(&ds, 1, 0.2, 0), Err(Error::ClassTooSmall { .. })));
        let single = EmbeddingDataset::from_rows(&[[1.0, 0.0], [0.0, 1.0]], vec![0, 0]).unwrap();
        assert!(class_difficulty(&single, 0, 0.2, 0).is_err());
        assert!(class_difficulty(&ds, 0, 1.0, 0).is_err());
    }

    #[test]
    fn stats_table_matches_per_class_calls() {
        let ds = EmbeddingDataset::from_rows(
            &[[1.0, 0.1], [0.9, 0.3], [1.0, -0.2], [0.2, 1.0], [-0.1, 0.8], [0.5, 0.5], [0.6, 0.4]],
            vec![0, 0, 0, 1, 1, 1, 1],
        )
        .unwrap();
        let tests = vec![vec![1.0, 0.0]];
        let stats = compute_class_stats(&ds, Some(&tests), 0.3, 5).unwrap();
        for s in &stats {
            assert_eq!(s.difficulty, class_difficulty(&ds, s.class_id, 0.3, 5).unwrap());
            let rows: Vec<&[f32]> = ds.members(s.class_id).iter().map(|&r| ds.vector(r)).collect();
            assert_eq!(s.diversity, class_diversity(&rows).unwrap());
        }
        let mut buf = Vec::new();
        write_stats_csv(&stats, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("class_id,n_members,diversity,difficulty,dist_to_test\n0,3,"));
    }

    proptest! {
        #[test]
        fn prototype_scale_and_permutation_invariant(
            rows in prop::collection::vec(prop::collection::vec(0.1f64..3.0, 3), 1..8),
            scales in prop::collection::vec(0.01f64..100.0, 8),
        ) {
            let p = class_prototype(&rows).unwrap();
            let scaled: Vec<Vec<f64>> = rows.iter().zip(&scales).map(|(r, s)| r.iter().map(|v| v * s).collect()).collect();
            let mut rev = rows.clone();
            rev.reverse();
            for q in [class_prototype(&scaled).unwrap(), class_prototype(&rev).unwrap()] {
                for (a, b) in p.iter().zip(&q) {
                    prop_assert!((a - b).abs() < 1e-12);
                }
            }
            prop_assert!(norm(&p) <= 1.0 + 1e-12);
        }

        #[test]
        fn diversity_bounded(rows in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..10)) {
            prop_assume!(rows.iter().all(|r| norm(r) > 1e-3));
            let d = class_diversity(&rows).unwrap();
            prop_assert!(d.is_finite());
            prop_assert!((0.0..=2.0).contains(&d));
            // the prototype's squared norm plus the diversity is exactly one
            let p = class_prototype(&rows).unwrap();
            prop_assert!((d + dot(&p, &p) - 1.0).abs() < 1e-12);
        }
    }
}
