//! Seeded synthetic embeddings with a super-cluster → class hierarchy.
//!
//! Spread and noise parameters are expected offset norms: each coordinate
//! gets standard deviation `value / √dim`, or `value / √rank` when class
//! offsets are confined to a per-super subspace.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::{class_table, subset, EmbeddingDataset, KeepMap};
use crate::error::{Error, Result};
use crate::rng::{self, SeededRng};
use crate::vector::{dot, norm};

pub const CENTER_RETRIES: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub dim: usize,
    pub n_super: usize,
    pub classes_per_super: usize,
    pub images_per_class: usize,
    pub super_separation: f64,
    pub intra_super_spread: f64,
    pub within_class_noise: f64,
    /// When set, the class centers of each super vary only inside a random
    /// subspace of this dimension owned by that super.
    pub class_subspace_dim: Option<usize>,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dim: 32,
            n_super: 8,
            classes_per_super: 4,
            images_per_class: 50,
            super_separation: 1.0,
            intra_super_spread: 0.1,
            within_class_noise: 0.01,
            class_subspace_dim: None,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.n_super == 0 || self.classes_per_super == 0 || self.images_per_class == 0 {
            return Err(Error::invalid("synth sizes must be positive"));
        }
        for (name, v) in [
            ("super_separation", self.super_separation),
            ("intra_super_spread", self.intra_super_spread),
            ("within_class_noise", self.within_class_noise),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!("{name} must be finite and non-negative")));
            }
        }
        if let Some(r) = self.class_subspace_dim {
            if r == 0 || r > self.dim {
                return Err(Error::invalid(format!("class_subspace_dim must be in 1..={}", self.dim)));
            }
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.n_super * self.classes_per_super
    }

    pub fn class_id(&self, super_id: usize, j: usize) -> u32 {
        (super_id * self.classes_per_super + j) as u32
    }
}

fn gaussian(rng: &mut SeededRng, n: usize, sd: f64) -> Vec<f64> {
    (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn unit_vector(rng: &mut SeededRng, dim: usize) -> Vec<f64> {
    loop {
        let v = gaussian(rng, dim, 1.0);
        let n = norm(&v);
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Points on the unit sphere at pairwise distance at least `separation`,
/// drawn one at a time with up to [`CENTER_RETRIES`] attempts each.
pub fn sphere_centers(rng: &mut SeededRng, n: usize, dim: usize, separation: f64) -> Result<Vec<Vec<f64>>> {
    let mut centers: Vec<Vec<f64>> = Vec::with_capacity(n);
    while centers.len() < n {
        let mut best: Option<(f64, Vec<f64>)> = None;
        for _ in 0..CENTER_RETRIES {
            let c = unit_vector(rng, dim);
            let closest = centers
                .iter()
                .map(|o| (2.0 - 2.0 * dot(o, &c)).max(0.0).sqrt())
                .fold(f64::INFINITY, f64::min);
            if closest >= separation {
                best = Some((closest, c));
                break;
            }
            if best.as_ref().is_none_or(|(d, _)| closest > *d) {
                best = Some((closest, c));
            }
        }
        let (closest, c) = best.expect("at least one attempt");
        if closest < separation {
            return Err(Error::Unsatisfiable {
                required: separation,
                achieved: closest,
            });
        }
        centers.push(c);
    }
    Ok(centers)
}

/// Orthonormal basis of a random `rank`-dimensional subspace.
fn random_basis(rng: &mut SeededRng, dim: usize, rank: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while basis.len() < rank {
        let mut v = gaussian(rng, dim, 1.0);
        for b in &basis {
            let p = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
        }
        let n = norm(&v);
        if n > 1e-9 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    basis
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hierarchy {
    pub dataset: EmbeddingDataset,
    /// Super-cluster of every class id.
    pub super_of: BTreeMap<u32, u32>,
    pub super_centers: Vec<Vec<f64>>,
    pub class_centers: BTreeMap<u32, Vec<f64>>,
}

/// Class `s·P + j` is the `j`-th class of super `s`; records are laid out
/// class by class.
pub fn gen_hierarchical(spec: &SynthSpec) -> Result<Hierarchy> {
    spec.validate()?;
    let dim = spec.dim;
    let mut r = rng::seeded(spec.seed);
    let super_centers = sphere_centers(&mut r, spec.n_super, dim, spec.super_separation)?;
    let mut class_centers = BTreeMap::new();
    let mut super_of = BTreeMap::new();
    for (s, center) in super_centers.iter().enumerate() {
        let basis = spec.class_subspace_dim.map(|k| random_basis(&mut r, dim, k));
        for j in 0..spec.classes_per_super {
            let offset = match &basis {
                None => gaussian(&mut r, dim, spec.intra_super_spread / (dim as f64).sqrt()),
                Some(b) => {
                    let coeffs = gaussian(&mut r, b.len(), spec.intra_super_spread / (b.len() as f64).sqrt());
                    let mut o = vec![0.0; dim];
                    for (c, v) in coeffs.iter().zip(b) {
                        o.iter_mut().zip(v).for_each(|(x, y)| *x += c * y);
                    }
                    o
                }
            };
            let id = spec.class_id(s, j);
            class_centers.insert(id, center.iter().zip(&offset).map(|(a, b)| a + b).collect::<Vec<f64>>());
            super_of.insert(id, s as u32);
        }
    }
    let noise_sd = spec.within_class_noise / (dim as f64).sqrt();
    let n = spec.num_classes() * spec.images_per_class;
    let mut data = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for (&id, center) in &class_centers {
        for _ in 0..spec.images_per_class {
            for &c in center {
                let x = if noise_sd > 0.0 {
                    c + noise_sd * r.sample::<f64, _>(StandardNormal)
                } else {
                    c
                };
                data.push(x as f32);
            }
            labels.push(id);
        }
    }
    let p = spec.classes_per_super;
    let classes = class_table(&labels, |id| format!("s{}c{}", id as usize / p, id as usize % p));
    Ok(Hierarchy {
        dataset: EmbeddingDataset::new(dim, data, labels, classes)?,
        super_of,
        super_centers,
        class_centers,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Placement {
    /// Base classes share super-clusters with novel classes.
    Near,
    /// Base classes come from super-clusters with no novel class.
    Far,
}

impl std::str::FromStr for Placement {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "near" => Ok(Self::Near),
            "far" => Ok(Self::Far),
            other => Err(Error::invalid(format!("unknown placement {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaseNovel {
    pub base: EmbeddingDataset,
    pub novel: EmbeddingDataset,
    /// Placement of every base class relative to the novel super-clusters.
    pub base_tags: BTreeMap<u32, Placement>,
    pub novel_supers: Vec<u32>,
    pub super_of: BTreeMap<u32, u32>,
}

/// Splits a hierarchy into base and novel sets.
///
/// `round(novel_fraction · n_super)` super-clusters (at least one, leaving at
/// least one) are chosen with `seed`. With [`Placement::Far`] all their
/// classes become novel. With [`Placement::Near`] only the first
/// `⌈P/2⌉` classes of each become novel and the rest stay in the base pool
/// tagged `Near`. Every other class is a base class tagged `Far`. Class ids
/// are those of the hierarchy.
pub fn gen_base_novel(spec: &SynthSpec, novel_fraction: f64, placement: Placement, seed: u64) -> Result<BaseNovel> {
    if !(novel_fraction > 0.0 && novel_fraction < 1.0) {
        return Err(Error::invalid("novel_fraction must lie in (0, 1)"));
    }
    if spec.n_super < 2 {
        return Err(Error::invalid("base/novel split needs at least two super-clusters"));
    }
    if placement == Placement::Near && spec.classes_per_super < 2 {
        return Err(Error::invalid("near placement needs at least two classes per super-cluster"));
    }
    let h = gen_hierarchical(spec)?;
    let n_novel = ((novel_fraction * spec.n_super as f64).round() as usize).clamp(1, spec.n_super - 1);
    let mut r = rng::keyed(seed, 0);
    let mut novel_supers: Vec<u32> = rng::sample_without_replacement(&mut r, spec.n_super, n_novel)
        .into_iter()
        .map(|s| s as u32)
        .collect();
    novel_supers.sort_unstable();
    let novel_per_super = match placement {
        Placement::Far => spec.classes_per_super,
        Placement::Near => spec.classes_per_super.div_ceil(2),
    };
    let by_class = h.dataset.members_by_class();
    let mut base_keep = KeepMap::new();
    let mut novel_keep = KeepMap::new();
    let mut base_tags = BTreeMap::new();
    for (&class, &s) in &h.super_of {
        let records = by_class[&class].iter().copied().collect();
        let in_novel_super = novel_supers.binary_search(&s).is_ok();
        let j = class as usize % spec.classes_per_super;
        if in_novel_super && j < novel_per_super {
            novel_keep.insert(class, records);
        } else {
            base_keep.insert(class, records);
            base_tags.insert(class, if in_novel_super { Placement::Near } else { Placement::Far });
        }
    }
    Ok(BaseNovel {
        base: subset(&h.dataset, &base_keep)?,
        novel: subset(&h.dataset, &novel_keep)?,
        base_tags,
        novel_supers,
        super_of: h.super_of,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{class_diversity, compute_class_stats, prototypes};

    fn small() -> SynthSpec {
        SynthSpec {
            dim: 16,
            n_super: 4,
            classes_per_super: 4,
            images_per_class: 10,
            super_separation: 1.0,
            intra_super_spread: 0.1,
            within_class_noise: 0.02,
            class_subspace_dim: None,
            seed: 5,
        }
    }

    #[test]
    fn layout_and_determinism() {
        let spec = small();
        let h = gen_hierarchical(&spec).unwrap();
        assert_eq!(h.dataset.len(), 160);
        assert_eq!(h.dataset.num_classes(), 16);
        assert_eq!(h.super_of[&13], 3);
        assert_eq!(h.dataset.class(6).unwrap().name, "s1c2");
        assert_eq!(h, gen_hierarchical(&spec).unwrap());
        assert_ne!(h.dataset, gen_hierarchical(&SynthSpec { seed: 6, ..spec }).unwrap().dataset);
        for (i, a) in h.super_centers.iter().enumerate() {
            assert!((norm(a) - 1.0).abs() < 1e-12);
            for b in &h.super_centers[..i] {
                assert!((2.0 - 2.0 * dot(a, b)).sqrt() >= 1.0);
            }
        }
    }

    #[test]
    fn zero_noise_gives_constant_classes() {
        let spec = SynthSpec { within_class_noise: 0.0, ..small() };
        let h = gen_hierarchical(&spec).unwrap();
        for (_, members) in h.dataset.members_by_class() {
            let rows: Vec<&[f32]> = members.iter().map(|&r| h.dataset.vector(r)).collect();
            assert_eq!(class_diversity(&rows).unwrap(), 0.0);
        }
    }

    #[test]
    fn single_class() {
        let spec = SynthSpec { n_super: 1, classes_per_super: 1, ..small() };
        let h = gen_hierarchical(&spec).unwrap();
        assert_eq!(h.dataset.num_classes(), 1);
    }

    #[test]
    fn impossible_separation_reports_best() {
        let spec = SynthSpec { n_super: 3, super_separation: 1.999, dim: 2, ..small() };
        match gen_hierarchical(&spec) {
            Err(Error::Unsatisfiable { required, achieved }) => {
                assert_eq!(required, 1.999);
                assert!(achieved < required);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn subspace_offsets_stay_in_subspace() {
        let spec = SynthSpec { class_subspace_dim: Some(2), within_class_noise: 0.0, ..small() };
        let h = gen_hierarchical(&spec).unwrap();
        for s in 0..4u32 {
            let c = &h.super_centers[s as usize];
            let offsets: Vec<Vec<f64>> = (0..4)
                .map(|j| h.class_centers[&(s * 4 + j)].iter().zip(c).map(|(a, b)| a - b).collect())
                .collect();
            // the third offset is a combination of the first two
            let g = |a: &[f64], b: &[f64]| dot(a, b);
            let (a, b, x) = (&offsets[0], &offsets[1], &offsets[2]);
            let det = g(a, a) * g(b, b) - g(a, b) * g(a, b);
            let ca = (g(x, a) * g(b, b) - g(x, b) * g(a, b)) / det;
            let cb = (g(x, b) * g(a, a) - g(x, a) * g(a, b)) / det;
            let resid: f64 = x.iter().zip(a).zip(b).map(|((x, a), b)| (x - ca * a - cb * b).powi(2)).sum();
            assert!(resid < 1e-20, "{resid}");
        }
    }

    #[test]
    fn base_novel_split() {
        let spec = small();
        let far = gen_base_novel(&spec, 0.25, Placement::Far, 1).unwrap();
        assert_eq!(far.novel_supers.len(), 1);
        assert_eq!(far.novel.num_classes(), 4);
        assert_eq!(far.base.num_classes(), 12);
        assert!(far.base_tags.values().all(|&t| t == Placement::Far));
        let near = gen_base_novel(&spec, 0.25, Placement::Near, 1).unwrap();
        assert_eq!(near.novel.num_classes(), 2);
        assert_eq!(near.base.num_classes(), 14);
        assert_eq!(near.base_tags.values().filter(|&&t| t == Placement::Near).count(), 2);
        for id in near.novel.class_ids() {
            assert_eq!(near.super_of[&id], near.novel_supers[0]);
        }
        assert_eq!(near, gen_base_novel(&spec, 0.25, Placement::Near, 1).unwrap());
        assert!(gen_base_novel(&spec, 1.0, Placement::Near, 1).is_err());
        assert!(gen_base_novel(&SynthSpec { n_super: 1, ..spec }, 0.5, Placement::Far, 1).is_err());
    }

    #[test]
    fn near_classes_are_closer_to_novel() {
        let spec = SynthSpec { n_super: 6, ..small() };
        let bn = gen_base_novel(&spec, 0.34, Placement::Near, 3).unwrap();
        let tests: Vec<Vec<f64>> = prototypes(&bn.novel).unwrap().into_values().collect();
        let stats = compute_class_stats(&bn.base, Some(&tests), 0.2, 0).unwrap();
        let mean = |tag| {
            let d: Vec<f64> = stats
                .iter()
                .filter(|s| bn.base_tags[&s.class_id] == tag)
                .map(|s| s.dist_to_test.unwrap())
                .collect();
            d.iter().sum::<f64>() / d.len() as f64
        };
        assert!(mean(Placement::Near) < mean(Placement::Far));
    }
}
