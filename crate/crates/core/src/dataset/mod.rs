//! Labeled embedding datasets: validation, subsetting, relabeling, and the
//! on-disk directory format (see [`io`]).

mod io;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_dataset, load_relabel, save_dataset, save_relabel};

/// Class ids to kept record ids, the selection format consumed by [`subset`].
pub type KeepMap = BTreeMap<u32, BTreeSet<usize>>;

/// One row of a class table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
    pub count: usize,
}

/// An immutable set of fixed-dimension feature vectors with integer labels.
///
/// Record ids are row indices. Vectors are kept as `f32` so a save/load
/// round-trip is byte-identical; numerical routines widen to `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingDataset {
    dim: usize,
    data: Vec<f32>,
    labels: Vec<u32>,
    classes: Vec<ClassInfo>,
    source_ids: Option<Vec<String>>,
}

impl EmbeddingDataset {
    /// Builds a dataset and checks every invariant.
    ///
    /// The class table is sorted by id on the way in.
    pub fn new(dim: usize, data: Vec<f32>, labels: Vec<u32>, mut classes: Vec<ClassInfo>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dimension must be positive"));
        }
        if data.len() != labels.len() * dim {
            return Err(Error::SizeMismatch {
                what: "embedding values".into(),
                expected: labels.len() * dim,
                found: data.len(),
            });
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { record: pos / dim });
        }
        classes.sort_by_key(|c| c.id);
        if let Some(w) = classes.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::invalid(format!("duplicate class id {} in class table", w[0].id)));
        }
        let mut actual: BTreeMap<u32, usize> = BTreeMap::new();
        for &l in &labels {
            *actual.entry(l).or_default() += 1;
        }
        for (&id, _) in &actual {
            if classes.binary_search_by_key(&id, |c| c.id).is_err() {
                return Err(Error::UnknownClass(id));
            }
        }
        for c in &classes {
            let n = actual.get(&c.id).copied().unwrap_or(0);
            if n != c.count {
                return Err(Error::CountMismatch {
                    class: c.id,
                    table: c.count,
                    actual: n,
                });
            }
        }
        Ok(Self {
            dim,
            data,
            labels,
            classes,
            source_ids: None,
        })
    }

    /// Builds a dataset whose class table is derived from the labels, with
    /// each class named after its id.
    pub fn from_labels(dim: usize, data: Vec<f32>, labels: Vec<u32>) -> Result<Self> {
        let classes = class_table(&labels, |id| id.to_string());
        Self::new(dim, data, labels, classes)
    }

    /// Convenience constructor from per-record rows.
    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R], labels: Vec<u32>) -> Result<Self> {
        let dim = rows.first().map(|r| r.as_ref().len()).unwrap_or(0);
        if rows.iter().any(|r| r.as_ref().len() != dim) {
            return Err(Error::invalid("rows have differing lengths"));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().copied()).collect();
        Self::from_labels(dim, data, labels)
    }

    /// Attaches one source identifier per record (the optional `ids.txt`).
    pub fn with_source_ids(mut self, ids: Vec<String>) -> Result<Self> {
        if ids.len() != self.len() {
            return Err(Error::SizeMismatch {
                what: "source ids".into(),
                expected: self.len(),
                found: ids.len(),
            });
        }
        self.source_ids = Some(ids);
        Ok(self)
    }

    /// Same labels and class table, new vectors of dimension `dim`.
    pub fn with_vectors(&self, dim: usize, data: Vec<f32>) -> Result<Self> {
        let mut ds = Self::new(dim, data, self.labels.clone(), self.classes.clone())?;
        ds.source_ids = self.source_ids.clone();
        Ok(ds)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn vector(&self, record: usize) -> &[f32] {
        &self.data[record * self.dim..(record + 1) * self.dim]
    }

    pub fn vector_f64(&self, record: usize) -> Vec<f64> {
        self.vector(record).iter().map(|&v| v as f64).collect()
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn label(&self, record: usize) -> u32 {
        self.labels[record]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn classes(&self) -> &[ClassInfo] {
        &self.classes
    }

    pub fn class(&self, id: u32) -> Option<&ClassInfo> {
        self.classes
            .binary_search_by_key(&id, |c| c.id)
            .ok()
            .map(|i| &self.classes[i])
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.classes.iter().map(|c| c.id).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn source_ids(&self) -> Option<&[String]> {
        self.source_ids.as_deref()
    }

    /// Record ids of `class`, ascending.
    pub fn members(&self, class: u32) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == class)
            .map(|(i, _)| i)
            .collect()
    }

    /// Record ids grouped by class, every table class present (possibly empty).
    pub fn members_by_class(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = self.classes.iter().map(|c| (c.id, Vec::new())).collect();
        for (i, &l) in self.labels.iter().enumerate() {
            out.get_mut(&l).expect("validated label").push(i);
        }
        out
    }

    /// Keep-map selecting every record.
    pub fn full_keep(&self) -> KeepMap {
        self.members_by_class()
            .into_iter()
            .filter(|(_, m)| !m.is_empty())
            .map(|(c, m)| (c, m.into_iter().collect()))
            .collect()
    }
}

/// Builds a class table (sorted by id) from a label column.
pub fn class_table(labels: &[u32], name: impl Fn(u32) -> String) -> Vec<ClassInfo> {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(id, count)| ClassInfo { id, name: name(id), count })
        .collect()
}

/// Where a relabeling came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Provenance {
    Identity,
    Split { ratio: u32 },
    Group { ratio: f64, passes: u32 },
    Kmeans { k: usize, seed: u64, max_iters: usize, iterations: usize },
}

/// A total reassignment of records to new class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct RelabelMap {
    pub new_class_of: Vec<u32>,
    pub new_classes: Vec<ClassInfo>,
    pub provenance: Provenance,
}

impl RelabelMap {
    /// Builds a map whose class table is counted from `new_class_of`.
    pub fn from_assignment(new_class_of: Vec<u32>, name: impl Fn(u32) -> String, provenance: Provenance) -> Self {
        let new_classes = class_table(&new_class_of, name);
        Self {
            new_class_of,
            new_classes,
            provenance,
        }
    }

    pub fn identity(ds: &EmbeddingDataset) -> Self {
        Self {
            new_class_of: ds.labels().to_vec(),
            new_classes: ds.classes().to_vec(),
            provenance: Provenance::Identity,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.new_classes.len()
    }

    /// New class ids of the given original records, in order.
    pub fn assignment_of(&self, records: &[usize]) -> Vec<u32> {
        records.iter().map(|&r| self.new_class_of[r]).collect()
    }
}

/// Materializes the records named in `keep`, re-densifying record ids in
/// original order. Classes that keep nothing are dropped from the table.
pub fn subset(ds: &EmbeddingDataset, keep: &KeepMap) -> Result<EmbeddingDataset> {
    let mut kept = BTreeSet::new();
    for (&class, records) in keep {
        if ds.class(class).is_none() {
            return Err(Error::UnknownClass(class));
        }
        for &r in records {
            if r >= ds.len() {
                return Err(Error::UnknownRecord(r));
            }
            let actual = ds.label(r);
            if actual != class {
                return Err(Error::WrongClass {
                    record: r,
                    listed: class,
                    actual,
                });
            }
            kept.insert(r);
        }
    }
    let dim = ds.dim();
    let mut data = Vec::with_capacity(kept.len() * dim);
    let mut labels = Vec::with_capacity(kept.len());
    let mut ids = ds.source_ids().map(|_| Vec::with_capacity(kept.len()));
    for &r in &kept {
        data.extend_from_slice(ds.vector(r));
        labels.push(ds.label(r));
        if let (Some(out), Some(src)) = (ids.as_mut(), ds.source_ids()) {
            out.push(src[r].clone());
        }
    }
    let classes = class_table(&labels, |id| ds.class(id).map(|c| c.name.clone()).unwrap_or_default());
    let out = EmbeddingDataset::new(dim, data, labels, classes)?;
    match ids {
        Some(ids) => out.with_source_ids(ids),
        None => Ok(out),
    }
}

/// Replaces every record's class with the one given by `map`.
pub fn apply_relabel(ds: &EmbeddingDataset, map: &RelabelMap) -> Result<EmbeddingDataset> {
    if map.new_class_of.len() != ds.len() {
        return Err(Error::SizeMismatch {
            what: "relabel map entries".into(),
            expected: ds.len(),
            found: map.new_class_of.len(),
        });
    }
    let mut out = EmbeddingDataset::new(
        ds.dim(),
        ds.data().to_vec(),
        map.new_class_of.clone(),
        map.new_classes.clone(),
    )?;
    out.source_ids = ds.source_ids.clone();
    Ok(out)
}
