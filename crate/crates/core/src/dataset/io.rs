//! Directory format.
//!
//! ```text
//! manifest.json   {"format_version":1,"dim":D,"num_records":N,"dtype":"f32le","classes":[...]}
//! embeddings.bin  N*D float32, little-endian, row-major
//! labels.bin      N uint32, little-endian
//! ids.txt         optional, one source identifier per line
//! ```
//!
//! A relabel directory holds `labels.bin` plus `relabel.json`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ClassInfo, EmbeddingDataset, Provenance, RelabelMap};
use crate::error::{Error, Result};

const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f32le";

pub const MANIFEST: &str = "manifest.json";
pub const EMBEDDINGS: &str = "embeddings.bin";
pub const LABELS: &str = "labels.bin";
pub const IDS: &str = "ids.txt";
pub const RELABEL: &str = "relabel.json";

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dim: usize,
    num_records: usize,
    dtype: String,
    classes: Vec<ClassInfo>,
}

#[derive(Serialize, Deserialize)]
struct RelabelManifest {
    format_version: u32,
    num_records: usize,
    classes: Vec<ClassInfo>,
    provenance: Provenance,
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::json(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_blob(path: &Path, write: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn decode_u32s(path: &Path, bytes: &[u8], expected: usize) -> Result<Vec<u32>> {
    if bytes.len() != expected * 4 {
        return Err(Error::SizeMismatch {
            what: format!("{} bytes", path.display()),
            expected: expected * 4,
            found: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn write_u32s(path: &Path, values: &[u32]) -> Result<()> {
    write_blob(path, |w| values.iter().try_for_each(|v| w.write_all(&v.to_le_bytes())))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<EmbeddingDataset> {
    let dir = dir.as_ref();
    let manifest: Manifest = read_json(&dir.join(MANIFEST))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("format_version {}", manifest.format_version)));
    }
    if manifest.dtype != DTYPE {
        return Err(Error::Format(format!("dtype {:?}", manifest.dtype)));
    }
    let n = manifest.num_records;
    let dim = manifest.dim;

    let emb_path = dir.join(EMBEDDINGS);
    let bytes = read(&emb_path)?;
    if bytes.len() != n * dim * 4 {
        return Err(Error::SizeMismatch {
            what: format!("{} bytes", emb_path.display()),
            expected: n * dim * 4,
            found: bytes.len(),
        });
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let labels_path = dir.join(LABELS);
    let labels = decode_u32s(&labels_path, &read(&labels_path)?, n)?;

    let ds = EmbeddingDataset::new(dim, data, labels, manifest.classes)?;

    let ids_path = dir.join(IDS);
    if ids_path.exists() {
        let text = fs::read_to_string(&ids_path).map_err(|e| Error::io(&ids_path, e))?;
        let ids: Vec<String> = text.lines().map(str::to_owned).collect();
        return ds.with_source_ids(ids);
    }
    Ok(ds)
}

pub fn save_dataset(ds: &EmbeddingDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        dim: ds.dim(),
        num_records: ds.len(),
        dtype: DTYPE.into(),
        classes: ds.classes().to_vec(),
    };
    write_json(&dir.join(MANIFEST), &manifest)?;
    write_blob(&dir.join(EMBEDDINGS), |w| {
        ds.data().iter().try_for_each(|v| w.write_all(&v.to_le_bytes()))
    })?;
    write_u32s(&dir.join(LABELS), ds.labels())?;
    let ids_path = dir.join(IDS);
    match ds.source_ids() {
        Some(ids) => {
            let mut text = ids.join("\n");
            if !ids.is_empty() {
                text.push('\n');
            }
            fs::write(&ids_path, text).map_err(|e| Error::io(&ids_path, e))?;
        }
        None if ids_path.exists() => {
            fs::remove_file(&ids_path).map_err(|e| Error::io(&ids_path, e))?;
        }
        None => {}
    }
    Ok(())
}

pub fn save_relabel(map: &RelabelMap, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = RelabelManifest {
        format_version: FORMAT_VERSION,
        num_records: map.new_class_of.len(),
        classes: map.new_classes.clone(),
        provenance: map.provenance.clone(),
    };
    write_json(&dir.join(RELABEL), &manifest)?;
    write_u32s(&dir.join(LABELS), &map.new_class_of)
}

pub fn load_relabel(dir: impl AsRef<Path>) -> Result<RelabelMap> {
    let dir = dir.as_ref();
    let manifest: RelabelManifest = read_json(&dir.join(RELABEL))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Format(format!("format_version {}", manifest.format_version)));
    }
    let labels_path = dir.join(LABELS);
    let new_class_of = decode_u32s(&labels_path, &read(&labels_path)?, manifest.num_records)?;
    let counted = super::class_table(&new_class_of, |_| String::new());
    for c in &manifest.classes {
        let actual = counted.iter().find(|k| k.id == c.id).map(|k| k.count).unwrap_or(0);
        if actual != c.count {
            return Err(Error::CountMismatch {
                class: c.id,
                table: c.count,
                actual,
            });
        }
    }
    if let Some(missing) = counted.iter().find(|k| manifest.classes.iter().all(|c| c.id != k.id)) {
        return Err(Error::UnknownClass(missing.id));
    }
    Ok(RelabelMap {
        new_class_of,
        new_classes: manifest.classes,
        provenance: manifest.provenance,
    })
}
