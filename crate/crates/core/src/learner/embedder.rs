use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::vector::normalized;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedderKind {
    Identity,
    Linear,
    Mlp1,
}

impl std::str::FromStr for EmbedderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Self::Identity),
            "linear" => Ok(Self::Linear),
            "mlp1" => Ok(Self::Mlp1),
            other => Err(Error::invalid(format!("unknown embedder kind {other:?}"))),
        }
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `self · x`
    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|i| crate::vector::dot(self.row(i), x)).collect()
    }

    /// `selfᵀ · y`
    pub fn mul_t_vec(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (i, &yi) in y.iter().enumerate() {
            if yi != 0.0 {
                out.iter_mut().zip(self.row(i)).for_each(|(o, w)| *o += yi * w);
            }
        }
        out
    }

    /// `self += a · bᵀ`
    pub fn add_outer(&mut self, a: &[f64], b: &[f64]) {
        for (i, &ai) in a.iter().enumerate() {
            if ai != 0.0 {
                self.row_mut(i).iter_mut().zip(b).for_each(|(w, bj)| *w += ai * bj);
            }
        }
    }
}

/// An affine map `W x + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Dense,
    pub bias: Vec<f64>,
}

impl Layer {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Dense::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    /// Uniform in `±1/√fan_in`.
    pub fn random<R: Rng + ?Sized>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut layer = Self::zeros(out_dim, in_dim);
        layer.weight.data.iter_mut().for_each(|w| *w = rng.random_range(-bound..bound));
        layer.bias.iter_mut().for_each(|b| *b = rng.random_range(-bound..bound));
        layer
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut y = self.weight.mul_vec(x);
        y.iter_mut().zip(&self.bias).for_each(|(v, b)| *v += b);
        y
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows
    }
}

/// The feature map `f`. Its embeddings are `f(x) / ||f(x)||`.
#[derive(Clone, Debug, PartialEq)]
pub enum Embedder {
    Identity { dim: usize },
    Linear { layer: Layer },
    Mlp1 { hidden: Layer, output: Layer },
}

impl Embedder {
    pub fn kind(&self) -> EmbedderKind {
        match self {
            Embedder::Identity { .. } => EmbedderKind::Identity,
            Embedder::Linear { .. } => EmbedderKind::Linear,
            Embedder::Mlp1 { .. } => EmbedderKind::Mlp1,
        }
    }

    pub fn in_dim(&self) -> usize {
        match self {
            Embedder::Identity { dim } => *dim,
            Embedder::Linear { layer } => layer.in_dim(),
            Embedder::Mlp1 { hidden, .. } => hidden.in_dim(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match self {
            Embedder::Identity { dim } => *dim,
            Embedder::Linear { layer } => layer.out_dim(),
            Embedder::Mlp1 { output, .. } => output.out_dim(),
        }
    }

    /// Seeded initial weights.
    pub fn init<R: Rng + ?Sized>(kind: EmbedderKind, in_dim: usize, out_dim: usize, hidden: usize, rng: &mut R) -> Self {
        match kind {
            EmbedderKind::Identity => Embedder::Identity { dim: in_dim },
            EmbedderKind::Linear => Embedder::Linear {
                layer: Layer::random(out_dim, in_dim, rng),
            },
            EmbedderKind::Mlp1 => {
                let hidden_layer = Layer::random(hidden, in_dim, rng);
                let output = Layer::random(out_dim, hidden, rng);
                Embedder::Mlp1 {
                    hidden: hidden_layer,
                    output,
                }
            }
        }
    }

    /// Unnormalized output `f(x)`.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Embedder::Identity { .. } => x.to_vec(),
            Embedder::Linear { layer } => layer.forward(x),
            Embedder::Mlp1 { hidden, output } => {
                let h: Vec<f64> = hidden.forward(x).into_iter().map(|a| a.max(0.0)).collect();
                output.forward(&h)
            }
        }
    }

    /// Unit-norm embedding of `x`.
    pub fn embed_vector(&self, x: &[f64]) -> Result<Vec<f64>> {
        normalized(&self.forward(x)).ok_or(Error::ZeroVector)
    }

    /// Multiplies the output layer (weights and bias) by `factor`.
    pub fn scale_output(&mut self, factor: f64) {
        let layer = match self {
            Embedder::Identity { .. } => return,
            Embedder::Linear { layer } => layer,
            Embedder::Mlp1 { output, .. } => output,
        };
        layer.weight.data.iter_mut().for_each(|w| *w *= factor);
        layer.bias.iter_mut().for_each(|b| *b *= factor);
    }

    pub(crate) fn tensors(&self) -> Vec<(&'static str, [usize; 2], &[f64])> {
        match self {
            Embedder::Identity { .. } => vec![],
            Embedder::Linear { layer } => vec![
                ("weight", [layer.weight.rows, layer.weight.cols], &layer.weight.data),
                ("bias", [layer.bias.len(), 1], &layer.bias),
            ],
            Embedder::Mlp1 { hidden, output } => vec![
                ("hidden.weight", [hidden.weight.rows, hidden.weight.cols], &hidden.weight.data),
                ("hidden.bias", [hidden.bias.len(), 1], &hidden.bias),
                ("output.weight", [output.weight.rows, output.weight.cols], &output.weight.data),
                ("output.bias", [output.bias.len(), 1], &output.bias),
            ],
        }
    }

    pub(crate) fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Embedder::Identity { .. } => vec![],
            Embedder::Linear { layer } => vec![&mut layer.weight.data, &mut layer.bias],
            Embedder::Mlp1 { hidden, output } => vec![
                &mut hidden.weight.data,
                &mut hidden.bias,
                &mut output.weight.data,
                &mut output.bias,
            ],
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    format_version: u32,
    kind: EmbedderKind,
    in_dim: usize,
    out_dim: usize,
    dtype: String,
    blob: String,
    tensors: Vec<TensorEntry>,
}

fn blob_path(manifest: &Path, blob: &str) -> PathBuf {
    manifest.parent().map(|p| p.join(blob)).unwrap_or_else(|| PathBuf::from(blob))
}

/// Writes `path` (JSON manifest) and a sibling `.bin` float32 little-endian blob.
pub fn save_model(embedder: &Embedder, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let blob_name = format!(
        "{}.bin",
        path.file_stem().and_then(|s| s.to_str()).unwrap_or("model")
    );
    let mut tensors = Vec::new();
    let mut bytes = Vec::new();
    let mut offset = 0;
    for (name, shape, values) in embedder.tensors() {
        tensors.push(TensorEntry {
            name: name.into(),
            shape,
            offset,
        });
        offset += values.len();
        for &v in values {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let manifest = ModelManifest {
        format_version: 1,
        kind: embedder.kind(),
        in_dim: embedder.in_dim(),
        out_dim: embedder.out_dim(),
        dtype: "f32le".into(),
        blob: blob_name.clone(),
        tensors,
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(path, e))? + "\n";
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    let blob = blob_path(path, &blob_name);
    fs::write(&blob, bytes).map_err(|e| Error::io(&blob, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Embedder> {
    let path = path.as_ref();
    let text = fs::read(path).map_err(|e| Error::io(path, e))?;
    let manifest: ModelManifest = serde_json::from_slice(&text).map_err(|e| Error::json(path, e))?;
    if manifest.format_version != 1 || manifest.dtype != "f32le" {
        return Err(Error::Format(format!("model {}", path.display())));
    }
    let blob = blob_path(path, &manifest.blob);
    let bytes = fs::read(&blob).map_err(|e| Error::io(&blob, e))?;
    let values: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let hidden_width = manifest
        .tensors
        .iter()
        .find(|t| t.name == "hidden.weight")
        .map(|t| t.shape[0])
        .unwrap_or(0);
    let mut embedder = match manifest.kind {
        EmbedderKind::Identity => Embedder::Identity { dim: manifest.in_dim },
        EmbedderKind::Linear => Embedder::Linear {
            layer: Layer::zeros(manifest.out_dim, manifest.in_dim),
        },
        EmbedderKind::Mlp1 => Embedder::Mlp1 {
            hidden: Layer::zeros(hidden_width, manifest.in_dim),
            output: Layer::zeros(manifest.out_dim, hidden_width),
        },
    };
    let expected: usize = embedder.tensors().iter().map(|t| t.2.len()).sum();
    if values.len() != expected || bytes.len() % 4 != 0 {
        return Err(Error::SizeMismatch {
            what: format!("{} values", blob.display()),
            expected,
            found: values.len(),
        });
    }
    let mut offset = 0;
    for t in embedder.tensors_mut() {
        let n = t.len();
        t.copy_from_slice(&values[offset..offset + n]);
        offset += n;
    }
    Ok(embedder)
}
