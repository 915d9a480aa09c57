//! Dataset manifests, binary tensor I/O, patchification, and the synthetic
//! dataset generator.
//!
//! A manifest is a JSON document binding modality tensor files (one sample =
//! one token matrix) to a label file and a split specification. Tensor files
//! use the little-endian `MXT1` layout and store f32; compute is f64.

mod synthetic;
mod tensor_file;

pub use synthetic::{generate_synthetic, SignalKind, SyntheticModality, SyntheticSpec};
pub use tensor_file::{read_tensor, write_tensor};

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::metrics::{LabelMatrix, TaskKind};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug)]
pub enum DataError {
    Io { path: PathBuf, source: std::io::Error },
    BadMagic { path: PathBuf, found: [u8; 4] },
    BadDtype { path: PathBuf, tag: u8 },
    Truncated { path: PathBuf, detail: String },
    Manifest { detail: String },
    MissingFile { path: PathBuf },
    Labels { detail: String },
    Synthetic { detail: String },
    Patch { detail: String },
    Json { path: PathBuf, source: serde_json::Error },
}

impl fmt::Display for DataError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DataError::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
            DataError::BadMagic { path, found } => {
                write!(f, "{}: bad magic {found:?}, expected \"MXT1\"", path.display())
            }
            DataError::BadDtype { path, tag } => {
                write!(f, "{}: unknown dtype tag {tag}", path.display())
            }
            DataError::Truncated { path, detail } => write!(f, "{}: {detail}", path.display()),
            DataError::Manifest { detail } => write!(f, "manifest: {detail}"),
            DataError::MissingFile { path } => {
                write!(f, "manifest references missing file {}", path.display())
            }
            DataError::Labels { detail } => write!(f, "labels: {detail}"),
            DataError::Synthetic { detail } => write!(f, "synthetic: {detail}"),
            DataError::Patch { detail } => write!(f, "patchify: {detail}"),
            DataError::Json { path, source } => write!(f, "{}: {source}", path.display()),
        }
    }
}

impl std::error::Error for DataError {}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalityKind {
    Sequence,
    Image,
    Tabular,
}

impl fmt::Display for ModalityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModalityKind::Sequence => write!(f, "sequence"),
            ModalityKind::Image => write!(f, "image"),
            ModalityKind::Tabular => write!(f, "tabular"),
        }
    }
}

/// One modality entry: a tensor file of shape `[N, tokens, width]`
/// (`[N, width]` for tabular, loaded as single-token matrices).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub kind: ModalityKind,
    /// Per-sample shape: `[tokens, width]` or `[width]` for tabular.
    pub shape: Vec<usize>,
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl SplitSpec {
    /// Split membership depends only on (seed, index), so it is stable under
    /// any reordering or resizing of the rest of the dataset.
    pub fn assign(&self, index: usize) -> Split {
        let mut r = Rng::new(crate::rng::mix_seed(&[self.seed, index as u64]));
        let u = r.next_f64();
        if u < self.train {
            Split::Train
        } else if u < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Dataset description: modalities, labels, task, and splits.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub task: TaskKind,
    pub num_classes: usize,
    pub modalities: Vec<ModalitySpec>,
    pub labels: PathBuf,
    pub split: SplitSpec,
}

impl Manifest {
    /// Parse and validate; relative paths are resolved against the manifest's
    /// directory.
    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DataError::Io { path: path.to_path_buf(), source: e })?;
        let mut manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| DataError::Json { path: path.to_path_buf(), source: e })?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        for m in &mut manifest.modalities {
            if m.path.is_relative() {
                m.path = base.join(&m.path);
            }
        }
        if manifest.labels.is_relative() {
            manifest.labels = base.join(&manifest.labels);
        }
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(DataError::Manifest { detail: "no modalities declared".to_string() });
        }
        let mut names: Vec<&str> = self.modalities.iter().map(|m| m.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(DataError::Manifest { detail: "modality names must be unique".to_string() });
        }
        if self.num_classes < 2 {
            return Err(DataError::Manifest { detail: "num_classes must be >= 2".to_string() });
        }
        let total = self.split.train + self.split.val + self.split.test;
        if (total - 1.0).abs() > 1e-9 {
            return Err(DataError::Manifest {
                detail: format!("split fractions must sum to 1, got {total}"),
            });
        }
        if self.split.train < 0.0 || self.split.val < 0.0 || self.split.test < 0.0 {
            return Err(DataError::Manifest { detail: "split fractions must be non-negative".to_string() });
        }
        for m in &self.modalities {
            let dims_ok = match m.kind {
                ModalityKind::Tabular => m.shape.len() == 1,
                _ => m.shape.len() == 2,
            };
            if !dims_ok || m.shape.contains(&0) {
                return Err(DataError::Manifest {
                    detail: format!("modality `{}` has invalid per-sample shape {:?}", m.name, m.shape),
                });
            }
            if !m.path.exists() {
                return Err(DataError::MissingFile { path: m.path.clone() });
            }
        }
        if !self.labels.exists() {
            return Err(DataError::MissingFile { path: self.labels.clone() });
        }
        Ok(())
    }

    /// Load only the label file (enough for sample planning).
    pub fn load_labels(&self) -> Result<Labels> {
        load_labels(self, None)
    }
}

/// Labels in task-appropriate shape.
#[derive(Debug, Clone)]
pub enum Labels {
    Classes(Vec<usize>),
    Binary(LabelMatrix),
}

impl Labels {
    pub fn len(&self) -> usize {
        match self {
            Labels::Classes(v) => v.len(),
            Labels::Binary(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn view(&self, num_classes: usize) -> crate::sampling::LabelView<'_> {
        match self {
            Labels::Classes(v) => crate::sampling::LabelView::Classes { labels: v, num_classes },
            Labels::Binary(m) => crate::sampling::LabelView::Binary(m),
        }
    }
}

/// A fully loaded dataset: per-modality per-sample token matrices plus
/// labels.
pub struct Dataset {
    pub manifest: Manifest,
    /// `samples[modality][sample]` is an `n_tokens x width` matrix.
    pub samples: Vec<Vec<Tensor>>,
    pub labels: Labels,
}

impl Dataset {
    pub fn load(manifest: Manifest) -> Result<Dataset> {
        let mut samples = Vec::with_capacity(manifest.modalities.len());
        let mut count: Option<usize> = None;
        for m in &manifest.modalities {
            let t = read_tensor(&m.path)?;
            let per_sample: Vec<usize> = m.shape.clone();
            let expect_rank = per_sample.len() + 1;
            if t.rank() != expect_rank || t.shape()[1..] != per_sample[..] {
                return Err(DataError::Manifest {
                    detail: format!(
                        "modality `{}`: file shape {:?} does not extend per-sample shape {:?}",
                        m.name,
                        t.shape(),
                        per_sample
                    ),
                });
            }
            let n = t.shape()[0];
            if let Some(c) = count {
                if c != n {
                    return Err(DataError::Manifest {
                        detail: format!("modality `{}` has {n} samples, expected {c}", m.name),
                    });
                }
            }
            count = Some(n);
            let (tokens, width) = match m.kind {
                ModalityKind::Tabular => (1, per_sample[0]),
                _ => (per_sample[0], per_sample[1]),
            };
            let stride = tokens * width;
            let data = t.data();
            let mats = (0..n)
                .map(|i| {
                    Tensor::new(vec![tokens, width], data[i * stride..(i + 1) * stride].to_vec())
                        .expect("validated shape")
                })
                .collect();
            samples.push(mats);
        }
        let n = count.expect("at least one modality");
        let labels = load_labels(&manifest, Some(n))?;
        Ok(Dataset { manifest, samples, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_modalities(&self) -> usize {
        self.samples.len()
    }

    /// Indices belonging to one split.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.manifest.split.assign(i) == split)
            .collect()
    }

    /// Token count and raw width of one modality.
    pub fn modality_dims(&self, modality: usize) -> (usize, usize) {
        let s = self.samples[modality][0].shape();
        (s[0], s[1])
    }
}

fn load_labels(manifest: &Manifest, expected: Option<usize>) -> Result<Labels> {
    let t = read_tensor(&manifest.labels)?;
    match manifest.task {
        TaskKind::Multiclass => {
            let n = expected.unwrap_or(t.numel());
            if t.rank() != 1 || t.numel() != n {
                return Err(DataError::Labels {
                    detail: format!("expected [{n}] class indices, got shape {:?}", t.shape()),
                });
            }
            let mut classes = Vec::with_capacity(n);
            for &v in t.data() {
                let c = v as usize;
                if v.fract() != 0.0 || v < 0.0 || c >= manifest.num_classes {
                    return Err(DataError::Labels {
                        detail: format!("class value {v} invalid for {} classes", manifest.num_classes),
                    });
                }
                classes.push(c);
            }
            Ok(Labels::Classes(classes))
        }
        TaskKind::Multilabel => {
            let n = expected.unwrap_or_else(|| t.shape()[0]);
            if t.rank() != 2 || t.shape()[0] != n || t.shape()[1] != manifest.num_classes {
                return Err(DataError::Labels {
                    detail: format!(
                        "expected [{n}, {}] binary matrix, got shape {:?}",
                        manifest.num_classes,
                        t.shape()
                    ),
                });
            }
            let data: Vec<u8> = t
                .data()
                .iter()
                .map(|&v| {
                    if v == 0.0 {
                        Ok(0u8)
                    } else if v == 1.0 {
                        Ok(1u8)
                    } else {
                        Err(DataError::Labels { detail: format!("label entry {v} is not 0/1") })
                    }
                })
                .collect::<Result<_>>()?;
            let m = LabelMatrix::new(n, manifest.num_classes, data)
                .map_err(|e| DataError::Labels { detail: e.to_string() })?;
            Ok(Labels::Binary(m))
        }
    }
}

/// Rearrange an `H x W x C` image into non-overlapping `p x p` patches:
/// `(H/p * W/p) tokens x (p*p*C) channels`, patches in row-major order and
/// pixels row-major within each patch. Pure reshuffle; `unpatchify` inverts
/// it exactly.
pub fn patchify(image: &Tensor, p: usize) -> Result<Tensor> {
    let dims = image.shape();
    if dims.len() != 3 {
        return Err(DataError::Patch {
            detail: format!("expected H x W x C image, got shape {dims:?}"),
        });
    }
    let (h, w, c) = (dims[0], dims[1], dims[2]);
    if p == 0 || !h.is_multiple_of(p) || !w.is_multiple_of(p) {
        return Err(DataError::Patch {
            detail: format!("patch size {p} must divide H={h} and W={w}"),
        });
    }
    let (ph, pw) = (h / p, w / p);
    let tokens = ph * pw;
    let width = p * p * c;
    let src = image.data();
    let mut out = vec![0.0; tokens * width];
    for ti in 0..ph {
        for tj in 0..pw {
            let token = ti * pw + tj;
            for dy in 0..p {
                for dx in 0..p {
                    for ch in 0..c {
                        let src_idx = ((ti * p + dy) * w + (tj * p + dx)) * c + ch;
                        let dst_idx = token * width + (dy * p + dx) * c + ch;
                        out[dst_idx] = src[src_idx];
                    }
                }
            }
        }
    }
    Ok(Tensor::new(vec![tokens, width], out).expect("patchify shape"))
}

/// Inverse of [`patchify`].
pub fn unpatchify(tokens: &Tensor, p: usize, h: usize, w: usize, c: usize) -> Result<Tensor> {
    let (n_tokens, width) = tokens
        .dims2("unpatchify")
        .map_err(|e| DataError::Patch { detail: e.to_string() })?;
    if p == 0
        || !h.is_multiple_of(p)
        || !w.is_multiple_of(p)
        || n_tokens != (h / p) * (w / p)
        || width != p * p * c
    {
        return Err(DataError::Patch {
            detail: format!("token shape [{n_tokens}, {width}] does not match {h}x{w}x{c} with p={p}"),
        });
    }
    let pw = w / p;
    let src = tokens.data();
    let mut out = vec![0.0; h * w * c];
    for token in 0..n_tokens {
        let (ti, tj) = (token / pw, token % pw);
        for dy in 0..p {
            for dx in 0..p {
                for ch in 0..c {
                    let dst_idx = ((ti * p + dy) * w + (tj * p + dx)) * c + ch;
                    out[dst_idx] = src[token * width + (dy * p + dx) * c + ch];
                }
            }
        }
    }
    Ok(Tensor::new(vec![h, w, c], out).expect("unpatchify shape"))
}
