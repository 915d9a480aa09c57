//! Synthetic multimodal datasets with planted signals.
//!
//! Each modality carries its class information in a chosen structure:
//!
//! - `token_order`: every class shows the same multiset of tokens, rotated
//!   by the class index. Mean-pooling the tokens destroys the signal, so
//!   recovering it requires token mixing.
//! - `pooled_mean`: the class is encoded in the token mean and survives
//!   pooling.
//! - `disjoint_bits`: with four classes and two modalities, modality `j`
//!   carries only bit `j` of the class index, on top of a strong per-sample
//!   nuisance vector shared by both modalities. Either modality alone caps
//!   at 50% accuracy; removing the nuisance requires comparing the two
//!   channels, which concatenation permits and elementwise fusion does not.
//!
//! Generation is a pure function of the spec; rerunning writes byte-identical
//! files.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataError, Manifest, ModalityKind, ModalitySpec, Result, SplitSpec};
use crate::metrics::TaskKind;
use crate::rng::{mix_seed, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    TokenOrder,
    PooledMean,
    DisjointBits,
}

impl fmt::Display for SignalKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SignalKind::TokenOrder => write!(f, "token_order"),
            SignalKind::PooledMean => write!(f, "pooled_mean"),
            SignalKind::DisjointBits => write!(f, "disjoint_bits"),
        }
    }
}

/// Amplitude of the shared nuisance vector in `disjoint_bits` data.
pub const DISJOINT_NUISANCE_SCALE: f64 = 5.0;

/// Amplitude of the per-modality bit cue in `disjoint_bits` data.
pub const DISJOINT_CUE_SCALE: f64 = 3.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticModality {
    pub name: String,
    pub signal: SignalKind,
    pub tokens: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub name: String,
    pub seed: u64,
    pub num_samples: usize,
    pub num_classes: usize,
    pub modalities: Vec<SyntheticModality>,
    pub noise: f64,
    pub split: SplitSpec,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modalities.len() < 2 {
            return Err(DataError::Synthetic {
                detail: format!("need at least 2 modalities, got {}", self.modalities.len()),
            });
        }
        if self.num_classes < 2 {
            return Err(DataError::Synthetic { detail: "need at least 2 classes".to_string() });
        }
        if self.num_samples < self.num_classes {
            return Err(DataError::Synthetic { detail: "need at least one sample per class".to_string() });
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return Err(DataError::Synthetic { detail: format!("noise must be >= 0, got {}", self.noise) });
        }
        let bit_modalities =
            self.modalities.iter().filter(|m| m.signal == SignalKind::DisjointBits).count();
        if bit_modalities > 0 {
            if bit_modalities != self.modalities.len() || self.modalities.len() != 2 {
                return Err(DataError::Synthetic {
                    detail: "disjoint_bits requires exactly 2 modalities, both disjoint_bits".to_string(),
                });
            }
            if self.num_classes != 4 {
                return Err(DataError::Synthetic {
                    detail: "disjoint_bits requires exactly 4 classes (2 bits)".to_string(),
                });
            }
            if self.modalities[0].width != self.modalities[1].width {
                return Err(DataError::Synthetic {
                    detail: "disjoint_bits modalities must share one width (the nuisance is common)"
                        .to_string(),
                });
            }
        }
        for m in &self.modalities {
            if m.tokens == 0 || m.width == 0 {
                return Err(DataError::Synthetic {
                    detail: format!("modality `{}` has empty shape", m.name),
                });
            }
            if m.signal == SignalKind::TokenOrder && m.tokens < self.num_classes {
                return Err(DataError::Synthetic {
                    detail: format!(
                        "token_order modality `{}` needs tokens >= num_classes ({} < {})",
                        m.name, m.tokens, self.num_classes
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Balanced class labels in randomized order, deterministic from the seed.
fn make_labels(spec: &SyntheticSpec) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..spec.num_samples).map(|i| i % spec.num_classes).collect();
    let mut rng = Rng::new(mix_seed(&[spec.seed, 0xC1A55]));
    rng.shuffle(&mut labels);
    labels
}

fn generate_modality(
    spec: &SyntheticSpec,
    index: usize,
    m: &SyntheticModality,
    labels: &[usize],
) -> Tensor {
    let mut rng = Rng::new(mix_seed(&[spec.seed, index as u64 + 1]));
    let (t, w) = (m.tokens, m.width);
    let mut data = vec![0.0; spec.num_samples * t * w];
    match m.signal {
        SignalKind::TokenOrder => {
            // One shared token bank; class c reads it rotated by c.
            let bank: Vec<f64> = (0..t * w).map(|_| rng.normal()).collect();
            for (s, &c) in labels.iter().enumerate() {
                for p in 0..t {
                    let src = ((p + c) % t) * w;
                    for j in 0..w {
                        data[(s * t + p) * w + j] = bank[src + j] + spec.noise * rng.normal();
                    }
                }
            }
        }
        SignalKind::PooledMean => {
            let means: Vec<f64> = (0..spec.num_classes * w).map(|_| rng.normal()).collect();
            for (s, &c) in labels.iter().enumerate() {
                for p in 0..t {
                    for j in 0..w {
                        data[(s * t + p) * w + j] = means[c * w + j] + spec.noise * rng.normal();
                    }
                }
            }
        }
        SignalKind::DisjointBits => {
            // This modality sees only bit `index` of the class as a
            // token-constant direction, on top of a strong per-sample
            // nuisance vector shared by BOTH modalities. Keeping the two
            // channels separate lets a head cancel the nuisance across them
            // (it spans only half of the concatenated space); elementwise
            // mean or max bakes it into every usable direction. Both the
            // cue and the nuisance are token-constant, so no within-modality
            // token mixing can separate them either.
            let direction: Vec<f64> = (0..w).map(|_| DISJOINT_CUE_SCALE * rng.normal()).collect();
            for (s, &c) in labels.iter().enumerate() {
                let bit = (c >> index) & 1;
                let sign = 2.0 * bit as f64 - 1.0;
                // Re-derived identically for the other modality of sample s.
                let mut nuisance_rng = Rng::new(mix_seed(&[spec.seed, 0x5A2ED, s as u64]));
                let nuisance: Vec<f64> =
                    (0..w).map(|_| DISJOINT_NUISANCE_SCALE * nuisance_rng.normal()).collect();
                for p in 0..t {
                    for j in 0..w {
                        data[(s * t + p) * w + j] =
                            sign * direction[j] + nuisance[j] + spec.noise * rng.normal();
                    }
                }
            }
        }
    }
    Tensor::new(vec![spec.num_samples, t, w], data).expect("synthetic shape")
}

/// Materialize the dataset under `out_dir` and return the loaded manifest.
/// Identical specs produce byte-identical directory trees.
pub fn generate_synthetic(spec: &SyntheticSpec, out_dir: &Path) -> Result<Manifest> {
    spec.validate()?;
    std::fs::create_dir_all(out_dir)
        .map_err(|e| DataError::Io { path: out_dir.to_path_buf(), source: e })?;
    let labels = make_labels(spec);

    let mut modality_specs = Vec::with_capacity(spec.modalities.len());
    for (i, m) in spec.modalities.iter().enumerate() {
        let mut tensor = generate_modality(spec, i, m, &labels);
        if m.tokens == 1 {
            // Single-token modalities are stored tabular: [N, width].
            tensor = Tensor::new(vec![spec.num_samples, m.width], tensor.data().to_vec())
                .expect("tabular reshape");
        }
        let file = format!("{}_{}.mxt", spec.name, m.name);
        super::write_tensor(&out_dir.join(&file), &tensor)?;
        modality_specs.push(ModalitySpec {
            name: m.name.clone(),
            kind: if m.tokens == 1 { ModalityKind::Tabular } else { ModalityKind::Sequence },
            shape: if m.tokens == 1 { vec![m.width] } else { vec![m.tokens, m.width] },
            path: file.into(),
        });
    }

    let label_tensor =
        Tensor::new(vec![labels.len()], labels.iter().map(|&c| c as f64).collect()).expect("labels");
    let labels_file = format!("{}_labels.mxt", spec.name);
    super::write_tensor(&out_dir.join(&labels_file), &label_tensor)?;

    let manifest = Manifest {
        name: spec.name.clone(),
        task: TaskKind::Multiclass,
        num_classes: spec.num_classes,
        modalities: modality_specs,
        labels: labels_file.into(),
        split: spec.split,
    };
    let manifest_path = out_dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DataError::Json { path: manifest_path.clone(), source: e })?;
    std::fs::write(&manifest_path, json.as_bytes())
        .map_err(|e| DataError::Io { path: manifest_path.clone(), source: e })?;
    Manifest::load(&manifest_path)
}
