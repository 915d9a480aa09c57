//! Intermediate fusion of per-modality embeddings.
//!
//! Fusion consumes one pooled `d`-vector per modality. Concat stacks them as
//! an `m x d` token matrix (one token per modality, in manifest order) so a
//! downstream fusion network has modality tokens to mix; mean and max reduce
//! elementwise to a single token. A flat `1 x (t*d)` view is available for
//! plain linear heads.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::tensor::{GradGraph, Tensor, TensorError, ValueId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionKind {
    Concat,
    Mean,
    Max,
}

impl FusionKind {
    pub const ALL: [FusionKind; 3] = [FusionKind::Concat, FusionKind::Mean, FusionKind::Max];

    pub fn name(&self) -> &'static str {
        match self {
            FusionKind::Concat => "concat",
            FusionKind::Mean => "mean",
            FusionKind::Max => "max",
        }
    }
}

impl fmt::Display for FusionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for FusionKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "concat" => Ok(FusionKind::Concat),
            "mean" => Ok(FusionKind::Mean),
            "max" => Ok(FusionKind::Max),
            other => Err(format!("unknown fusion kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FusionError {
    TooFewModalities { got: usize },
    WidthMismatch { modality: usize, expected: usize, got: usize },
    Tensor(TensorError),
}

impl fmt::Display for FusionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FusionError::TooFewModalities { got } => {
                write!(f, "fusion: need at least 2 modalities, got {got}")
            }
            FusionError::WidthMismatch { modality, expected, got } => {
                write!(f, "fusion: modality {modality} has width {got}, expected {expected}")
            }
            FusionError::Tensor(e) => write!(f, "fusion: {e}"),
        }
    }
}

impl std::error::Error for FusionError {}

impl From<TensorError> for FusionError {
    fn from(e: TensorError) -> Self {
        FusionError::Tensor(e)
    }
}

pub type Result<T> = std::result::Result<T, FusionError>;

/// Fused modality embeddings: a `t x d` token matrix where `t` is the
/// modality count for concat and 1 for mean/max.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedRepr {
    pub tokens: Tensor,
    pub kind: FusionKind,
}

impl FusedRepr {
    pub fn token_count(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }

    /// The same numbers as a flat `1 x (t*d)` row, for linear heads.
    pub fn flat(&self) -> Tensor {
        Tensor::new(vec![1, self.tokens.numel()], self.tokens.data().to_vec()).expect("flat view")
    }
}

fn check_widths(embeddings: &[&[f64]]) -> Result<usize> {
    if embeddings.len() < 2 {
        return Err(FusionError::TooFewModalities { got: embeddings.len() });
    }
    let d = embeddings[0].len();
    for (i, e) in embeddings.iter().enumerate() {
        if e.len() != d {
            return Err(FusionError::WidthMismatch { modality: i, expected: d, got: e.len() });
        }
    }
    Ok(d)
}

/// Fuse plain embedding vectors (no gradient tracking).
pub fn fuse(kind: FusionKind, embeddings: &[Tensor]) -> Result<FusedRepr> {
    let views: Vec<&[f64]> = embeddings.iter().map(|t| t.data()).collect();
    let d = check_widths(&views)?;
    let m = embeddings.len();
    let tokens = match kind {
        FusionKind::Concat => {
            let mut data = Vec::with_capacity(m * d);
            for e in &views {
                data.extend_from_slice(e);
            }
            Tensor::new(vec![m, d], data)?
        }
        FusionKind::Mean => {
            let mut data = vec![0.0; d];
            for e in &views {
                for (acc, v) in data.iter_mut().zip(e.iter()) {
                    *acc += v;
                }
            }
            for v in data.iter_mut() {
                *v /= m as f64;
            }
            Tensor::new(vec![1, d], data)?
        }
        FusionKind::Max => {
            let mut data = views[0].to_vec();
            for e in &views[1..] {
                for (acc, v) in data.iter_mut().zip(e.iter()) {
                    if *v > *acc {
                        *acc = *v;
                    }
                }
            }
            Tensor::new(vec![1, d], data)?
        }
    };
    Ok(FusedRepr { tokens, kind })
}

/// Fuse embeddings inside a gradient graph. `embeddings` are 1-D `[d]`
/// values; the result is a `t x d` node.
pub fn fuse_in_graph(
    g: &mut GradGraph,
    kind: FusionKind,
    embeddings: &[ValueId],
) -> Result<ValueId> {
    if embeddings.len() < 2 {
        return Err(FusionError::TooFewModalities { got: embeddings.len() });
    }
    let d = g.value(embeddings[0]).numel();
    for (i, &e) in embeddings.iter().enumerate() {
        if g.value(e).numel() != d {
            return Err(FusionError::WidthMismatch { modality: i, expected: d, got: g.value(e).numel() });
        }
    }
    let rows: Vec<ValueId> = embeddings
        .iter()
        .map(|&e| g.reshape(e, &[1, d]))
        .collect::<std::result::Result<_, _>>()?;
    let fused = match kind {
        FusionKind::Concat => g.concat(&rows, 0)?,
        FusionKind::Mean => {
            let mut acc = rows[0];
            for &r in &rows[1..] {
                acc = g.add(acc, r)?;
            }
            g.mul_scalar(acc, 1.0 / rows.len() as f64)?
        }
        FusionKind::Max => {
            let mut acc = rows[0];
            for &r in &rows[1..] {
                acc = g.elem_max(acc, r)?;
            }
            acc
        }
    };
    Ok(fused)
}
