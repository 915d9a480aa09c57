//! Task-aware evaluation metrics.
//!
//! Multiclass tasks default to accuracy, imbalanced multilabel tasks to
//! support-weighted F1. A registry lets callers override the metric by name
//! or plug in their own.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    Empty,
    LengthMismatch { preds: usize, labels: usize },
    ShapeMismatch { detail: String },
    UnknownMetric { name: String },
    WrongTask { metric: String, detail: String },
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::Empty => write!(f, "metrics: empty input"),
            MetricsError::LengthMismatch { preds, labels } => {
                write!(f, "metrics: {preds} predictions vs {labels} labels")
            }
            MetricsError::ShapeMismatch { detail } => write!(f, "metrics: {detail}"),
            MetricsError::UnknownMetric { name } => write!(f, "metrics: unknown metric `{name}`"),
            MetricsError::WrongTask { metric, detail } => {
                write!(f, "metrics: `{metric}` cannot score this task: {detail}")
            }
        }
    }
}

impl std::error::Error for MetricsError {}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Dense binary matrix (rows = samples, cols = labels) for multilabel tasks.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMatrix {
    rows: usize,
    cols: usize,
    data: Vec<u8>,
}

impl LabelMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<u8>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(MetricsError::ShapeMismatch {
                detail: format!("{rows}x{cols} matrix needs {} entries, got {}", rows * cols, data.len()),
            });
        }
        if data.iter().any(|&v| v > 1) {
            return Err(MetricsError::ShapeMismatch { detail: "entries must be 0 or 1".to_string() });
        }
        Ok(LabelMatrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn at(&self, r: usize, c: usize) -> u8 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[u8] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// One-hot encoding of class indices.
    pub fn from_classes(classes: &[usize], num_classes: usize) -> Self {
        let mut data = vec![0u8; classes.len() * num_classes];
        for (i, &c) in classes.iter().enumerate() {
            data[i * num_classes + c] = 1;
        }
        LabelMatrix { rows: classes.len(), cols: num_classes, data }
    }
}

/// Per-class precision/recall/F1 with raw support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

/// Outcome of one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: String,
    pub score: f64,
    pub per_class: Vec<ClassStats>,
    pub samples: usize,
}

/// Inputs a metric function scores.
#[derive(Debug, Clone)]
pub enum EvalData<'a> {
    Multiclass { preds: &'a [usize], labels: &'a [usize], num_classes: usize },
    Multilabel { preds: &'a LabelMatrix, labels: &'a LabelMatrix },
}

/// Fraction of exactly matching predictions.
pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { preds: preds.len(), labels: labels.len() });
    }
    let hits = preds.iter().zip(labels.iter()).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / preds.len() as f64)
}

fn per_class_stats(preds: &LabelMatrix, labels: &LabelMatrix) -> Vec<ClassStats> {
    let mut out = Vec::with_capacity(labels.cols());
    for c in 0..labels.cols() {
        let mut tp = 0usize;
        let mut fp = 0usize;
        let mut fn_ = 0usize;
        for r in 0..labels.rows() {
            match (preds.at(r, c), labels.at(r, c)) {
                (1, 1) => tp += 1,
                (1, 0) => fp += 1,
                (0, 1) => fn_ += 1,
                _ => {}
            }
        }
        let support = tp + fn_;
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if support == 0 { 0.0 } else { tp as f64 / support as f64 };
        // Count form of F1; equals 2PR/(P+R) and is exact in the common cases.
        let denom = 2 * tp + fp + fn_;
        let f1 = if denom == 0 { 0.0 } else { 2.0 * tp as f64 / denom as f64 };
        out.push(ClassStats { precision, recall, f1, support });
    }
    out
}

/// Support-weighted F1 over binary label matrices. Classes with zero support
/// contribute zero weight; F1 is 0 whenever its denominator vanishes.
pub fn weighted_f1(preds: &LabelMatrix, labels: &LabelMatrix) -> Result<EvalReport> {
    if preds.rows() != labels.rows() || preds.cols() != labels.cols() {
        return Err(MetricsError::ShapeMismatch {
            detail: format!(
                "preds {}x{} vs labels {}x{}",
                preds.rows(),
                preds.cols(),
                labels.rows(),
                labels.cols()
            ),
        });
    }
    if labels.rows() == 0 {
        return Err(MetricsError::Empty);
    }
    let per_class = per_class_stats(preds, labels);
    let total_support: usize = per_class.iter().map(|c| c.support).sum();
    let score = if total_support == 0 {
        0.0
    } else {
        per_class.iter().map(|c| c.support as f64 * c.f1).sum::<f64>() / total_support as f64
    };
    Ok(EvalReport {
        metric: "weighted_f1".to_string(),
        score,
        per_class,
        samples: labels.rows(),
    })
}

/// Accuracy over class indices, with one-hot per-class stats in the report.
pub fn accuracy_report(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<EvalReport> {
    let score = accuracy(preds, labels)?;
    let p = LabelMatrix::from_classes(preds, num_classes);
    let l = LabelMatrix::from_classes(labels, num_classes);
    Ok(EvalReport {
        metric: "accuracy".to_string(),
        score,
        per_class: per_class_stats(&p, &l),
        samples: labels.len(),
    })
}

/// Multiclass weighted F1: one-hot, then the multilabel path.
pub fn weighted_f1_multiclass(preds: &[usize], labels: &[usize], num_classes: usize) -> Result<EvalReport> {
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch { preds: preds.len(), labels: labels.len() });
    }
    if preds.is_empty() {
        return Err(MetricsError::Empty);
    }
    let p = LabelMatrix::from_classes(preds, num_classes);
    let l = LabelMatrix::from_classes(labels, num_classes);
    weighted_f1(&p, &l)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Multiclass,
    Multilabel,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TaskKind::Multiclass => write!(f, "multiclass"),
            TaskKind::Multilabel => write!(f, "multilabel"),
        }
    }
}

pub type MetricFn = Box<dyn Fn(&EvalData<'_>) -> Result<EvalReport> + Send + Sync>;

/// Named metric functions; callers may register their own.
pub struct MetricRegistry {
    metrics: BTreeMap<String, MetricFn>,
}

impl Default for MetricRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl MetricRegistry {
    /// Registry preloaded with `accuracy` and `weighted_f1`.
    pub fn new() -> Self {
        let mut reg = MetricRegistry { metrics: BTreeMap::new() };
        reg.register("accuracy", |data| match data {
            EvalData::Multiclass { preds, labels, num_classes } => {
                accuracy_report(preds, labels, *num_classes)
            }
            EvalData::Multilabel { .. } => Err(MetricsError::WrongTask {
                metric: "accuracy".to_string(),
                detail: "accuracy scores class indices, not label matrices".to_string(),
            }),
        });
        reg.register("weighted_f1", |data| match data {
            EvalData::Multiclass { preds, labels, num_classes } => {
                weighted_f1_multiclass(preds, labels, *num_classes)
            }
            EvalData::Multilabel { preds, labels } => weighted_f1(preds, labels),
        });
        reg
    }

    pub fn register(
        &mut self,
        name: &str,
        f: impl Fn(&EvalData<'_>) -> Result<EvalReport> + Send + Sync + 'static,
    ) {
        self.metrics.insert(name.to_string(), Box::new(f));
    }

    pub fn get(&self, name: &str) -> Result<&MetricFn> {
        self.metrics
            .get(name)
            .ok_or_else(|| MetricsError::UnknownMetric { name: name.to_string() })
    }

    /// Default mapping (multiclass -> accuracy, multilabel -> weighted F1),
    /// overridable by registry name.
    pub fn for_task(&self, task: TaskKind, override_name: Option<&str>) -> Result<(&str, &MetricFn)> {
        let name = match override_name {
            Some(n) => n,
            None => match task {
                TaskKind::Multiclass => "accuracy",
                TaskKind::Multilabel => "weighted_f1",
            },
        };
        let f = self.get(name)?;
        let key = self
            .metrics
            .keys()
            .find(|k| k.as_str() == name)
            .expect("key present after get");
        Ok((key.as_str(), f))
    }
}
