//! Sample-size determination and distribution-faithful random sampling.
//!
//! The sample size comes from the standard formula with finite-population
//! correction:
//!
//! ```text
//! n  = z^2 * p(1-p) / eps^2          (infinite population)
//! N' = ceil( n / (1 + n / N) )       (corrected for population N)
//! ```
//!
//! A drawn sample is accepted only when the L-infinity distance between the
//! original and sampled class distributions stays below 0.05; otherwise we
//! redraw with `seed + attempt`.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::metrics::LabelMatrix;
use crate::rng::Rng;

/// Distance threshold for accepting a drawn sample.
pub const DISTANCE_GATE: f64 = 0.05;

/// Default attempts before declaring the gate unreachable.
pub const DEFAULT_MAX_ATTEMPTS: u32 = 32;

#[derive(Debug, Clone, PartialEq)]
pub enum SamplingError {
    Param { name: &'static str, detail: String },
    SampleTooLarge { requested: usize, population: usize },
    ClassCountMismatch { left: usize, right: usize },
    GateExhausted { attempts: u32, best_distance: f64 },
}

impl fmt::Display for SamplingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SamplingError::Param { name, detail } => write!(f, "sampling: parameter `{name}` {detail}"),
            SamplingError::SampleTooLarge { requested, population } => {
                write!(f, "sampling: cannot draw {requested} from population {population}")
            }
            SamplingError::ClassCountMismatch { left, right } => {
                write!(f, "sampling: class counts differ ({left} vs {right})")
            }
            SamplingError::GateExhausted { attempts, best_distance } => write!(
                f,
                "sampling: distribution gate (<{DISTANCE_GATE}) unreachable after {attempts} attempts; \
                 best distance {best_distance:.4} — the dataset/size combination cannot be sampled faithfully"
            ),
        }
    }
}

impl std::error::Error for SamplingError {}

pub type Result<T> = std::result::Result<T, SamplingError>;

/// Class proportions of a labeled dataset: per-class fractions for
/// multiclass, per-label positive rates for multilabel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub proportions: Vec<f64>,
}

impl ClassDistribution {
    pub fn from_classes(labels: &[usize], num_classes: usize) -> Self {
        let mut counts = vec![0usize; num_classes];
        for &l in labels {
            counts[l] += 1;
        }
        let n = labels.len().max(1) as f64;
        ClassDistribution { proportions: counts.iter().map(|&c| c as f64 / n).collect() }
    }

    pub fn from_label_matrix(labels: &LabelMatrix) -> Self {
        let n = labels.rows().max(1) as f64;
        let proportions = (0..labels.cols())
            .map(|c| (0..labels.rows()).filter(|&r| labels.at(r, c) == 1).count() as f64 / n)
            .collect();
        ClassDistribution { proportions }
    }
}

/// Labels in either task shape, borrowed from the dataset.
#[derive(Debug, Clone, Copy)]
pub enum LabelView<'a> {
    Classes { labels: &'a [usize], num_classes: usize },
    Binary(&'a LabelMatrix),
}

impl LabelView<'_> {
    pub fn len(&self) -> usize {
        match self {
            LabelView::Classes { labels, .. } => labels.len(),
            LabelView::Binary(m) => m.rows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn distribution(&self) -> ClassDistribution {
        match self {
            LabelView::Classes { labels, num_classes } => {
                ClassDistribution::from_classes(labels, *num_classes)
            }
            LabelView::Binary(m) => ClassDistribution::from_label_matrix(m),
        }
    }

    pub fn distribution_of(&self, indices: &[usize]) -> ClassDistribution {
        match self {
            LabelView::Classes { labels, num_classes } => {
                let subset: Vec<usize> = indices.iter().map(|&i| labels[i]).collect();
                ClassDistribution::from_classes(&subset, *num_classes)
            }
            LabelView::Binary(m) => {
                let n = indices.len().max(1) as f64;
                let proportions = (0..m.cols())
                    .map(|c| indices.iter().filter(|&&r| m.at(r, c) == 1).count() as f64 / n)
                    .collect();
                ClassDistribution { proportions }
            }
        }
    }
}

/// Parameters of the size formula; defaults are z=1.96 (95% confidence),
/// p=0.5 (max variance), eps=0.01.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingParams {
    pub z: f64,
    pub p_hat: f64,
    pub epsilon: f64,
    pub seed: u64,
    #[serde(default = "default_max_attempts")]
    pub max_attempts: u32,
}

fn default_max_attempts() -> u32 {
    DEFAULT_MAX_ATTEMPTS
}

impl Default for SamplingParams {
    fn default() -> Self {
        SamplingParams { z: 1.96, p_hat: 0.5, epsilon: 0.01, seed: 0, max_attempts: DEFAULT_MAX_ATTEMPTS }
    }
}

/// A validated sampling outcome: the formula quantities, the accepted seed,
/// and the drawn (sorted, unique) index set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePlan {
    pub population: usize,
    pub z: f64,
    pub p_hat: f64,
    pub epsilon: f64,
    /// Infinite-population size `n` (real-valued).
    pub uncorrected: f64,
    /// Finite-population corrected size `N'`.
    pub size: usize,
    /// Base seed requested by the caller.
    pub base_seed: u64,
    /// Seed of the accepted draw (`base_seed + attempt`).
    pub accepted_seed: u64,
    pub attempt: u32,
    pub distance_metric: String,
    pub distance: f64,
    pub indices: Vec<usize>,
}

impl SamplePlan {
    /// Re-assert the construction invariants, e.g. after loading a plan
    /// from disk: the distance gate held, and the index set is sorted,
    /// unique, in range, and of the declared size.
    pub fn validate(&self) -> Result<()> {
        if self.distance.is_nan() || self.distance >= DISTANCE_GATE {
            return Err(SamplingError::Param {
                name: "distance",
                detail: format!("{} breaches the {DISTANCE_GATE} gate", self.distance),
            });
        }
        if self.indices.len() != self.size {
            return Err(SamplingError::Param {
                name: "indices",
                detail: format!("{} entries but declared size {}", self.indices.len(), self.size),
            });
        }
        let in_order = self.indices.windows(2).all(|w| w[0] < w[1]);
        let in_range = self.indices.last().is_none_or(|&i| i < self.population);
        if !in_order || !in_range {
            return Err(SamplingError::Param {
                name: "indices",
                detail: "must be sorted, unique, and below the population size".to_string(),
            });
        }
        Ok(())
    }
}

fn check_params(population: usize, z: f64, p_hat: f64, epsilon: f64) -> Result<()> {
    if population < 1 {
        return Err(SamplingError::Param { name: "N", detail: "must be at least 1".to_string() });
    }
    if z.is_nan() || z <= 0.0 || !z.is_finite() {
        return Err(SamplingError::Param { name: "z", detail: format!("must be positive, got {z}") });
    }
    if p_hat.is_nan() || p_hat <= 0.0 || p_hat >= 1.0 {
        return Err(SamplingError::Param { name: "p_hat", detail: format!("must be in (0,1), got {p_hat}") });
    }
    if epsilon.is_nan() || epsilon <= 0.0 || epsilon >= 1.0 {
        return Err(SamplingError::Param {
            name: "epsilon",
            detail: format!("must be in (0,1), got {epsilon}"),
        });
    }
    Ok(())
}

/// Evaluate the size formula. Returns `(n, N')` with `N'` the ceiling of the
/// corrected value, clamped to `[1, N]`.
pub fn compute_sample_size(population: usize, z: f64, p_hat: f64, epsilon: f64) -> Result<(f64, usize)> {
    check_params(population, z, p_hat, epsilon)?;
    let n = z * z * p_hat * (1.0 - p_hat) / (epsilon * epsilon);
    let corrected = n / (1.0 + n / population as f64);
    let size = (corrected.ceil() as usize).clamp(1, population);
    Ok((n, size))
}

/// Draw `size` distinct indices uniformly without replacement.
pub fn draw_sample(population: usize, size: usize, seed: u64) -> Result<Vec<usize>> {
    if size > population {
        return Err(SamplingError::SampleTooLarge { requested: size, population });
    }
    let mut rng = Rng::new(seed);
    Ok(rng.sample_indices(population, size))
}

/// L-infinity distance between two class distributions.
pub fn distribution_distance(orig: &ClassDistribution, sample: &ClassDistribution) -> Result<f64> {
    if orig.proportions.len() != sample.proportions.len() {
        return Err(SamplingError::ClassCountMismatch {
            left: orig.proportions.len(),
            right: sample.proportions.len(),
        });
    }
    Ok(orig
        .proportions
        .iter()
        .zip(sample.proportions.iter())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Compute the sample size for the labeled dataset, then redraw with
/// `seed + attempt` until the distribution gate passes. Errors after
/// `max_attempts` with the best distance achieved.
pub fn validated_sample(labels: &LabelView<'_>, params: &SamplingParams) -> Result<SamplePlan> {
    let population = labels.len();
    let (uncorrected, size) = compute_sample_size(population, params.z, params.p_hat, params.epsilon)?;
    let original = labels.distribution();
    let mut best = f64::INFINITY;
    for attempt in 0..params.max_attempts.max(1) {
        let seed = params.seed.wrapping_add(attempt as u64);
        let indices = draw_sample(population, size, seed)?;
        let sampled = labels.distribution_of(&indices);
        let distance = distribution_distance(&original, &sampled)?;
        if distance < DISTANCE_GATE {
            return Ok(SamplePlan {
                population,
                z: params.z,
                p_hat: params.p_hat,
                epsilon: params.epsilon,
                uncorrected,
                size,
                base_seed: params.seed,
                accepted_seed: seed,
                attempt,
                distance_metric: "linf".to_string(),
                distance,
                indices,
            });
        }
        best = best.min(distance);
    }
    Err(SamplingError::GateExhausted { attempts: params.max_attempts.max(1), best_distance: best })
}
