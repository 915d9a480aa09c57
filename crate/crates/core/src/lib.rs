//! Sampling-based mixer architecture search for multimodal classification.
//!
//! The pipeline draws a statistically sized sample of a labeled multimodal
//! dataset, micro-benchmarks candidate MLP-style encoders, fusion functions,
//! and fusion networks in greedy stages, and emits the winning architecture
//! together with a content-addressed ledger of every benchmark score so that
//! reruns never retrain what they already measured.
//!
//! Modules:
//! - [`tensor`]: dense f64 tensors, reverse-mode autodiff, Adam, plateau LR.
//! - [`mixers`]: the candidate encoder library (mixer block, hypernetwork
//!   mixer, structured-matrix mixer, plain MLP) and classification heads.
//! - [`sampling`]: sample-size determination with finite-population
//!   correction plus the class-distribution fidelity gate.
//! - [`fusion`]: concat / mean / max fusion of modality embeddings.
//! - [`metrics`]: accuracy and weighted F1 with a pluggable registry.
//! - [`data`]: dataset manifests, binary tensor files, patchification, and
//!   the synthetic dataset generator.
//! - [`search`]: the staged search itself, the benchmark ledger, and full
//!   training of the selected architecture.

pub mod data;
pub mod fusion;
pub mod metrics;
pub mod mixers;
pub mod rng;
pub mod sampling;
pub mod search;
pub mod tensor;
