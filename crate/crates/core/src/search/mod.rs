//! The staged architecture search: sampling, per-modality encoder selection,
//! fusion-function selection, fusion-network selection, and full training of
//! the winning architecture.
//!
//! Stages run strictly in order and each one consumes only earlier choices.
//! Every candidate evaluation goes through the ledger, so reruns with a warm
//! ledger perform zero parameter updates and reproduce the same spec.

mod ledger;
mod train;

pub use ledger::{hex_digest, ledger_key, seed_from_key, BenchmarkRecord, Ledger};
pub use train::{
    evaluate_loss, evaluate_metric, micro_benchmark, predict, split_sample, train_model,
    BenchmarkSpec, DataView, FullModel, Predictions, SingleModalityModel, StageModel, TrainConfig,
    TrainCounters,
};

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{DataError, Dataset, ModalityKind};
use crate::fusion::{FusionError, FusionKind};
use crate::metrics::{EvalReport, MetricRegistry, MetricsError, TaskKind};
use crate::mixers::{
    build_encoder, Encoder, EncoderConfig, Head, MixersError, KIND_HYPER_MIXER, KIND_MLP_MIXER,
    KIND_MONARCH_MIXER, KIND_PLAIN_MLP,
};
use crate::rng::{mix_seed, Rng};
use crate::sampling::{SamplePlan, SamplingError, SamplingParams};
use crate::tensor::TensorError;

#[derive(Debug)]
pub enum SearchError {
    Sampling(SamplingError),
    Data(DataError),
    Tensor(TensorError),
    Metrics(MetricsError),
    Mixers(MixersError),
    Fusion(FusionError),
    Config { detail: String },
    Ledger { detail: String },
    NoCandidates { stage: String },
    AllDiverged { stage: String },
    Provenance { key: String },
}

impl fmt::Display for SearchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SearchError::Sampling(e) => write!(f, "search: {e}"),
            SearchError::Data(e) => write!(f, "search: {e}"),
            SearchError::Tensor(e) => write!(f, "search: {e}"),
            SearchError::Metrics(e) => write!(f, "search: {e}"),
            SearchError::Mixers(e) => write!(f, "search: {e}"),
            SearchError::Fusion(e) => write!(f, "search: {e}"),
            SearchError::Config { detail } => write!(f, "search config: {detail}"),
            SearchError::Ledger { detail } => write!(f, "ledger: {detail}"),
            SearchError::NoCandidates { stage } => {
                write!(f, "search: no candidates registered for stage `{stage}`")
            }
            SearchError::AllDiverged { stage } => {
                write!(f, "search: every candidate diverged in stage `{stage}`")
            }
            SearchError::Provenance { key } => {
                write!(f, "architecture references ledger key `{key}` that does not exist")
            }
        }
    }
}

impl std::error::Error for SearchError {}

impl From<SamplingError> for SearchError {
    fn from(e: SamplingError) -> Self {
        SearchError::Sampling(e)
    }
}

impl From<DataError> for SearchError {
    fn from(e: DataError) -> Self {
        SearchError::Data(e)
    }
}

impl From<TensorError> for SearchError {
    fn from(e: TensorError) -> Self {
        SearchError::Tensor(e)
    }
}

impl From<MetricsError> for SearchError {
    fn from(e: MetricsError) -> Self {
        SearchError::Metrics(e)
    }
}

impl From<MixersError> for SearchError {
    fn from(e: MixersError) -> Self {
        SearchError::Mixers(e)
    }
}

impl From<FusionError> for SearchError {
    fn from(e: FusionError) -> Self {
        SearchError::Fusion(e)
    }
}

pub type Result<T> = std::result::Result<T, SearchError>;

/// Candidate list for one modality kind. A `fixed` stage skips benchmarking
/// and uses its single entry directly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderStage {
    pub candidates: Vec<EncoderConfig>,
    #[serde(default)]
    pub fixed: bool,
}

type EncoderBuilder =
    Box<dyn Fn(&EncoderConfig, usize, usize, u64) -> crate::mixers::Result<Box<dyn Encoder>> + Send + Sync>;

/// The search space: encoder candidates per modality kind (insertion order
/// is the tie-break order), fusion functions, and fusion-network candidates.
/// External encoder kinds can be plugged in with [`Registry::register_kind`].
pub struct Registry {
    builders: BTreeMap<String, EncoderBuilder>,
    pub encoders: BTreeMap<ModalityKind, EncoderStage>,
    pub fusion_functions: Vec<FusionKind>,
    pub fusion_networks: Vec<EncoderConfig>,
}

impl Registry {
    /// Built-in kinds only, no candidates. Useful as a base for overrides.
    pub fn empty() -> Self {
        let mut reg = Registry {
            builders: BTreeMap::new(),
            encoders: BTreeMap::new(),
            fusion_functions: Vec::new(),
            fusion_networks: Vec::new(),
        };
        reg.register_kind(KIND_MLP_MIXER, build_encoder);
        reg.register_kind(KIND_HYPER_MIXER, build_encoder);
        reg.register_kind(KIND_MONARCH_MIXER, build_encoder);
        reg.register_kind(KIND_PLAIN_MLP, build_encoder);
        reg
    }

    /// Default desk-scale search space: the three mixer kinds for sequence
    /// and image modalities, a fixed plain MLP for tabular modalities,
    /// all three fusion functions, and mixer/hypernetwork fusion networks.
    pub fn standard(depth: usize, d: usize) -> Self {
        let mut reg = Self::empty();
        let mixers = vec![
            EncoderConfig::new(KIND_MLP_MIXER, depth, d),
            EncoderConfig::new(KIND_HYPER_MIXER, depth, d),
            EncoderConfig::new(KIND_MONARCH_MIXER, depth, d),
        ];
        reg.encoders.insert(
            ModalityKind::Sequence,
            EncoderStage { candidates: mixers.clone(), fixed: false },
        );
        reg.encoders.insert(ModalityKind::Image, EncoderStage { candidates: mixers, fixed: false });
        reg.encoders.insert(
            ModalityKind::Tabular,
            EncoderStage {
                candidates: vec![EncoderConfig::new(KIND_PLAIN_MLP, depth, d)],
                fixed: true,
            },
        );
        reg.fusion_functions = vec![FusionKind::Concat, FusionKind::Mean, FusionKind::Max];
        reg.fusion_networks = vec![
            EncoderConfig::new(KIND_HYPER_MIXER, depth, d),
            EncoderConfig::new(KIND_MLP_MIXER, depth, d),
        ];
        reg
    }

    /// Register an encoder builder for an (external) kind name.
    pub fn register_kind(
        &mut self,
        kind: &str,
        builder: impl Fn(&EncoderConfig, usize, usize, u64) -> crate::mixers::Result<Box<dyn Encoder>>
            + Send
            + Sync
            + 'static,
    ) {
        self.builders.insert(kind.to_string(), Box::new(builder));
    }

    pub fn has_kind(&self, kind: &str) -> bool {
        self.builders.contains_key(kind)
    }

    pub fn build(
        &self,
        cfg: &EncoderConfig,
        n_tokens: usize,
        d_raw: usize,
        seed: u64,
    ) -> Result<Box<dyn Encoder>> {
        let builder = self
            .builders
            .get(&cfg.kind)
            .ok_or_else(|| SearchError::Mixers(MixersError::UnknownKind { kind: cfg.kind.clone() }))?;
        Ok(builder(cfg, n_tokens, d_raw, seed)?)
    }

    /// Apply a JSON override: any provided section replaces the default.
    pub fn apply_overrides(&mut self, cfg: &RegistryConfig) -> Result<()> {
        for (kind_name, stage) in &cfg.encoders {
            let kind = parse_modality_kind(kind_name)?;
            self.encoders.insert(kind, stage.clone());
        }
        if let Some(fns) = &cfg.fusion_functions {
            self.fusion_functions = fns.clone();
        }
        if let Some(nets) = &cfg.fusion_networks {
            self.fusion_networks = nets.clone();
        }
        Ok(())
    }

    fn validate(&self, ds: &Dataset) -> Result<()> {
        for m in &ds.manifest.modalities {
            let stage = self.encoders.get(&m.kind).ok_or_else(|| SearchError::NoCandidates {
                stage: format!("encoder:{}", m.name),
            })?;
            if stage.candidates.is_empty() {
                return Err(SearchError::NoCandidates { stage: format!("encoder:{}", m.name) });
            }
            for c in &stage.candidates {
                c.validate()?;
                if !self.has_kind(&c.kind) {
                    return Err(SearchError::Mixers(MixersError::UnknownKind { kind: c.kind.clone() }));
                }
            }
        }
        if self.fusion_functions.is_empty() {
            return Err(SearchError::NoCandidates { stage: "fusion_function".to_string() });
        }
        if self.fusion_networks.is_empty() {
            return Err(SearchError::NoCandidates { stage: "fusion_network".to_string() });
        }
        for c in &self.fusion_networks {
            c.validate()?;
            if !self.has_kind(&c.kind) {
                return Err(SearchError::Mixers(MixersError::UnknownKind { kind: c.kind.clone() }));
            }
        }
        Ok(())
    }
}

fn parse_modality_kind(s: &str) -> Result<ModalityKind> {
    match s {
        "sequence" => Ok(ModalityKind::Sequence),
        "image" => Ok(ModalityKind::Image),
        "tabular" => Ok(ModalityKind::Tabular),
        other => Err(SearchError::Config { detail: format!("unknown modality kind `{other}`") }),
    }
}

/// JSON shape of registry overrides inside the search config.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RegistryConfig {
    #[serde(default)]
    pub encoders: BTreeMap<String, EncoderStage>,
    #[serde(default)]
    pub fusion_functions: Option<Vec<FusionKind>>,
    #[serde(default)]
    pub fusion_networks: Option<Vec<EncoderConfig>>,
}

/// Search configuration file: sampling parameters, the training recipe,
/// optional metric override and registry overrides.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SearchConfig {
    pub sampling: SamplingParams,
    pub train: TrainConfig,
    #[serde(default)]
    pub metric: Option<String>,
    #[serde(default)]
    pub registry: Option<RegistryConfig>,
    /// Channel width for default registry candidates.
    #[serde(default = "default_width")]
    pub width: usize,
    /// Depth for default registry candidates.
    #[serde(default = "default_depth")]
    pub depth: usize,
}

fn default_width() -> usize {
    16
}

fn default_depth() -> usize {
    2
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig {
            sampling: SamplingParams::default(),
            train: TrainConfig::default(),
            metric: None,
            registry: None,
            width: default_width(),
            depth: default_depth(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub in_dim: usize,
    pub num_classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderChoice {
    pub modality: String,
    pub fixed: bool,
    pub config: EncoderConfig,
}

/// The emitted architecture: one encoder per modality, the fusion function,
/// the fusion network, the head, and the ledger keys that justified each
/// choice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureSpec {
    pub format_version: u32,
    pub manifest_name: String,
    pub task: TaskKind,
    pub num_classes: usize,
    pub metric: String,
    pub encoders: Vec<EncoderChoice>,
    pub fusion: FusionKind,
    pub fusion_network: EncoderConfig,
    pub head: HeadConfig,
    pub provenance: BTreeMap<String, String>,
}

pub const ARCHITECTURE_FORMAT_VERSION: u32 = 1;

/// One row of a stage's printed table.
#[derive(Debug, Clone, Serialize)]
pub struct StageRow {
    pub module: String,
    pub score: f64,
    pub winner: bool,
    pub cached: bool,
    pub diverged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct StageSummary {
    pub stage: String,
    pub rows: Vec<StageRow>,
}

#[derive(Debug, Serialize)]
pub struct SearchOutcome {
    pub spec: ArchitectureSpec,
    pub plan: SamplePlan,
    pub stages: Vec<StageSummary>,
    pub counters: TrainCounters,
}

/// Hash identifying the drawn sample (dataset name, size, and exact rows).
pub fn sample_fingerprint(dataset_name: &str, plan: &SamplePlan) -> String {
    let mut bytes = Vec::with_capacity(plan.indices.len() * 8 + 64);
    bytes.extend_from_slice(dataset_name.as_bytes());
    bytes.extend_from_slice(&(plan.population as u64).to_le_bytes());
    bytes.extend_from_slice(&plan.accepted_seed.to_le_bytes());
    for &i in &plan.indices {
        bytes.extend_from_slice(&(i as u64).to_le_bytes());
    }
    hex_digest(&bytes)
}

/// Pick the best-scoring non-diverged record; ties keep the earliest
/// (registry insertion order). Returns the index into `records`.
fn select_winner(stage: &str, records: &[BenchmarkRecord]) -> Result<usize> {
    let mut best: Option<usize> = None;
    for (i, r) in records.iter().enumerate() {
        if r.diverged {
            continue;
        }
        match best {
            None => best = Some(i),
            Some(b) => {
                if r.score > records[b].score {
                    best = Some(i);
                }
            }
        }
    }
    best.ok_or_else(|| SearchError::AllDiverged { stage: stage.to_string() })
}

fn stage_summary(stage: &str, records: &[BenchmarkRecord], cached: &[bool], winner: usize) -> StageSummary {
    StageSummary {
        stage: stage.to_string(),
        rows: records
            .iter()
            .enumerate()
            .map(|(i, r)| StageRow {
                module: r.module.clone(),
                score: r.score,
                winner: i == winner,
                cached: cached[i],
                diverged: r.diverged,
            })
            .collect(),
    }
}

struct FullModelPlan<'a> {
    choices: &'a [EncoderChoice],
    fusion: FusionKind,
    fusion_net: Option<&'a EncoderConfig>,
}

/// Build the stage-3/4 model: fresh encoder weights per candidate, fusion,
/// optional fusion network over the fused tokens, and a task head.
fn build_full_model(
    registry: &Registry,
    ds: &Dataset,
    plan: &FullModelPlan<'_>,
    seed: u64,
) -> Result<FullModel> {
    let num_classes = ds.manifest.num_classes;
    let mut encoders = Vec::with_capacity(plan.choices.len());
    let mut d = 0usize;
    for (i, choice) in plan.choices.iter().enumerate() {
        let (n_tokens, d_raw) = ds.modality_dims(i);
        let enc = registry.build(&choice.config, n_tokens, d_raw, mix_seed(&[seed, i as u64]))?;
        d = enc.out_dim();
        encoders.push(enc);
    }
    let fused_tokens = match plan.fusion {
        FusionKind::Concat => encoders.len(),
        FusionKind::Mean | FusionKind::Max => 1,
    };
    let fusion_net = match plan.fusion_net {
        Some(cfg) => Some(registry.build(cfg, fused_tokens, d, mix_seed(&[seed, 0xF05E]))?),
        None => None,
    };
    let head_in = FullModel::head_input_dim(plan.fusion, encoders.len(), d, fusion_net.as_deref());
    let mut rng = Rng::new(mix_seed(&[seed, 0xEAD]));
    let head = Head::new(head_in, num_classes, &mut rng);
    Ok(FullModel { encoders, fusion: plan.fusion, fusion_net, head })
}

/// Run the staged search with the default registry (built-in kinds plus any
/// overrides from the config). Appends every benchmark to the ledger and
/// returns the winning architecture with per-stage tables and counters.
pub fn run_search(
    ds: &Dataset,
    config: &SearchConfig,
    ledger: &mut Ledger,
    metrics: &MetricRegistry,
) -> Result<SearchOutcome> {
    let mut registry = Registry::standard(config.depth, config.width);
    if let Some(overrides) = &config.registry {
        registry.apply_overrides(overrides)?;
    }
    run_search_with_registry(ds, config, registry, ledger, metrics)
}

/// Like [`run_search`] but with a caller-supplied registry, so external
/// encoder kinds can participate without touching the search itself.
pub fn run_search_with_registry(
    ds: &Dataset,
    config: &SearchConfig,
    registry: Registry,
    ledger: &mut Ledger,
    metrics: &MetricRegistry,
) -> Result<SearchOutcome> {
    config.train.validate()?;
    registry.validate(ds)?;
    let task = ds.manifest.task;
    let (metric_name, metric_fn) = metrics.for_task(task, config.metric.as_deref())?;
    let metric_name = metric_name.to_string();

    // Stage 1: sampling.
    let plan = crate::sampling::validated_sample(
        &ds.labels.view(ds.manifest.num_classes),
        &config.sampling,
    )?;
    plan.validate()?;
    let fingerprint = sample_fingerprint(&ds.manifest.name, &plan);
    let (train_view, eval_view) = split_sample(ds, &plan.indices, config.train.seed);

    let mut counters = TrainCounters::default();
    let mut stages = Vec::new();
    let mut provenance: BTreeMap<String, String> = BTreeMap::new();

    // Stage 2: encoder selection per modality.
    let mut choices: Vec<EncoderChoice> = Vec::with_capacity(ds.manifest.modalities.len());
    for (mi, modality) in ds.manifest.modalities.iter().enumerate() {
        let stage_name = format!("encoder:{}", modality.name);
        let stage = &registry.encoders[&modality.kind];
        if stage.fixed {
            choices.push(EncoderChoice {
                modality: modality.name.clone(),
                fixed: true,
                config: stage.candidates[0].clone(),
            });
            continue;
        }
        let (n_tokens, d_raw) = ds.modality_dims(mi);
        let mut records = Vec::new();
        let mut cached_flags = Vec::new();
        for candidate in &stage.candidates {
            let spec = BenchmarkSpec {
                stage: &stage_name,
                module: &candidate.label(),
                config: serde_json::to_value(candidate).expect("config serializes"),
                sample_fingerprint: &fingerprint,
                metric_name: &metric_name,
            };
            let num_classes = ds.manifest.num_classes;
            let build = |seed: u64| -> Result<Box<dyn StageModel>> {
                let encoder = registry.build(candidate, n_tokens, d_raw, seed)?;
                let mut rng = Rng::new(mix_seed(&[seed, 0xEAD]));
                let head = Head::new(encoder.out_dim(), num_classes, &mut rng);
                Ok(Box::new(SingleModalityModel { modality: mi, encoder, head }))
            };
            let (record, cached) = micro_benchmark(
                ledger,
                &spec,
                &config.train,
                &build,
                &train_view,
                &eval_view,
                metric_fn,
                &mut counters,
            )?;
            records.push(record);
            cached_flags.push(cached);
        }
        let winner = select_winner(&stage_name, &records)?;
        provenance.insert(stage_name.clone(), records[winner].key.clone());
        stages.push(stage_summary(&stage_name, &records, &cached_flags, winner));
        choices.push(EncoderChoice {
            modality: modality.name.clone(),
            fixed: false,
            config: stage.candidates[winner].clone(),
        });
    }

    // Stage 3: fusion-function selection (plain linear head on the flat
    // fused vector; no fusion network yet).
    let chosen_configs: Vec<EncoderConfig> = choices.iter().map(|c| c.config.clone()).collect();
    let stage_name = "fusion_function";
    let mut records = Vec::new();
    let mut cached_flags = Vec::new();
    for &kind in &registry.fusion_functions {
        let spec = BenchmarkSpec {
            stage: stage_name,
            module: kind.name(),
            config: serde_json::json!({ "fusion": kind, "encoders": chosen_configs }),
            sample_fingerprint: &fingerprint,
            metric_name: &metric_name,
        };
        let build = |seed: u64| -> Result<Box<dyn StageModel>> {
            let plan = FullModelPlan { choices: &choices, fusion: kind, fusion_net: None };
            Ok(Box::new(build_full_model(&registry, ds, &plan, seed)?))
        };
        let (record, cached) = micro_benchmark(
            ledger,
            &spec,
            &config.train,
            &build,
            &train_view,
            &eval_view,
            metric_fn,
            &mut counters,
        )?;
        records.push(record);
        cached_flags.push(cached);
    }
    let winner = select_winner(stage_name, &records)?;
    let fusion = registry.fusion_functions[winner];
    provenance.insert(stage_name.to_string(), records[winner].key.clone());
    stages.push(stage_summary(stage_name, &records, &cached_flags, winner));

    // Stage 4: fusion-network selection, full architecture end to end.
    let stage_name = "fusion_network";
    let mut records = Vec::new();
    let mut cached_flags = Vec::new();
    for candidate in &registry.fusion_networks {
        let spec = BenchmarkSpec {
            stage: stage_name,
            module: &candidate.label(),
            config: serde_json::json!({
                "fusion_network": candidate,
                "fusion": fusion,
                "encoders": chosen_configs,
            }),
            sample_fingerprint: &fingerprint,
            metric_name: &metric_name,
        };
        let build = |seed: u64| -> Result<Box<dyn StageModel>> {
            let plan =
                FullModelPlan { choices: &choices, fusion, fusion_net: Some(candidate) };
            Ok(Box::new(build_full_model(&registry, ds, &plan, seed)?))
        };
        let (record, cached) = micro_benchmark(
            ledger,
            &spec,
            &config.train,
            &build,
            &train_view,
            &eval_view,
            metric_fn,
            &mut counters,
        )?;
        records.push(record);
        cached_flags.push(cached);
    }
    let winner = select_winner(stage_name, &records)?;
    let fusion_network = registry.fusion_networks[winner].clone();
    provenance.insert(stage_name.to_string(), records[winner].key.clone());
    stages.push(stage_summary(stage_name, &records, &cached_flags, winner));

    // The head always sits on the fusion network's pooled embedding.
    let head_in = fusion_network.d;
    let spec = ArchitectureSpec {
        format_version: ARCHITECTURE_FORMAT_VERSION,
        manifest_name: ds.manifest.name.clone(),
        task,
        num_classes: ds.manifest.num_classes,
        metric: metric_name,
        encoders: choices,
        fusion,
        fusion_network,
        head: HeadConfig { in_dim: head_in, num_classes: ds.manifest.num_classes },
        provenance,
    };
    Ok(SearchOutcome { spec, plan, stages, counters })
}

/// Check that every provenance key in a spec exists in the ledger.
pub fn validate_provenance(spec: &ArchitectureSpec, ledger: &Ledger) -> Result<()> {
    for key in spec.provenance.values() {
        if ledger.get(key).is_none() {
            return Err(SearchError::Provenance { key: key.clone() });
        }
    }
    Ok(())
}

/// Instantiate the architecture described by a spec.
pub fn build_from_spec(
    registry: &Registry,
    ds: &Dataset,
    spec: &ArchitectureSpec,
    seed: u64,
) -> Result<FullModel> {
    if spec.encoders.len() != ds.num_modalities() {
        return Err(SearchError::Config {
            detail: format!(
                "architecture has {} encoders but the dataset has {} modalities",
                spec.encoders.len(),
                ds.num_modalities()
            ),
        });
    }
    for (choice, m) in spec.encoders.iter().zip(ds.manifest.modalities.iter()) {
        if choice.modality != m.name {
            return Err(SearchError::Config {
                detail: format!(
                    "architecture modality `{}` does not match manifest `{}`",
                    choice.modality, m.name
                ),
            });
        }
    }
    let plan = FullModelPlan {
        choices: &spec.encoders,
        fusion: spec.fusion,
        fusion_net: Some(&spec.fusion_network),
    };
    build_full_model(registry, ds, &plan, seed)
}

/// Outcome of full training.
pub struct FullTrainOutcome {
    pub model: FullModel,
    pub report: EvalReport,
    pub counters: TrainCounters,
    pub final_lr: f64,
}

/// Train the selected architecture on the train split with the plateau
/// scheduler and evaluate on the test split.
pub fn full_train(
    ds: &Dataset,
    spec: &ArchitectureSpec,
    cfg: &TrainConfig,
    metrics: &MetricRegistry,
) -> Result<FullTrainOutcome> {
    cfg.validate()?;
    let registry = Registry::empty();
    let mut model = build_from_spec(&registry, ds, spec, cfg.seed)?;
    let train_rows = ds.split_indices(crate::data::Split::Train);
    let val_rows = ds.split_indices(crate::data::Split::Val);
    let test_rows = ds.split_indices(crate::data::Split::Test);
    if train_rows.is_empty() || test_rows.is_empty() {
        return Err(SearchError::Config {
            detail: "full training needs non-empty train and test splits".to_string(),
        });
    }
    let train_view = DataView::new(ds, train_rows);
    let val_view = DataView::new(ds, val_rows);
    let test_view = DataView::new(ds, test_rows);

    let mut counters = TrainCounters::default();
    let full_cfg = TrainConfig { scheduler: true, ..cfg.clone() };
    let val = if val_view.is_empty() { None } else { Some(&val_view) };
    let final_lr = train_model(&mut model, &train_view, val, &full_cfg, cfg.seed, &mut counters)?;
    let (_, metric_fn) = metrics.for_task(ds.manifest.task, Some(&spec.metric))?;
    let report = evaluate_metric(&model, &test_view, metric_fn)?;
    Ok(FullTrainOutcome { model, report, counters, final_lr })
}
