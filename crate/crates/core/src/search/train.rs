//! Training loop, stage models, and the micro-benchmark primitive.

use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use super::ledger::{ledger_key, seed_from_key, BenchmarkRecord, Ledger};
use super::SearchError;
use crate::data::{Dataset, Labels};
use crate::fusion::{fuse_in_graph, FusionKind};
use crate::metrics::{EvalData, EvalReport, LabelMatrix, MetricFn, TaskKind};
use crate::mixers::{Encoder, Head};
use crate::rng::{mix_seed, Rng};
use crate::tensor::{Adam, Binder, GradGraph, PlateauScheduler, Tensor, TensorError, ValueId};

/// Budget and seeding of one training run. Micro-benchmarks use the fixed
/// recipe (lr 0.001, 10 epochs, batch 32, no scheduler); full training
/// enables the plateau scheduler and a configurable epoch count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: u32,
    pub batch_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub scheduler: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: 0.001, epochs: 10, batch_size: 32, seed: 0, scheduler: false }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if self.lr.is_nan() || self.lr <= 0.0 {
            return Err(SearchError::Config { detail: "train.lr must be positive".to_string() });
        }
        if self.batch_size == 0 {
            return Err(SearchError::Config { detail: "train.batch_size must be positive".to_string() });
        }
        Ok(())
    }
}

/// Instrumentation: how much actual training a search performed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct TrainCounters {
    /// Optimizer steps applied (0 on a fully warm ledger).
    pub optimizer_steps: u64,
    /// Training runs executed (cache misses).
    pub trainings: u64,
    /// Ledger hits that skipped training.
    pub cache_hits: u64,
}

/// Borrowed view of a subset of dataset rows.
pub struct DataView<'a> {
    ds: &'a Dataset,
    pub indices: Vec<usize>,
}

impl<'a> DataView<'a> {
    pub fn new(ds: &'a Dataset, indices: Vec<usize>) -> Self {
        DataView { ds, indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn task(&self) -> TaskKind {
        self.ds.manifest.task
    }

    pub fn num_classes(&self) -> usize {
        self.ds.manifest.num_classes
    }

    /// Modality tensors of view row `i`.
    pub fn sample(&self, i: usize) -> Vec<&'a Tensor> {
        let row = self.indices[i];
        self.ds.samples.iter().map(|m| &m[row]).collect()
    }

    fn class_targets(&self, rows: &[usize]) -> Vec<usize> {
        match &self.ds.labels {
            Labels::Classes(c) => rows.iter().map(|&i| c[self.indices[i]]).collect(),
            Labels::Binary(_) => unreachable!("multiclass targets requested for multilabel data"),
        }
    }

    fn binary_targets(&self, rows: &[usize]) -> Tensor {
        match &self.ds.labels {
            Labels::Binary(m) => {
                let cols = m.cols();
                let mut data = Vec::with_capacity(rows.len() * cols);
                for &i in rows {
                    data.extend(m.row(self.indices[i]).iter().map(|&b| b as f64));
                }
                Tensor::new(vec![rows.len(), cols], data).expect("target shape")
            }
            Labels::Classes(_) => unreachable!("binary targets requested for multiclass data"),
        }
    }
}

/// 80/20 train/eval split of the sampled rows, stratified by class for
/// multiclass tasks and plain-shuffled for multilabel, seeded by the train
/// config so every candidate sees the same slices.
pub fn split_sample<'a>(
    ds: &'a Dataset,
    sample_indices: &[usize],
    seed: u64,
) -> (DataView<'a>, DataView<'a>) {
    let mut train = Vec::new();
    let mut eval = Vec::new();
    match &ds.labels {
        Labels::Classes(classes) => {
            let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
            for &row in sample_indices {
                groups.entry(classes[row]).or_default().push(row);
            }
            for (class, mut rows) in groups {
                let mut rng = Rng::new(mix_seed(&[seed, 0x5711, class as u64]));
                rng.shuffle(&mut rows);
                let cut = (rows.len() * 4) / 5;
                train.extend_from_slice(&rows[..cut]);
                eval.extend_from_slice(&rows[cut..]);
            }
            train.sort_unstable();
            eval.sort_unstable();
        }
        Labels::Binary(_) => {
            let mut rows = sample_indices.to_vec();
            let mut rng = Rng::new(mix_seed(&[seed, 0x5711]));
            rng.shuffle(&mut rows);
            let cut = (rows.len() * 4) / 5;
            eval = rows.split_off(cut);
            train = rows;
            train.sort_unstable();
            eval.sort_unstable();
        }
    }
    if eval.is_empty() && train.len() >= 2 {
        eval.push(train.pop().expect("nonempty"));
    }
    (DataView::new(ds, train), DataView::new(ds, eval))
}

/// Anything the stage trainer can optimize: emits one `[1, K]` logit row per
/// sample.
pub trait StageModel {
    fn logits(
        &self,
        g: &mut GradGraph,
        bind: &mut Binder,
        sample: &[&Tensor],
    ) -> Result<ValueId, SearchError>;

    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor));

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor));
}

/// Stage-2 model: one encoder + linear head on a single modality.
pub struct SingleModalityModel {
    pub modality: usize,
    pub encoder: Box<dyn Encoder>,
    pub head: Head,
}

impl StageModel for SingleModalityModel {
    fn logits(
        &self,
        g: &mut GradGraph,
        bind: &mut Binder,
        sample: &[&Tensor],
    ) -> Result<ValueId, SearchError> {
        let x = g.constant(sample[self.modality].clone())?;
        let e = self.encoder.embed(g, bind, "enc", x)?;
        Ok(self.head.forward(g, bind, "m", e)?)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        self.encoder.visit_params("enc", f);
        self.head.visit_params("m", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.encoder.visit_params_mut("enc", f);
        self.head.visit_params_mut("m", f);
    }
}

/// Stages 3/4 and full training: per-modality encoders, fusion, an optional
/// fusion network over the fused tokens, and the task head.
///
/// Without a fusion network the head reads the flat fused vector directly,
/// which isolates the fusion function's contribution in stage 3.
pub struct FullModel {
    pub encoders: Vec<Box<dyn Encoder>>,
    pub fusion: FusionKind,
    pub fusion_net: Option<Box<dyn Encoder>>,
    pub head: Head,
}

impl FullModel {
    /// Width the head must accept given fusion kind and modality count.
    pub fn head_input_dim(
        fusion: FusionKind,
        num_modalities: usize,
        d: usize,
        fusion_net: Option<&dyn Encoder>,
    ) -> usize {
        match fusion_net {
            Some(net) => net.out_dim(),
            None => match fusion {
                FusionKind::Concat => num_modalities * d,
                FusionKind::Mean | FusionKind::Max => d,
            },
        }
    }
}

impl StageModel for FullModel {
    fn logits(
        &self,
        g: &mut GradGraph,
        bind: &mut Binder,
        sample: &[&Tensor],
    ) -> Result<ValueId, SearchError> {
        let mut embeddings = Vec::with_capacity(self.encoders.len());
        for (i, encoder) in self.encoders.iter().enumerate() {
            let x = g.constant(sample[i].clone())?;
            embeddings.push(encoder.embed(g, bind, &format!("enc{i}"), x)?);
        }
        let fused = fuse_in_graph(g, self.fusion, &embeddings)?;
        let features = match &self.fusion_net {
            Some(net) => net.embed(g, bind, "fusenet", fused)?,
            None => {
                let numel = g.value(fused).numel();
                g.reshape(fused, &[1, numel])?
            }
        };
        Ok(self.head.forward(g, bind, "m", features)?)
    }

    fn visit_params(&self, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, e) in self.encoders.iter().enumerate() {
            e.visit_params(&format!("enc{i}"), f);
        }
        if let Some(net) = &self.fusion_net {
            net.visit_params("fusenet", f);
        }
        self.head.visit_params("m", f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, e) in self.encoders.iter_mut().enumerate() {
            e.visit_params_mut(&format!("enc{i}"), f);
        }
        if let Some(net) = &mut self.fusion_net {
            net.visit_params_mut("fusenet", f);
        }
        self.head.visit_params_mut("m", f);
    }
}

fn is_divergence(err: &SearchError) -> bool {
    let tensor_err = match err {
        SearchError::Tensor(e) => e,
        SearchError::Mixers(crate::mixers::MixersError::Tensor(e)) => e,
        SearchError::Fusion(crate::fusion::FusionError::Tensor(e)) => e,
        _ => return false,
    };
    matches!(
        tensor_err,
        TensorError::NonFinite { .. } | TensorError::NonFiniteGrad { .. }
    )
}

/// Forward a batch of view rows and return the scalar task loss.
fn batch_loss(
    model: &dyn StageModel,
    g: &mut GradGraph,
    bind: &mut Binder,
    view: &DataView<'_>,
    rows: &[usize],
) -> Result<ValueId, SearchError> {
    let mut logit_rows = Vec::with_capacity(rows.len());
    for &row in rows {
        let sample = view.sample(row);
        logit_rows.push(model.logits(g, bind, &sample)?);
    }
    let logits = g.concat(&logit_rows, 0)?;
    let loss = match view.task() {
        TaskKind::Multiclass => {
            let targets = view.class_targets(rows);
            g.cross_entropy(logits, &targets)?
        }
        TaskKind::Multilabel => {
            let targets = view.binary_targets(rows);
            g.binary_cross_entropy(logits, &targets)?
        }
    };
    Ok(loss)
}

/// Average loss over a view without touching gradients.
pub fn evaluate_loss(model: &dyn StageModel, view: &DataView<'_>) -> Result<f64, SearchError> {
    let mut total = 0.0;
    let mut count = 0usize;
    let rows: Vec<usize> = (0..view.len()).collect();
    for chunk in rows.chunks(64) {
        let mut g = GradGraph::new();
        let mut bind = Binder::new(false);
        let loss = batch_loss(model, &mut g, &mut bind, view, chunk)?;
        total += g.value(loss).data()[0] * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Deterministic gradient training: per-epoch shuffled batches, Adam
/// updates, optional plateau scheduling on a validation view. Returns the
/// final learning rate.
pub fn train_model(
    model: &mut dyn StageModel,
    train: &DataView<'_>,
    val: Option<&DataView<'_>>,
    cfg: &TrainConfig,
    run_seed: u64,
    counters: &mut TrainCounters,
) -> Result<f64, SearchError> {
    let mut adam = Adam::new(cfg.lr);
    let mut sched = cfg.scheduler.then(|| PlateauScheduler::new(cfg.lr));
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = Rng::new(mix_seed(&[run_seed, 0xE90C, epoch as u64]));
        rng.shuffle(&mut order);
        for batch in order.chunks(cfg.batch_size) {
            let mut g = GradGraph::new();
            let mut bind = Binder::new(true);
            let loss = batch_loss(model, &mut g, &mut bind, train, batch)?;
            g.backward(loss)?;
            let grads: std::collections::BTreeMap<String, Vec<f64>> = bind
                .grads(&g)
                .into_iter()
                .map(|(name, gr)| (name, gr.to_vec()))
                .collect();
            adam.begin_step();
            let mut update_err: Option<TensorError> = None;
            model.visit_params_mut(&mut |name, tensor| {
                if update_err.is_some() {
                    return;
                }
                if let Some(gr) = grads.get(name) {
                    if let Err(e) = adam.update(name, tensor, gr) {
                        update_err = Some(e);
                    }
                }
            });
            if let Some(e) = update_err {
                return Err(e.into());
            }
            counters.optimizer_steps += 1;
        }
        if let Some(sched) = sched.as_mut() {
            let probe = val.unwrap_or(train);
            let val_loss = evaluate_loss(model, probe)?;
            adam.set_lr(sched.step(val_loss));
        }
    }
    Ok(adam.lr())
}

/// Predictions on a view: argmax classes for multiclass, sigmoid >= 0.5 for
/// multilabel.
pub fn predict(model: &dyn StageModel, view: &DataView<'_>) -> Result<Predictions, SearchError> {
    let mut class_preds = Vec::new();
    let mut binary = Vec::new();
    let num_classes = view.num_classes();
    for i in 0..view.len() {
        let mut g = GradGraph::new();
        let mut bind = Binder::new(false);
        let sample = view.sample(i);
        let logits = model.logits(&mut g, &mut bind, &sample)?;
        let row = g.value(logits).data();
        match view.task() {
            TaskKind::Multiclass => {
                let mut best = 0usize;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                class_preds.push(best);
            }
            TaskKind::Multilabel => {
                binary.extend(row.iter().map(|&z| u8::from(z >= 0.0)));
            }
        }
    }
    match view.task() {
        TaskKind::Multiclass => Ok(Predictions::Classes(class_preds)),
        TaskKind::Multilabel => {
            // logit >= 0 is exactly sigmoid >= 0.5
            let m = LabelMatrix::new(view.len(), num_classes, binary)
                .map_err(SearchError::Metrics)?;
            Ok(Predictions::Binary(m))
        }
    }
}

pub enum Predictions {
    Classes(Vec<usize>),
    Binary(LabelMatrix),
}

/// Score a trained model on an eval view with the task metric.
pub fn evaluate_metric(
    model: &dyn StageModel,
    view: &DataView<'_>,
    metric: &MetricFn,
) -> Result<EvalReport, SearchError> {
    let preds = predict(model, view)?;
    let report = match (&preds, &view.ds.labels) {
        (Predictions::Classes(p), Labels::Classes(l)) => {
            let labels: Vec<usize> = view.indices.iter().map(|&i| l[i]).collect();
            metric(&EvalData::Multiclass { preds: p, labels: &labels, num_classes: view.num_classes() })?
        }
        (Predictions::Binary(p), Labels::Binary(l)) => {
            let mut data = Vec::with_capacity(view.len() * l.cols());
            for &i in &view.indices {
                data.extend_from_slice(l.row(i));
            }
            let labels = LabelMatrix::new(view.len(), l.cols(), data).map_err(SearchError::Metrics)?;
            metric(&EvalData::Multilabel { preds: p, labels: &labels })?
        }
        _ => unreachable!("prediction shape always matches the task"),
    };
    Ok(report)
}

/// Identity of one benchmark within a stage.
pub struct BenchmarkSpec<'a> {
    pub stage: &'a str,
    pub module: &'a str,
    pub config: serde_json::Value,
    pub sample_fingerprint: &'a str,
    pub metric_name: &'a str,
}

/// Train-and-score one candidate, consulting the ledger first.
///
/// The model seed is derived from the ledger key, so results depend only on
/// candidate content, never on evaluation order. Divergence (NaN/Inf during
/// training) yields a score-0 record with the `diverged` flag instead of an
/// error: a bad candidate must lose, not crash the search.
#[allow(clippy::too_many_arguments)]
pub fn micro_benchmark(
    ledger: &mut Ledger,
    spec: &BenchmarkSpec<'_>,
    cfg: &TrainConfig,
    build: &dyn Fn(u64) -> Result<Box<dyn StageModel>, SearchError>,
    train: &DataView<'_>,
    eval: &DataView<'_>,
    metric: &MetricFn,
    counters: &mut TrainCounters,
) -> Result<(BenchmarkRecord, bool), SearchError> {
    let key = ledger_key(
        spec.stage,
        spec.module,
        &spec.config,
        spec.sample_fingerprint,
        cfg,
        spec.metric_name,
    );
    if let Some(record) = ledger.get(&key) {
        counters.cache_hits += 1;
        return Ok((record.clone(), true));
    }
    let started = Instant::now();
    let run_seed = seed_from_key(&key);
    let mut model = build(run_seed)?;
    // Micro-benchmarks never schedule; the fixed recipe keeps keys honest.
    let micro_cfg = TrainConfig { scheduler: false, ..cfg.clone() };
    let outcome = train_model(model.as_mut(), train, None, &micro_cfg, run_seed, counters)
        .and_then(|_lr| evaluate_metric(model.as_ref(), eval, metric));
    let (score, diverged, report) = match outcome {
        Ok(report) => (report.score, false, Some(report)),
        Err(e) if is_divergence(&e) => (0.0, true, None),
        Err(e) => return Err(e),
    };
    counters.trainings += 1;
    let record = BenchmarkRecord {
        key,
        stage: spec.stage.to_string(),
        module: spec.module.to_string(),
        config: spec.config.clone(),
        score,
        diverged,
        report,
        wall_time_ms: started.elapsed().as_millis() as u64,
        timestamp: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
    };
    ledger.append(record.clone())?;
    Ok((record, false))
}
