//! Integration tests for the search pipeline: ledger contracts, selection
//! semantics, divergence handling, determinism, and the planted-signal
//! oracles behind the synthetic datasets.

mod common;

use std::path::Path;

use mixmas::data::{
    generate_synthetic, write_tensor, Dataset, Manifest, SignalKind, SplitSpec, SyntheticModality,
    SyntheticSpec,
};
use mixmas::fusion::FusionKind;
use mixmas::metrics::MetricRegistry;
use mixmas::mixers::{Encoder, EncoderConfig, Head, MixEncoder};
use mixmas::rng::{mix_seed, Rng};
use mixmas::sampling::SamplingParams;
use mixmas::search::{
    evaluate_metric, micro_benchmark, run_search, split_sample, train_model, BenchmarkSpec,
    DataView, EncoderStage, FullModel, Ledger, RegistryConfig, SearchConfig, SearchError,
    SingleModalityModel, TrainConfig, TrainCounters,
};
use mixmas::tensor::Tensor;

fn small_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        name: format!("small{seed}"),
        seed,
        num_samples: 240,
        num_classes: 3,
        modalities: vec![
            SyntheticModality { name: "m0".into(), signal: SignalKind::TokenOrder, tokens: 6, width: 6 },
            SyntheticModality { name: "m1".into(), signal: SignalKind::PooledMean, tokens: 4, width: 5 },
        ],
        noise: 0.2,
        split: SplitSpec { train: 0.7, val: 0.1, test: 0.2, seed },
    }
}

fn small_config(seed: u64) -> SearchConfig {
    SearchConfig {
        sampling: SamplingParams { epsilon: 0.07, seed, ..Default::default() },
        train: TrainConfig { epochs: 4, seed, ..Default::default() },
        width: 8,
        depth: 1,
        ..Default::default()
    }
}

fn load_small(dir: &Path, seed: u64) -> Dataset {
    let manifest = generate_synthetic(&small_spec(seed), dir).unwrap();
    Dataset::load(manifest).unwrap()
}

#[test]
fn micro_benchmark_cache_contract() {
    let dir = tempfile::tempdir().unwrap();
    let ds = load_small(dir.path(), 3);
    let config = small_config(3);
    let plan = mixmas::sampling::validated_sample(
        &ds.labels.view(ds.manifest.num_classes),
        &config.sampling,
    )
    .unwrap();
    let (train, eval) = split_sample(&ds, &plan.indices, config.train.seed);
    let metrics = MetricRegistry::new();
    let (_, metric) = metrics.for_task(ds.manifest.task, None).unwrap();
    let candidate = EncoderConfig::new("mlp_mixer", 1, 8);
    let (n_tokens, d_raw) = ds.modality_dims(0);

    let build = |seed: u64| -> Result<Box<dyn mixmas::search::StageModel>, SearchError> {
        let encoder = mixmas::mixers::build_encoder(&candidate, n_tokens, d_raw, seed)?;
        let mut rng = Rng::new(mix_seed(&[seed, 0xEAD]));
        let head = Head::new(encoder.out_dim(), ds.manifest.num_classes, &mut rng);
        Ok(Box::new(SingleModalityModel { modality: 0, encoder, head }))
    };

    let mut ledger = Ledger::in_memory();
    let mut counters = TrainCounters::default();
    let spec = BenchmarkSpec {
        stage: "encoder:m0",
        module: "mlp_mixer(depth=1,d=8)",
        config: serde_json::to_value(&candidate).unwrap(),
        sample_fingerprint: "fp-test",
        metric_name: "accuracy",
    };
    let (first, cached1) =
        micro_benchmark(&mut ledger, &spec, &config.train, &build, &train, &eval, metric, &mut counters)
            .unwrap();
    assert!(!cached1);
    assert_eq!(counters.trainings, 1);
    let steps_after_first = counters.optimizer_steps;
    assert!(steps_after_first > 0);

    // Same key again: cached record, zero additional training.
    let (second, cached2) =
        micro_benchmark(&mut ledger, &spec, &config.train, &build, &train, &eval, metric, &mut counters)
            .unwrap();
    assert!(cached2);
    assert_eq!(counters.trainings, 1);
    assert_eq!(counters.optimizer_steps, steps_after_first);
    assert_eq!(first.key, second.key);
    assert_eq!(first.score.to_bits(), second.score.to_bits());
}

#[test]
fn benchmark_scores_are_bitwise_deterministic() {
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let ds = load_small(dir.path(), 5);
        let mut ledger = Ledger::in_memory();
        run_search(&ds, &small_config(5), &mut ledger, &MetricRegistry::new()).unwrap();
        ledger
            .records()
            .iter()
            .map(|r| (r.key.clone(), r.score.to_bits()))
            .collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

#[test]
fn ledger_surgery_flips_selection() {
    let dir = tempfile::tempdir().unwrap();
    let ds = load_small(dir.path(), 7);
    let config = small_config(7);
    let ledger_path = dir.path().join("ledger.jsonl");
    let first = {
        let mut ledger = Ledger::open(&ledger_path).unwrap();
        run_search(&ds, &config, &mut ledger, &MetricRegistry::new()).unwrap()
    };

    // Pick the fusion-function stage and a loser to promote.
    let stage = first.stages.iter().find(|s| s.stage == "fusion_function").unwrap();
    let winner_row = stage.rows.iter().find(|r| r.winner).unwrap();
    let loser_row = stage.rows.iter().find(|r| !r.winner && !r.diverged).unwrap();
    let boosted = winner_row.score + 1.0;

    // Rewrite the loser's score in the ledger file.
    let text = std::fs::read_to_string(&ledger_path).unwrap();
    let rewritten: Vec<String> = text
        .lines()
        .map(|line| {
            let mut record: serde_json::Value = serde_json::from_str(line).unwrap();
            if record["stage"] == "fusion_function" && record["module"] == loser_row.module.as_str() {
                record["score"] = serde_json::json!(boosted);
            }
            serde_json::to_string(&record).unwrap()
        })
        .collect();
    std::fs::write(&ledger_path, rewritten.join("\n") + "\n").unwrap();

    // Rerun: the promoted loser must now win its stage. Stages downstream of
    // the flipped choice see new keys and legitimately retrain; the operated
    // stage itself must be fully cached.
    let mut ledger = Ledger::open(&ledger_path).unwrap();
    let second = run_search(&ds, &config, &mut ledger, &MetricRegistry::new()).unwrap();
    assert_eq!(second.spec.fusion.name(), loser_row.module, "selection did not flip");
    assert_ne!(second.spec.fusion, first.spec.fusion);
    let fusion_stage = second.stages.iter().find(|s| s.stage == "fusion_function").unwrap();
    assert!(fusion_stage.rows.iter().all(|r| r.cached), "operated stage must stay cached");
    let downstream = second.stages.iter().find(|s| s.stage == "fusion_network").unwrap();
    assert_eq!(
        second.counters.trainings,
        downstream.rows.iter().filter(|r| !r.cached).count() as u64,
        "only the downstream stage may retrain"
    );
}

#[test]
fn ties_break_by_registry_insertion_order() {
    let dir = tempfile::tempdir().unwrap();
    let ds = load_small(dir.path(), 17);
    let config = small_config(17);
    let ledger_path = dir.path().join("ledger.jsonl");
    {
        let mut ledger = Ledger::open(&ledger_path).unwrap();
        run_search(&ds, &config, &mut ledger, &MetricRegistry::new()).unwrap();
    }
    // Force an exact tie across the whole fusion stage.
    let text = std::fs::read_to_string(&ledger_path).unwrap();
    let rewritten: Vec<String> = text
        .lines()
        .map(|line| {
            let mut record: serde_json::Value = serde_json::from_str(line).unwrap();
            if record["stage"] == "fusion_function" {
                record["score"] = serde_json::json!(0.7);
            }
            serde_json::to_string(&record).unwrap()
        })
        .collect();
    std::fs::write(&ledger_path, rewritten.join("\n") + "\n").unwrap();

    let mut ledger = Ledger::open(&ledger_path).unwrap();
    let out = run_search(&ds, &config, &mut ledger, &MetricRegistry::new()).unwrap();
    // First fusion candidate in registry order is concat.
    assert_eq!(out.spec.fusion, FusionKind::Concat, "tie must go to the first candidate");
}

#[test]
fn stages_run_in_declared_order() {
    let dir = tempfile::tempdir().unwrap();
    let ds = load_small(dir.path(), 19);
    let mut ledger = Ledger::in_memory();
    let out = run_search(&ds, &small_config(19), &mut ledger, &MetricRegistry::new()).unwrap();
    let order: Vec<&str> = out.stages.iter().map(|s| s.stage.as_str()).collect();
    assert_eq!(order, vec!["encoder:m0", "encoder:m1", "fusion_function", "fusion_network"]);
    // The ledger file order reflects the same sequencing.
    let mut seen = Vec::new();
    for r in ledger.records() {
        if seen.last() != Some(&r.stage) {
            seen.push(r.stage.clone());
        }
    }
    assert_eq!(seen, vec!["encoder:m0", "encoder:m1", "fusion_function", "fusion_network"]);
}

#[test]
fn new_candidate_trains_exactly_once() {
    let dir = tempfile::tempdir().unwrap();
    let ds = load_small(dir.path(), 9);
    let ledger_path = dir.path().join("ledger.jsonl");
    let mut config = small_config(9);

    // First search with a single sequence candidate.
    let mut registry = RegistryConfig::default();
    registry.encoders.insert(
        "sequence".into(),
        EncoderStage { candidates: vec![EncoderConfig::new("mlp_mixer", 1, 8)], fixed: false },
    );
    config.registry = Some(registry.clone());
    let first = {
        let mut ledger = Ledger::open(&ledger_path).unwrap();
        run_search(&ds, &config, &mut ledger, &MetricRegistry::new()).unwrap()
    };
    assert!(first.counters.trainings > 0);

    // Add one candidate; only its two benchmarks (one per sequence modality)
    // plus any stages whose keys change may train.
    registry.encoders.get_mut("sequence").unwrap().candidates.push(EncoderConfig::new(
        "hyper_mixer",
        1,
        8,
    ));
    config.registry = Some(registry);
    let mut ledger = Ledger::open(&ledger_path).unwrap();
    let second = run_search(&ds, &config, &mut ledger, &MetricRegistry::new()).unwrap();

    // Both synthetic modalities are sequences, so exactly two new encoder
    // benchmarks train. Later stages retrain only if an encoder choice
    // flipped; assert the common case explicitly.
    let new_encoder_runs: u64 = second
        .stages
        .iter()
        .filter(|s| s.stage.starts_with("encoder:"))
        .map(|s| s.rows.iter().filter(|r| !r.cached).count() as u64)
        .sum();
    assert_eq!(new_encoder_runs, 2, "exactly the new candidate's benchmarks train");
    if second.spec.encoders.iter().map(|c| &c.config).eq(first.spec.encoders.iter().map(|c| &c.config)) {
        assert_eq!(second.counters.trainings, 2, "unchanged choices must reuse all later stages");
    }
}

#[test]
fn diverged_candidates_lose_but_do_not_crash() {
    let dir = tempfile::tempdir().unwrap();
    let ds = load_small(dir.path(), 11);
    let mut config = small_config(11);

    // An encoder kind whose weights are NaN, so the first forward pass
    // trips the non-finite check and the run records as diverged.
    fn explosive(
        cfg: &EncoderConfig,
        n_tokens: usize,
        d_raw: usize,
        seed: u64,
    ) -> mixmas::mixers::Result<Box<dyn Encoder>> {
        let mut enc = mixmas::mixers::build_encoder(
            &EncoderConfig { kind: "mlp_mixer".into(), ..cfg.clone() },
            n_tokens,
            d_raw,
            seed,
        )?;
        enc.visit_params_mut("e", &mut |_n, t| {
            for v in t.data_mut() {
                *v = f64::NAN;
            }
        });
        Ok(enc)
    }

    let mut registry = RegistryConfig::default();
    registry.encoders.insert(
        "sequence".into(),
        EncoderStage {
            candidates: vec![
                EncoderConfig::new("explosive", 1, 8),
                EncoderConfig::new("mlp_mixer", 1, 8),
            ],
            fixed: false,
        },
    );
    config.registry = Some(registry);

    let metrics = MetricRegistry::new();
    let mut ledger = Ledger::in_memory();
    // run_search builds its own standard registry; register the external
    // kind through the config-driven path by calling the library directly.
    let outcome = {
        let mut reg = mixmas::search::Registry::standard(config.depth, config.width);
        reg.register_kind("explosive", explosive);
        if let Some(overrides) = &config.registry {
            reg.apply_overrides(overrides).unwrap();
        }
        mixmas::search::run_search_with_registry(&ds, &config, reg, &mut ledger, &metrics).unwrap()
    };
    for stage in outcome.stages.iter().filter(|s| s.stage.starts_with("encoder:")) {
        let exploded = stage.rows.iter().find(|r| r.module.starts_with("explosive")).unwrap();
        assert!(exploded.diverged);
        assert_eq!(exploded.score, 0.0);
        assert!(!exploded.winner, "a diverged candidate must lose");
    }

    // All candidates diverged: the stage errors out.
    let mut reg = mixmas::search::Registry::standard(config.depth, config.width);
    reg.register_kind("explosive", explosive);
    reg.apply_overrides(&RegistryConfig {
        encoders: [(
            "sequence".to_string(),
            EncoderStage { candidates: vec![EncoderConfig::new("explosive", 1, 8)], fixed: false },
        )]
        .into_iter()
        .collect(),
        ..Default::default()
    })
    .unwrap();
    let mut ledger2 = Ledger::in_memory();
    let err = mixmas::search::run_search_with_registry(&ds, &config, reg, &mut ledger2, &metrics)
        .unwrap_err();
    assert!(matches!(err, SearchError::AllDiverged { .. }), "got {err}");
}

#[test]
fn multilabel_task_runs_end_to_end() {
    // Reuse the bimodal generator but rewrite the labels as one-hot rows and
    // declare the task multilabel.
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic(&small_spec(13), dir.path()).unwrap();
    let n = 240;
    let classes = {
        let ds = Dataset::load(manifest).unwrap();
        match &ds.labels {
            mixmas::data::Labels::Classes(c) => c.clone(),
            _ => unreachable!(),
        }
    };
    let mut onehot = vec![0.0f64; n * 3];
    for (i, &c) in classes.iter().enumerate() {
        onehot[i * 3 + c] = 1.0;
    }
    write_tensor(
        &dir.path().join("labels_ml.mxt"),
        &Tensor::new(vec![n, 3], onehot).unwrap(),
    )
    .unwrap();
    let manifest_path = dir.path().join("manifest.json");
    let mut doc: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&manifest_path).unwrap()).unwrap();
    doc["task"] = serde_json::json!("multilabel");
    doc["labels"] = serde_json::json!("labels_ml.mxt");
    std::fs::write(&manifest_path, serde_json::to_string_pretty(&doc).unwrap()).unwrap();

    let ds = Dataset::load(Manifest::load(&manifest_path).unwrap()).unwrap();
    let mut ledger = Ledger::in_memory();
    let out = run_search(&ds, &small_config(13), &mut ledger, &MetricRegistry::new()).unwrap();
    assert_eq!(out.spec.metric, "weighted_f1");
    assert!(out.spec.provenance.len() >= 3);
    for record in ledger.records() {
        assert!((0.0..=1.0).contains(&record.score));
    }
}

#[test]
fn full_train_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let ds = load_small(dir.path(), 15);
    let spec_arch = {
        let mut ledger = Ledger::in_memory();
        run_search(&ds, &small_config(15), &mut ledger, &MetricRegistry::new()).unwrap().spec
    };
    let cfg = TrainConfig { epochs: 5, seed: 42, ..Default::default() };
    let metrics = MetricRegistry::new();
    let a = mixmas::search::full_train(&ds, &spec_arch, &cfg, &metrics).unwrap();
    let b = mixmas::search::full_train(&ds, &spec_arch, &cfg, &metrics).unwrap();
    assert_eq!(a.report, b.report);
    assert_eq!(a.report.score.to_bits(), b.report.score.to_bits());
}

// ── planted-signal oracles ──────────────────────────────────────────────

/// Train a linear classifier on token-mean-pooled inputs: the degenerate
/// model that token-order data is built to defeat.
fn pooled_linear_accuracy(ds: &Dataset, modality: usize, seed: u64) -> f64 {
    let (tokens, width) = ds.modality_dims(modality);
    let classes = match &ds.labels {
        mixmas::data::Labels::Classes(c) => c.clone(),
        _ => unreachable!(),
    };
    // Pool each sample to a single token up front.
    let pooled: Vec<Tensor> = ds.samples[modality]
        .iter()
        .map(|m| {
            let mut acc = vec![0.0; width];
            for t in 0..tokens {
                for (j, slot) in acc.iter_mut().enumerate() {
                    *slot += m.at2(t, j) / tokens as f64;
                }
            }
            Tensor::new(vec![1, width], acc).unwrap()
        })
        .collect();

    let n = pooled.len();
    let cut = n * 4 / 5;
    let mut rng = Rng::new(seed);
    let head = Head::new(width, ds.manifest.num_classes, &mut rng);
    let mut adam = mixmas::tensor::Adam::new(0.001);
    let mut head = head;
    for epoch in 0..30u64 {
        let mut order: Vec<usize> = (0..cut).collect();
        let mut shuffle_rng = Rng::new(mix_seed(&[seed, epoch]));
        shuffle_rng.shuffle(&mut order);
        for batch in order.chunks(32) {
            let mut g = mixmas::tensor::GradGraph::new();
            let mut bind = mixmas::tensor::Binder::new(true);
            let mut rows = Vec::new();
            for &i in batch {
                let x = g.constant(pooled[i].clone()).unwrap();
                let e = g.reshape(x, &[width]).unwrap();
                rows.push(head.forward(&mut g, &mut bind, "h", e).unwrap());
            }
            let logits = g.concat(&rows, 0).unwrap();
            let targets: Vec<usize> = batch.iter().map(|&i| classes[i]).collect();
            let loss = g.cross_entropy(logits, &targets).unwrap();
            g.backward(loss).unwrap();
            let grads: std::collections::BTreeMap<String, Vec<f64>> =
                bind.grads(&g).into_iter().map(|(k, v)| (k, v.to_vec())).collect();
            adam.begin_step();
            head.visit_params_mut("h", &mut |name, t| {
                if let Some(gr) = grads.get(name) {
                    adam.update(name, t, gr).unwrap();
                }
            });
        }
    }
    let mut hits = 0;
    for i in cut..n {
        let mut g = mixmas::tensor::GradGraph::new();
        let mut bind = mixmas::tensor::Binder::new(false);
        let x = g.constant(pooled[i].clone()).unwrap();
        let e = g.reshape(x, &[width]).unwrap();
        let logits = head.forward(&mut g, &mut bind, "h", e).unwrap();
        let row = g.value(logits).data();
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == classes[i] {
            hits += 1;
        }
    }
    hits as f64 / (n - cut) as f64
}

#[test]
fn token_order_defeats_pooled_classifier() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec { num_samples: 600, ..small_spec(21) };
    let manifest = generate_synthetic(&spec, dir.path()).unwrap();
    let ds = Dataset::load(manifest).unwrap();
    let acc = pooled_linear_accuracy(&ds, 0, 77);
    let chance = 1.0 / ds.manifest.num_classes as f64;
    assert!(
        acc <= chance + 0.05,
        "pooled classifier reached {acc:.3}, should be near chance {chance:.3}"
    );
}

fn bits_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        name: format!("bits{seed}"),
        seed,
        num_samples: 1200,
        num_classes: 4,
        modalities: vec![
            SyntheticModality { name: "ma".into(), signal: SignalKind::DisjointBits, tokens: 4, width: 8 },
            SyntheticModality { name: "mb".into(), signal: SignalKind::DisjointBits, tokens: 4, width: 8 },
        ],
        noise: 0.15,
        split: SplitSpec { train: 0.7, val: 0.1, test: 0.2, seed },
    }
}

#[test]
fn disjoint_bits_single_modality_ceiling_and_joint_separability() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_synthetic(&bits_spec(31), dir.path()).unwrap();
    let ds = Dataset::load(manifest).unwrap();
    let metrics = MetricRegistry::new();
    let (_, metric) = metrics.for_task(ds.manifest.task, None).unwrap();
    let train_rows = ds.split_indices(mixmas::data::Split::Train);
    let test_rows = ds.split_indices(mixmas::data::Split::Test);
    let train = DataView::new(&ds, train_rows);
    let test = DataView::new(&ds, test_rows);
    let cfg = TrainConfig { epochs: 15, seed: 1, ..Default::default() };

    // Each modality alone is information-capped at one bit -> <= ~50%.
    for modality in 0..2 {
        let (n_tokens, d_raw) = ds.modality_dims(modality);
        let encoder =
            mixmas::mixers::build_encoder(&EncoderConfig::new("mlp_mixer", 2, 8), n_tokens, d_raw, 5)
                .unwrap();
        let mut rng = Rng::new(6);
        let head = Head::new(encoder.out_dim(), 4, &mut rng);
        let mut model = SingleModalityModel { modality, encoder, head };
        let mut counters = TrainCounters::default();
        train_model(&mut model, &train, None, &cfg, 5, &mut counters).unwrap();
        let report = evaluate_metric(&model, &test, metric).unwrap();
        assert!(
            report.score <= 0.58,
            "modality {modality} alone scored {:.3}, above the one-bit ceiling",
            report.score
        );
    }

    // Both modalities concatenated separate all four classes.
    let build_enc = |mi: usize| {
        let (n_tokens, d_raw) = ds.modality_dims(mi);
        mixmas::mixers::build_encoder(&EncoderConfig::new("mlp_mixer", 2, 8), n_tokens, d_raw, 10 + mi as u64)
            .unwrap()
    };
    let encoders: Vec<Box<dyn Encoder>> = (0..2).map(build_enc).collect();
    let mut rng = Rng::new(8);
    let head = Head::new(16, 4, &mut rng);
    let mut model = FullModel { encoders, fusion: FusionKind::Concat, fusion_net: None, head };
    let mut counters = TrainCounters::default();
    train_model(&mut model, &train, None, &cfg, 11, &mut counters).unwrap();
    let report = evaluate_metric(&model, &test, metric).unwrap();
    assert!(
        report.score >= 0.80,
        "concatenated modalities scored only {:.3}; the task should be separable",
        report.score
    );
}

#[test]
fn depth_zero_projection_is_constructible() {
    // Depth 0 is reachable through the low-level API even though search
    // configs require depth >= 1.
    let mut rng = Rng::new(2);
    let enc = MixEncoder {
        proj: mixmas::mixers::Linear::new(4, 6, &mut rng),
        blocks: vec![],
        d: 6,
    };
    let x = Tensor::new(vec![3, 4], vec![0.25; 12]).unwrap();
    let mut g = mixmas::tensor::GradGraph::new();
    let mut bind = mixmas::tensor::Binder::new(false);
    let xid = g.constant(x).unwrap();
    let e = enc.embed(&mut g, &mut bind, "e", xid).unwrap();
    assert_eq!(g.value(e).shape(), &[6]);
}
