//! Content-addressed micro-benchmark ledger.
//!
//! Every benchmark is keyed by a hash of everything that determines its
//! outcome: stage, module identity and config, the sample fingerprint, the
//! train config, and the metric. Records append to a JSONL file; a rerun
//! looks keys up before training, so previously measured candidates are
//! never retrained.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{SearchError, TrainConfig};
use crate::metrics::EvalReport;

/// One micro-benchmark outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchmarkRecord {
    pub key: String,
    pub stage: String,
    pub module: String,
    pub config: serde_json::Value,
    pub score: f64,
    pub diverged: bool,
    pub report: Option<EvalReport>,
    pub wall_time_ms: u64,
    /// Unix seconds at completion; informational only.
    pub timestamp: u64,
}

/// Everything that determines a benchmark outcome, in canonical order.
#[derive(Serialize)]
struct KeyMaterial<'a> {
    stage: &'a str,
    module: &'a str,
    config: &'a serde_json::Value,
    sample: &'a str,
    train: &'a TrainConfig,
    metric: &'a str,
}

/// Deterministic key for a benchmark.
pub fn ledger_key(
    stage: &str,
    module: &str,
    config: &serde_json::Value,
    sample_fingerprint: &str,
    train: &TrainConfig,
    metric: &str,
) -> String {
    let material = KeyMaterial { stage, module, config, sample: sample_fingerprint, train, metric };
    let json = serde_json::to_string(&material).expect("key material serializes");
    hex_digest(json.as_bytes())
}

pub fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// First eight bytes of a hex key as a seed.
pub fn seed_from_key(key: &str) -> u64 {
    u64::from_str_radix(&key[..16.min(key.len())], 16).unwrap_or(0)
}

/// Append-only record store with a key index. When backed by a file, each
/// append writes one JSON line and flushes.
pub struct Ledger {
    path: Option<PathBuf>,
    records: Vec<BenchmarkRecord>,
    index: BTreeMap<String, usize>,
}

impl Ledger {
    /// Load an existing ledger file, or start an empty one at `path`.
    pub fn open(path: &Path) -> Result<Ledger, SearchError> {
        let mut ledger =
            Ledger { path: Some(path.to_path_buf()), records: Vec::new(), index: BTreeMap::new() };
        if path.exists() {
            let text = std::fs::read_to_string(path).map_err(|e| SearchError::Ledger {
                detail: format!("cannot read {}: {e}", path.display()),
            })?;
            for (lineno, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let record: BenchmarkRecord =
                    serde_json::from_str(line).map_err(|e| SearchError::Ledger {
                        detail: format!("{} line {}: {e}", path.display(), lineno + 1),
                    })?;
                ledger.insert(record);
            }
        }
        Ok(ledger)
    }

    /// Ledger without a backing file (tests, dry runs).
    pub fn in_memory() -> Ledger {
        Ledger { path: None, records: Vec::new(), index: BTreeMap::new() }
    }

    fn insert(&mut self, record: BenchmarkRecord) {
        // First record for a key wins; duplicates are never retrained anyway.
        self.index.entry(record.key.clone()).or_insert(self.records.len());
        self.records.push(record);
    }

    pub fn get(&self, key: &str) -> Option<&BenchmarkRecord> {
        self.index.get(key).map(|&i| &self.records[i])
    }

    pub fn append(&mut self, record: BenchmarkRecord) -> Result<(), SearchError> {
        if let Some(path) = &self.path {
            let line = serde_json::to_string(&record)
                .map_err(|e| SearchError::Ledger { detail: format!("serialize record: {e}") })?;
            let mut file = std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| SearchError::Ledger {
                    detail: format!("cannot open {}: {e}", path.display()),
                })?;
            writeln!(file, "{line}").and_then(|_| file.flush()).map_err(|e| {
                SearchError::Ledger { detail: format!("cannot append to {}: {e}", path.display()) }
            })?;
        }
        self.insert(record);
        Ok(())
    }

    pub fn records(&self) -> &[BenchmarkRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dummy_record(key: &str, score: f64) -> BenchmarkRecord {
        BenchmarkRecord {
            key: key.to_string(),
            stage: "encoder:img".to_string(),
            module: "mlp_mixer(depth=2,d=16)".to_string(),
            config: serde_json::json!({"kind": "mlp_mixer"}),
            score,
            diverged: false,
            report: None,
            wall_time_ms: 5,
            timestamp: 0,
        }
    }

    #[test]
    fn keys_are_deterministic_and_sensitive() {
        let cfg = serde_json::json!({"kind": "mlp_mixer", "depth": 2});
        let train = TrainConfig::default();
        let a = ledger_key("encoder:img", "mlp_mixer", &cfg, "fp1", &train, "accuracy");
        let b = ledger_key("encoder:img", "mlp_mixer", &cfg, "fp1", &train, "accuracy");
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        let c = ledger_key("encoder:txt", "mlp_mixer", &cfg, "fp1", &train, "accuracy");
        assert_ne!(a, c);
        let d = ledger_key("encoder:img", "mlp_mixer", &cfg, "fp2", &train, "accuracy");
        assert_ne!(a, d);
        let train2 = TrainConfig { seed: 99, ..Default::default() };
        let e = ledger_key("encoder:img", "mlp_mixer", &cfg, "fp1", &train2, "accuracy");
        assert_ne!(a, e);
    }

    #[test]
    fn no_key_collisions_over_randomized_tuples() {
        let mut keys = std::collections::HashSet::new();
        let train = TrainConfig::default();
        let mut rng = crate::rng::Rng::new(42);
        for _ in 0..10_000 {
            let stage = format!("encoder:m{}", rng.below(4));
            let module = format!("kind{}", rng.below(6));
            let cfg = serde_json::json!({
                "depth": rng.below(5),
                "d": rng.below(64),
                "seed": rng.next_u64(),
            });
            let fp = format!("{:016x}", rng.next_u64());
            let key = ledger_key(&stage, &module, &cfg, &fp, &train, "accuracy");
            assert!(keys.insert(key), "collision observed");
        }
    }

    #[test]
    fn file_round_trip_preserves_order_and_lookup() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.jsonl");
        {
            let mut ledger = Ledger::open(&path).unwrap();
            ledger.append(dummy_record("k1", 0.5)).unwrap();
            ledger.append(dummy_record("k2", 0.7)).unwrap();
        }
        let ledger = Ledger::open(&path).unwrap();
        assert_eq!(ledger.len(), 2);
        assert_eq!(ledger.records()[0].key, "k1");
        assert_eq!(ledger.get("k2").unwrap().score, 0.7);
        assert!(ledger.get("k3").is_none());
    }

    #[test]
    fn duplicate_keys_resolve_to_first() {
        let mut ledger = Ledger::in_memory();
        ledger.append(dummy_record("k", 0.1)).unwrap();
        ledger.append(dummy_record("k", 0.9)).unwrap();
        assert_eq!(ledger.get("k").unwrap().score, 0.1);
        assert_eq!(ledger.len(), 2);
    }
}
