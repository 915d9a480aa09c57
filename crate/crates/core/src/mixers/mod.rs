//! Candidate encoder library and classification heads.
//!
//! Every encoder consumes a raw token matrix `n x d_raw`, projects it to a
//! common channel width `d` with a learned linear, runs its block stack, and
//! mean-pools the tokens into a single `d`-vector — so all candidates see
//! identical inputs and emit comparable embeddings, which keeps the
//! micro-benchmarks fair.

pub mod blocks;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use blocks::{
    default_block_count, HyperMixerBlock, LayerNormParams, Linear, MlpMixerBlock, MonarchFactors,
    MonarchMixerBlock, PlainMlp, TokenMlp,
};

use crate::rng::Rng;
use crate::tensor::{Binder, GradGraph, Tensor, TensorError, ValueId};

pub const KIND_MLP_MIXER: &str = "mlp_mixer";
pub const KIND_HYPER_MIXER: &str = "hyper_mixer";
pub const KIND_MONARCH_MIXER: &str = "monarch_mixer";
pub const KIND_PLAIN_MLP: &str = "plain_mlp";

/// The four block kinds shipped with the crate.
pub const BUILTIN_KINDS: [&str; 4] =
    [KIND_MLP_MIXER, KIND_HYPER_MIXER, KIND_MONARCH_MIXER, KIND_PLAIN_MLP];

#[derive(Debug, Clone, PartialEq)]
pub enum MixersError {
    UnknownKind { kind: String },
    Config { detail: String },
    Tensor(TensorError),
}

impl fmt::Display for MixersError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MixersError::UnknownKind { kind } => write!(f, "encoders: unknown kind `{kind}`"),
            MixersError::Config { detail } => write!(f, "encoders: {detail}"),
            MixersError::Tensor(e) => write!(f, "encoders: {e}"),
        }
    }
}

impl std::error::Error for MixersError {}

impl From<TensorError> for MixersError {
    fn from(e: TensorError) -> Self {
        MixersError::Tensor(e)
    }
}

pub type Result<T> = std::result::Result<T, MixersError>;

/// Declarative description of one encoder candidate. Serialized into ledger
/// keys, so every field that changes the model changes the key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: String,
    /// Number of blocks.
    pub depth: usize,
    /// Channel width after the input projection.
    pub d: usize,
    /// Token-mixing hidden multiplier (of the token count; for the
    /// hypernetwork mixer, of `d`).
    #[serde(default = "default_token_mult")]
    pub token_mult: f64,
    /// Channel-mixing hidden multiplier (of `d`).
    #[serde(default = "default_chan_mult")]
    pub chan_mult: f64,
    /// plain_mlp only: mean-pool a multi-token input down to one token
    /// instead of rejecting it.
    #[serde(default)]
    pub pool_tokens: bool,
    /// hyper_mixer only: enable learned absolute position embeddings.
    #[serde(default)]
    pub positional: bool,
    /// Extra seed material mixed into weight initialization.
    #[serde(default)]
    pub seed: u64,
}

fn default_token_mult() -> f64 {
    2.0
}

fn default_chan_mult() -> f64 {
    2.0
}

impl EncoderConfig {
    pub fn new(kind: &str, depth: usize, d: usize) -> Self {
        EncoderConfig {
            kind: kind.to_string(),
            depth,
            d,
            token_mult: default_token_mult(),
            chan_mult: default_chan_mult(),
            pool_tokens: false,
            positional: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 1 {
            return Err(MixersError::Config { detail: format!("depth must be >= 1, got {}", self.depth) });
        }
        if self.d < 1 {
            return Err(MixersError::Config { detail: "channel width d must be >= 1".to_string() });
        }
        if !(self.token_mult.is_finite() && self.token_mult > 0.0)
            || !(self.chan_mult.is_finite() && self.chan_mult > 0.0)
        {
            return Err(MixersError::Config { detail: "hidden multipliers must be positive".to_string() });
        }
        Ok(())
    }

    /// Short label used in ledger records and printed tables.
    pub fn label(&self) -> String {
        format!("{}(depth={},d={})", self.kind, self.depth, self.d)
    }
}

/// A modality encoder: token matrix in, pooled embedding out.
pub trait Encoder {
    /// Embed a rank-2 `n x d_raw` graph value into a 1-D `[d]` embedding.
    /// Taking a graph value lets the same encoder serve as a fusion network
    /// downstream of other differentiable stages.
    fn embed(&self, g: &mut GradGraph, bind: &mut Binder, prefix: &str, x: ValueId) -> Result<ValueId>;

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));

    /// Width of the emitted embedding.
    fn out_dim(&self) -> usize;
}

/// One of the three mixer-style block stacks.
#[derive(Debug, Clone)]
pub enum Block {
    Mixer(MlpMixerBlock),
    Hyper(HyperMixerBlock),
    Monarch(MonarchMixerBlock),
}

impl Block {
    fn forward(
        &self,
        g: &mut GradGraph,
        bind: &mut Binder,
        prefix: &str,
        x: ValueId,
    ) -> crate::tensor::Result<ValueId> {
        match self {
            Block::Mixer(b) => b.forward(g, bind, prefix, x),
            Block::Hyper(b) => b.forward(g, bind, prefix, x),
            Block::Monarch(b) => b.forward(g, bind, prefix, x),
        }
    }

    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        match self {
            Block::Mixer(b) => b.visit(prefix, f),
            Block::Hyper(b) => b.visit(prefix, f),
            Block::Monarch(b) => b.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        match self {
            Block::Mixer(b) => b.visit_mut(prefix, f),
            Block::Hyper(b) => b.visit_mut(prefix, f),
            Block::Monarch(b) => b.visit_mut(prefix, f),
        }
    }
}

/// Input projection + block stack + token mean-pool.
#[derive(Debug, Clone)]
pub struct MixEncoder {
    pub proj: Linear,
    pub blocks: Vec<Block>,
    pub d: usize,
}

impl Encoder for MixEncoder {
    fn embed(&self, g: &mut GradGraph, bind: &mut Binder, prefix: &str, x: ValueId) -> Result<ValueId> {
        g.value(x).dims2("encode")?;
        let mut h = self.proj.forward(g, bind, &format!("{prefix}.proj"), x)?;
        for (i, block) in self.blocks.iter().enumerate() {
            h = block.forward(g, bind, &format!("{prefix}.b{i}"), h)?;
        }
        Ok(g.mean_axis(h, 0)?)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.proj.visit(&format!("{prefix}.proj"), f);
        for (i, block) in self.blocks.iter().enumerate() {
            block.visit(&format!("{prefix}.b{i}"), f);
        }
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.proj.visit_mut(&format!("{prefix}.proj"), f);
        for (i, block) in self.blocks.iter_mut().enumerate() {
            block.visit_mut(&format!("{prefix}.b{i}"), f);
        }
    }

    fn out_dim(&self) -> usize {
        self.d
    }
}

/// Feed-forward encoder for single-token (tabular) modalities. When
/// `pool_tokens` is set, a multi-token input is mean-pooled first; otherwise
/// it is rejected.
#[derive(Debug, Clone)]
pub struct PlainMlpEncoder {
    pub mlp: PlainMlp,
    pub pool_tokens: bool,
    pub d: usize,
}

impl Encoder for PlainMlpEncoder {
    fn embed(&self, g: &mut GradGraph, bind: &mut Binder, prefix: &str, x: ValueId) -> Result<ValueId> {
        let (n, d_raw) = g.value(x).dims2("encode")?;
        let pooled = if n == 1 {
            x
        } else if self.pool_tokens {
            let m = g.mean_axis(x, 0)?;
            g.reshape(m, &[1, d_raw])?
        } else {
            return Err(MixersError::Config {
                detail: format!("plain_mlp accepts a single token, got {n} (enable pool_tokens to mean-pool)"),
            });
        };
        let out = self.mlp.forward(g, bind, &format!("{prefix}.mlp"), pooled)?;
        let width = g.value(out).shape()[1];
        Ok(g.reshape(out, &[width])?)
    }

    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.mlp.visit(&format!("{prefix}.mlp"), f);
    }

    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.mlp.visit_mut(&format!("{prefix}.mlp"), f);
    }

    fn out_dim(&self) -> usize {
        self.d
    }
}

fn hidden(mult: f64, base: usize) -> usize {
    ((mult * base as f64).round() as usize).max(1)
}

/// Instantiate a built-in encoder for a modality of `n_tokens x d_raw`.
pub fn build_encoder(
    cfg: &EncoderConfig,
    n_tokens: usize,
    d_raw: usize,
    seed: u64,
) -> Result<Box<dyn Encoder>> {
    cfg.validate()?;
    let mut rng = Rng::new(crate::rng::mix_seed(&[seed, cfg.seed]));
    match cfg.kind.as_str() {
        KIND_MLP_MIXER => {
            let proj = Linear::new(d_raw, cfg.d, &mut rng);
            let blocks = (0..cfg.depth)
                .map(|_| {
                    Block::Mixer(MlpMixerBlock::new(
                        n_tokens,
                        cfg.d,
                        hidden(cfg.token_mult, n_tokens),
                        hidden(cfg.chan_mult, cfg.d),
                        &mut rng,
                    ))
                })
                .collect();
            Ok(Box::new(MixEncoder { proj, blocks, d: cfg.d }))
        }
        KIND_HYPER_MIXER => {
            let proj = Linear::new(d_raw, cfg.d, &mut rng);
            let cap = cfg.positional.then_some(n_tokens);
            let blocks = (0..cfg.depth)
                .map(|_| {
                    Block::Hyper(HyperMixerBlock::new(
                        cfg.d,
                        hidden(cfg.token_mult, cfg.d),
                        hidden(cfg.chan_mult, cfg.d),
                        cap,
                        &mut rng,
                    ))
                })
                .collect();
            Ok(Box::new(MixEncoder { proj, blocks, d: cfg.d }))
        }
        KIND_MONARCH_MIXER => {
            let proj = Linear::new(d_raw, cfg.d, &mut rng);
            let blocks = (0..cfg.depth)
                .map(|_| Block::Monarch(MonarchMixerBlock::new(n_tokens, cfg.d, &mut rng)))
                .collect();
            Ok(Box::new(MixEncoder { proj, blocks, d: cfg.d }))
        }
        KIND_PLAIN_MLP => {
            let mut widths = vec![d_raw];
            widths.extend(std::iter::repeat_n(cfg.d, cfg.depth + 1));
            Ok(Box::new(PlainMlpEncoder {
                mlp: PlainMlp::new(&widths, &mut rng),
                pool_tokens: cfg.pool_tokens,
                d: cfg.d,
            }))
        }
        other => Err(MixersError::UnknownKind { kind: other.to_string() }),
    }
}

/// Affine task head mapping embeddings to class logits.
#[derive(Debug, Clone)]
pub struct Head {
    pub linear: Linear,
    pub in_dim: usize,
    pub num_classes: usize,
}

impl Head {
    pub fn new(in_dim: usize, num_classes: usize, rng: &mut Rng) -> Self {
        Head { linear: Linear::new(in_dim, num_classes, rng), in_dim, num_classes }
    }

    /// `e` is either a 1-D `[d]` embedding or a `[batch, d]` matrix; the
    /// result is `[batch, num_classes]` logits.
    pub fn forward(
        &self,
        g: &mut GradGraph,
        bind: &mut Binder,
        prefix: &str,
        e: ValueId,
    ) -> Result<ValueId> {
        let eid = if g.value(e).rank() == 1 {
            let d = g.value(e).numel();
            g.reshape(e, &[1, d])?
        } else {
            e
        };
        let (_, d) = g.value(eid).dims2("head")?;
        if d != self.in_dim {
            return Err(MixersError::Config {
                detail: format!("head expects width {}, got {d}", self.in_dim),
            });
        }
        Ok(self.linear.forward(g, bind, &format!("{prefix}.head"), eid)?)
    }

    pub fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.linear.visit(&format!("{prefix}.head"), f);
    }

    pub fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.linear.visit_mut(&format!("{prefix}.head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn embed_once(enc: &dyn Encoder, x: &Tensor) -> Tensor {
        let mut g = GradGraph::new();
        let mut bind = Binder::new(false);
        let xid = g.constant(x.clone()).unwrap();
        let e = enc.embed(&mut g, &mut bind, "enc", xid).unwrap();
        g.value(e).clone()
    }

    #[test]
    fn depth_zero_encoder_is_projection_plus_pool() {
        // Constructed directly; configs used in the search require depth >= 1.
        let mut rng = Rng::new(1);
        let enc = MixEncoder { proj: Linear::new(3, 5, &mut rng), blocks: vec![], d: 5 };
        let token = vec![0.5, -1.0, 2.0];
        let x = Tensor::from_rows(&[token.clone(), token.clone(), token]).unwrap();
        let e = embed_once(&enc, &x);
        assert_eq!(e.shape(), &[5]);
        // Identical tokens: pooling returns the projection of that token.
        let single = Tensor::from_rows(&[vec![0.5, -1.0, 2.0]]).unwrap();
        let e1 = embed_once(&enc, &single);
        assert!(e.max_abs_diff(&e1) < 1e-12);
    }

    #[test]
    fn single_token_pooling_is_identity_on_block_output() {
        let cfg = EncoderConfig::new(KIND_MLP_MIXER, 1, 6);
        let enc = build_encoder(&cfg, 1, 4, 7).unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -0.5, 0.25, 2.0]]).unwrap();
        let e = embed_once(enc.as_ref(), &x);
        assert_eq!(e.shape(), &[6]);
        assert!(e.is_finite());
    }

    #[test]
    fn all_builtin_kinds_build_and_embed() {
        for kind in BUILTIN_KINDS {
            let cfg = EncoderConfig::new(kind, 2, 8);
            let n_tokens = if kind == KIND_PLAIN_MLP { 1 } else { 6 };
            let enc = build_encoder(&cfg, n_tokens, 5, 3).unwrap();
            let mut rng = Rng::new(99);
            let data: Vec<f64> = (0..n_tokens * 5).map(|_| rng.normal()).collect();
            let x = Tensor::new(vec![n_tokens, 5], data).unwrap();
            let e = embed_once(enc.as_ref(), &x);
            assert_eq!(e.shape(), &[8], "{kind}");
            assert!(e.is_finite(), "{kind}");
        }
    }

    #[test]
    fn positional_flag_builds_position_table() {
        let cfg = EncoderConfig { positional: true, ..EncoderConfig::new(KIND_HYPER_MIXER, 1, 6) };
        let enc = build_encoder(&cfg, 5, 4, 9).unwrap();
        let mut has_pos = false;
        enc.visit_params("e", &mut |name, t| {
            if name.ends_with(".pos") {
                has_pos = true;
                assert_eq!(t.shape(), &[5, 6]);
            }
        });
        assert!(has_pos, "positional table missing");
        let mut rng = Rng::new(1);
        let x = Tensor::new(vec![5, 4], (0..20).map(|_| rng.normal()).collect()).unwrap();
        let e = embed_once(enc.as_ref(), &x);
        assert_eq!(e.shape(), &[6]);
    }

    #[test]
    fn unknown_kind_is_rejected() {
        let cfg = EncoderConfig::new("region_aware", 2, 8);
        assert!(matches!(
            build_encoder(&cfg, 4, 4, 0),
            Err(MixersError::UnknownKind { .. })
        ));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let mut cfg = EncoderConfig::new(KIND_MLP_MIXER, 0, 8);
        assert!(cfg.validate().is_err());
        cfg.depth = 1;
        cfg.d = 0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn plain_mlp_rejects_multiple_tokens_unless_pooling() {
        let cfg = EncoderConfig::new(KIND_PLAIN_MLP, 2, 8);
        let enc = build_encoder(&cfg, 1, 5, 3).unwrap();
        let x = Tensor::new(vec![3, 5], vec![0.1; 15]).unwrap();
        let mut g = GradGraph::new();
        let mut bind = Binder::new(false);
        let xid = g.constant(x.clone()).unwrap();
        assert!(enc.embed(&mut g, &mut bind, "enc", xid).is_err());

        let cfg = EncoderConfig { pool_tokens: true, ..cfg };
        let enc = build_encoder(&cfg, 1, 5, 3).unwrap();
        let e = embed_once(enc.as_ref(), &x);
        assert_eq!(e.shape(), &[8]);
    }

    #[test]
    fn same_seed_builds_identical_weights() {
        let cfg = EncoderConfig::new(KIND_HYPER_MIXER, 2, 8);
        let a = build_encoder(&cfg, 4, 5, 42).unwrap();
        let b = build_encoder(&cfg, 4, 5, 42).unwrap();
        let mut wa = Vec::new();
        a.visit_params("e", &mut |_n, t| wa.extend_from_slice(t.data()));
        let mut wb = Vec::new();
        b.visit_params("e", &mut |_n, t| wb.extend_from_slice(t.data()));
        assert_eq!(wa, wb);

        let c = build_encoder(&cfg, 4, 5, 43).unwrap();
        let mut wc = Vec::new();
        c.visit_params("e", &mut |_n, t| wc.extend_from_slice(t.data()));
        assert_ne!(wa, wc);
    }

    #[test]
    fn head_basics() {
        let mut rng = Rng::new(5);
        let mut head = Head::new(4, 3, &mut rng);
        // Zero weights: logits equal the bias.
        for v in head.linear.w.data_mut() {
            *v = 0.0;
        }
        head.linear.b = Tensor::vector(vec![0.5, -0.5, 1.0]);
        let mut g = GradGraph::new();
        let mut bind = Binder::new(false);
        let e = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0, 4.0]), false).unwrap();
        let logits = head.forward(&mut g, &mut bind, "m", e).unwrap();
        assert_eq!(g.value(logits).shape(), &[1, 3]);
        assert_eq!(g.value(logits).data(), &[0.5, -0.5, 1.0]);
    }

    #[test]
    fn identity_head_square_case() {
        let mut head = Head { linear: Linear::identity(3), in_dim: 3, num_classes: 3 };
        head.linear.b = Tensor::vector(vec![0.1, 0.2, 0.3]);
        let mut g = GradGraph::new();
        let mut bind = Binder::new(false);
        let e = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]), false).unwrap();
        let logits = head.forward(&mut g, &mut bind, "m", e).unwrap();
        assert_eq!(g.value(logits).data(), &[1.1, 2.2, 3.3]);
    }

    #[test]
    fn head_rejects_width_mismatch() {
        let mut rng = Rng::new(6);
        let head = Head::new(4, 3, &mut rng);
        let mut g = GradGraph::new();
        let mut bind = Binder::new(false);
        let e = g.leaf(Tensor::vector(vec![1.0, 2.0]), false).unwrap();
        assert!(head.forward(&mut g, &mut bind, "m", e).is_err());
    }
}
