//! The three mixer block variants.
//!
//! All blocks are pre-norm residual: token mixing then channel mixing, each
//! adding back its input. With every weight zeroed a block is exactly the
//! identity map, which the tests rely on.

use crate::rng::Rng;
use crate::tensor::{Binder, GradGraph, Result as TResult, Tensor, TensorError, ValueId};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Learned affine pair for layer normalization.
#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNormParams {
    pub fn new(width: usize) -> Self {
        LayerNormParams {
            gamma: Tensor::new(vec![width], vec![1.0; width]).expect("gamma"),
            beta: Tensor::zeros(&[width]),
        }
    }

    pub fn forward(
        &self,
        g: &mut GradGraph,
        bind: &mut Binder,
        prefix: &str,
        x: ValueId,
    ) -> TResult<ValueId> {
        let gamma = bind.bind(g, &format!("{prefix}.gamma"), &self.gamma)?;
        let beta = bind.bind(g, &format!("{prefix}.beta"), &self.beta)?;
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

/// Dense affine layer; weights are `[in, out]` so `y = x.w + b`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Linear { w: Tensor::glorot(&[d_in, d_out], rng), b: Tensor::zeros(&[d_out]) }
    }

    pub fn identity(d: usize) -> Self {
        Linear { w: Tensor::eye(d), b: Tensor::zeros(&[d]) }
    }

    pub fn forward(
        &self,
        g: &mut GradGraph,
        bind: &mut Binder,
        prefix: &str,
        x: ValueId,
    ) -> TResult<ValueId> {
        let w = bind.bind(g, &format!("{prefix}.w"), &self.w)?;
        let b = bind.bind(g, &format!("{prefix}.b"), &self.b)?;
        let y = g.matmul(x, w)?;
        g.add_bias(y, b)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.w"), &self.w);
        f(&format!("{prefix}.b"), &self.b);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.w"), &mut self.w);
        f(&format!("{prefix}.b"), &mut self.b);
    }
}

fn token_count_error(bound: usize, given: usize) -> TensorError {
    TensorError::Shape {
        op: "mixer_block",
        detail: format!("token-mixing weights bound to {bound} tokens, input has {given}"),
    }
}

/// Classic mixer block: an MLP across tokens, then an MLP across channels.
///
/// `U = X + W2 . gelu(W1 . LN(X))`, `Y = U + gelu(LN(U) . W3^T) . W4^T`.
/// The token-mixing weights bind a fixed token count, so the block is
/// position-sensitive by construction.
#[derive(Debug, Clone)]
pub struct MlpMixerBlock {
    pub n_tokens: usize,
    pub ln1: LayerNormParams,
    /// `[token_hidden, n_tokens]`
    pub token_w1: Tensor,
    /// `[n_tokens, token_hidden]`
    pub token_w2: Tensor,
    pub ln2: LayerNormParams,
    /// `[chan_hidden, d]`
    pub chan_w3: Tensor,
    /// `[d, chan_hidden]`
    pub chan_w4: Tensor,
}

impl MlpMixerBlock {
    pub fn new(n_tokens: usize, d: usize, token_hidden: usize, chan_hidden: usize, rng: &mut Rng) -> Self {
        MlpMixerBlock {
            n_tokens,
            ln1: LayerNormParams::new(d),
            token_w1: Tensor::glorot(&[token_hidden, n_tokens], rng),
            token_w2: Tensor::glorot(&[n_tokens, token_hidden], rng),
            ln2: LayerNormParams::new(d),
            chan_w3: Tensor::glorot(&[chan_hidden, d], rng),
            chan_w4: Tensor::glorot(&[d, chan_hidden], rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut GradGraph,
        bind: &mut Binder,
        prefix: &str,
        x: ValueId,
    ) -> TResult<ValueId> {
        let (n, _) = g.value(x).dims2("mixer_block")?;
        if n != self.n_tokens {
            return Err(token_count_error(self.n_tokens, n));
        }
        // Token mixing with residual.
        let ln = self.ln1.forward(g, bind, &format!("{prefix}.ln1"), x)?;
        let w1 = bind.bind(g, &format!("{prefix}.tok_w1"), &self.token_w1)?;
        let w2 = bind.bind(g, &format!("{prefix}.tok_w2"), &self.token_w2)?;
        let hidden = g.matmul(w1, ln)?;
        let act = g.gelu(hidden)?;
        let mixed = g.matmul(w2, act)?;
        let u = g.add(x, mixed)?;
        // Channel mixing with residual.
        let ln2 = self.ln2.forward(g, bind, &format!("{prefix}.ln2"), u)?;
        let w3 = bind.bind(g, &format!("{prefix}.chan_w3"), &self.chan_w3)?;
        let w4 = bind.bind(g, &format!("{prefix}.chan_w4"), &self.chan_w4)?;
        let w3t = g.transpose(w3)?;
        let h2 = g.matmul(ln2, w3t)?;
        let a2 = g.gelu(h2)?;
        let w4t = g.transpose(w4)?;
        let mixed2 = g.matmul(a2, w4t)?;
        g.add(u, mixed2)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        f(&format!("{prefix}.tok_w1"), &self.token_w1);
        f(&format!("{prefix}.tok_w2"), &self.token_w2);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        f(&format!("{prefix}.chan_w3"), &self.chan_w3);
        f(&format!("{prefix}.chan_w4"), &self.chan_w4);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        f(&format!("{prefix}.tok_w1"), &mut self.token_w1);
        f(&format!("{prefix}.tok_w2"), &mut self.token_w2);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        f(&format!("{prefix}.chan_w3"), &mut self.chan_w3);
        f(&format!("{prefix}.chan_w4"), &mut self.chan_w4);
    }
}

/// Two-layer per-token MLP `d -> hidden -> d_prime`, used as a hypernetwork.
#[derive(Debug, Clone)]
pub struct TokenMlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl TokenMlp {
    pub fn new(d_in: usize, hidden: usize, d_out: usize, rng: &mut Rng) -> Self {
        TokenMlp { l1: Linear::new(d_in, hidden, rng), l2: Linear::new(hidden, d_out, rng) }
    }

    pub fn forward(
        &self,
        g: &mut GradGraph,
        bind: &mut Binder,
        prefix: &str,
        x: ValueId,
    ) -> TResult<ValueId> {
        let h = self.l1.forward(g, bind, &format!("{prefix}.l1"), x)?;
        let a = g.gelu(h)?;
        self.l2.forward(g, bind, &format!("{prefix}.l2"), a)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.l1.visit(&format!("{prefix}.l1"), f);
        self.l2.visit(&format!("{prefix}.l2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.l1.visit_mut(&format!("{prefix}.l1"), f);
        self.l2.visit_mut(&format!("{prefix}.l2"), f);
    }
}

/// Mixer block whose token-mixing weights are generated per input by two
/// shared hypernetworks, so no parameter dimension depends on the token
/// count and inputs of any length are accepted.
///
/// `W1 = H1(X)`, `W2 = H2(X)` (tokenwise), token mixing
/// `TM = W1 . gelu(W2^T . LN(X))`, then channel mixing as in the plain
/// mixer block. With positions disabled the block commutes with token
/// permutations.
#[derive(Debug, Clone)]
pub struct HyperMixerBlock {
    pub hyper1: TokenMlp,
    pub hyper2: TokenMlp,
    pub ln1: LayerNormParams,
    pub ln2: LayerNormParams,
    /// `[chan_hidden, d]`
    pub chan_w3: Tensor,
    /// `[d, chan_hidden]`
    pub chan_w4: Tensor,
    /// Learned absolute position table `[capacity, d]`, present only when
    /// positional information is enabled.
    pub positions: Option<Tensor>,
}

impl HyperMixerBlock {
    pub fn new(
        d: usize,
        d_prime: usize,
        chan_hidden: usize,
        position_capacity: Option<usize>,
        rng: &mut Rng,
    ) -> Self {
        HyperMixerBlock {
            hyper1: TokenMlp::new(d, d, d_prime, rng),
            hyper2: TokenMlp::new(d, d, d_prime, rng),
            ln1: LayerNormParams::new(d),
            ln2: LayerNormParams::new(d),
            chan_w3: Tensor::glorot(&[chan_hidden, d], rng),
            chan_w4: Tensor::glorot(&[d, chan_hidden], rng),
            positions: position_capacity.map(|cap| Tensor::glorot(&[cap, d], rng)),
        }
    }

    pub fn forward(
        &self,
        g: &mut GradGraph,
        bind: &mut Binder,
        prefix: &str,
        x: ValueId,
    ) -> TResult<ValueId> {
        let (n, _) = g.value(x).dims2("hyper_mixer_block")?;
        // Hypernetwork input: raw tokens, plus positions when enabled.
        let hyper_in = match &self.positions {
            None => x,
            Some(table) => {
                let cap = table.shape()[0];
                if n > cap {
                    return Err(TensorError::Shape {
                        op: "hyper_mixer_block",
                        detail: format!("{n} tokens exceed position capacity {cap}"),
                    });
                }
                let table_id = bind.bind(g, &format!("{prefix}.pos"), table)?;
                // Select the first n rows with a constant 0/1 matrix so the
                // gradient reaches only the used entries.
                let mut sel = Tensor::zeros(&[n, cap]);
                for i in 0..n {
                    sel.data_mut()[i * cap + i] = 1.0;
                }
                let sel_id = g.constant(sel)?;
                let used = g.matmul(sel_id, table_id)?;
                g.add(x, used)?
            }
        };
        let w1 = self.hyper1.forward(g, bind, &format!("{prefix}.hyper1"), hyper_in)?;
        let w2 = self.hyper2.forward(g, bind, &format!("{prefix}.hyper2"), hyper_in)?;
        let ln = self.ln1.forward(g, bind, &format!("{prefix}.ln1"), x)?;
        let w2t = g.transpose(w2)?;
        let mixed = g.matmul(w2t, ln)?;
        let act = g.gelu(mixed)?;
        let tm = g.matmul(w1, act)?;
        let u = g.add(x, tm)?;
        // Channel mixing with residual.
        let ln2 = self.ln2.forward(g, bind, &format!("{prefix}.ln2"), u)?;
        let w3 = bind.bind(g, &format!("{prefix}.chan_w3"), &self.chan_w3)?;
        let w4 = bind.bind(g, &format!("{prefix}.chan_w4"), &self.chan_w4)?;
        let w3t = g.transpose(w3)?;
        let h2 = g.matmul(ln2, w3t)?;
        let a2 = g.gelu(h2)?;
        let w4t = g.transpose(w4)?;
        let mixed2 = g.matmul(a2, w4t)?;
        g.add(u, mixed2)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.hyper1.visit(&format!("{prefix}.hyper1"), f);
        self.hyper2.visit(&format!("{prefix}.hyper2"), f);
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        f(&format!("{prefix}.chan_w3"), &self.chan_w3);
        f(&format!("{prefix}.chan_w4"), &self.chan_w4);
        if let Some(p) = &self.positions {
            f(&format!("{prefix}.pos"), p);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.hyper1.visit_mut(&format!("{prefix}.hyper1"), f);
        self.hyper2.visit_mut(&format!("{prefix}.hyper2"), f);
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        f(&format!("{prefix}.chan_w3"), &mut self.chan_w3);
        f(&format!("{prefix}.chan_w4"), &mut self.chan_w4);
        if let Some(p) = &mut self.positions {
            f(&format!("{prefix}.pos"), p);
        }
    }
}

/// Largest-divisor-of-`n` closest to `floor(sqrt(n))`; ties prefer the
/// smaller divisor.
pub fn default_block_count(n: usize) -> usize {
    let target = (n as f64).sqrt().floor() as usize;
    let mut best = 1;
    let mut best_dist = usize::MAX;
    for b in 1..=n {
        if !n.is_multiple_of(b) {
            continue;
        }
        let dist = b.abs_diff(target);
        if dist < best_dist {
            best = b;
            best_dist = dist;
        }
    }
    best
}

/// A pair of structured linear factors standing in for one dense map.
#[derive(Debug, Clone)]
pub struct MonarchFactors {
    pub blocks: usize,
    /// `[blocks, q, q]`
    pub left: Tensor,
    /// `[blocks, q, q]`
    pub right: Tensor,
}

impl MonarchFactors {
    pub fn new(n: usize, blocks: usize, rng: &mut Rng) -> Self {
        let q = n / blocks;
        MonarchFactors {
            blocks,
            left: Tensor::glorot(&[blocks, q, q], rng),
            right: Tensor::glorot(&[blocks, q, q], rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut GradGraph,
        bind: &mut Binder,
        prefix: &str,
        x: ValueId,
    ) -> TResult<ValueId> {
        let l = bind.bind(g, &format!("{prefix}.l"), &self.left)?;
        let r = bind.bind(g, &format!("{prefix}.r"), &self.right)?;
        g.monarch_linear(l, r, x, self.blocks)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        f(&format!("{prefix}.l"), &self.left);
        f(&format!("{prefix}.r"), &self.right);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        f(&format!("{prefix}.l"), &mut self.left);
        f(&format!("{prefix}.r"), &mut self.right);
    }
}

/// Mixer block with every dense mixing matrix replaced by a structured
/// (block-diagonal x permutation x block-diagonal) map, cutting the
/// parameter count from `n^2` to `2 n^2 / b` per matrix.
#[derive(Debug, Clone)]
pub struct MonarchMixerBlock {
    pub n_tokens: usize,
    pub ln1: LayerNormParams,
    pub tok1: MonarchFactors,
    pub tok2: MonarchFactors,
    pub ln2: LayerNormParams,
    pub chan1: MonarchFactors,
    pub chan2: MonarchFactors,
}

impl MonarchMixerBlock {
    pub fn new(n_tokens: usize, d: usize, rng: &mut Rng) -> Self {
        let tb = default_block_count(n_tokens);
        let cb = default_block_count(d);
        MonarchMixerBlock {
            n_tokens,
            ln1: LayerNormParams::new(d),
            tok1: MonarchFactors::new(n_tokens, tb, rng),
            tok2: MonarchFactors::new(n_tokens, tb, rng),
            ln2: LayerNormParams::new(d),
            chan1: MonarchFactors::new(d, cb, rng),
            chan2: MonarchFactors::new(d, cb, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut GradGraph,
        bind: &mut Binder,
        prefix: &str,
        x: ValueId,
    ) -> TResult<ValueId> {
        let (n, _) = g.value(x).dims2("monarch_mixer_block")?;
        if n != self.n_tokens {
            return Err(token_count_error(self.n_tokens, n));
        }
        // Token mixing: operate on columns by transposing.
        let ln = self.ln1.forward(g, bind, &format!("{prefix}.ln1"), x)?;
        let z = g.transpose(ln)?;
        let t1 = self.tok1.forward(g, bind, &format!("{prefix}.tok1"), z)?;
        let a = g.gelu(t1)?;
        let t2 = self.tok2.forward(g, bind, &format!("{prefix}.tok2"), a)?;
        let tm = g.transpose(t2)?;
        let u = g.add(x, tm)?;
        // Channel mixing: rows are already channel vectors.
        let ln2 = self.ln2.forward(g, bind, &format!("{prefix}.ln2"), u)?;
        let c1 = self.chan1.forward(g, bind, &format!("{prefix}.chan1"), ln2)?;
        let a2 = g.gelu(c1)?;
        let c2 = self.chan2.forward(g, bind, &format!("{prefix}.chan2"), a2)?;
        g.add(u, c2)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        self.ln1.visit(&format!("{prefix}.ln1"), f);
        self.tok1.visit(&format!("{prefix}.tok1"), f);
        self.tok2.visit(&format!("{prefix}.tok2"), f);
        self.ln2.visit(&format!("{prefix}.ln2"), f);
        self.chan1.visit(&format!("{prefix}.chan1"), f);
        self.chan2.visit(&format!("{prefix}.chan2"), f);
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        self.ln1.visit_mut(&format!("{prefix}.ln1"), f);
        self.tok1.visit_mut(&format!("{prefix}.tok1"), f);
        self.tok2.visit_mut(&format!("{prefix}.tok2"), f);
        self.ln2.visit_mut(&format!("{prefix}.ln2"), f);
        self.chan1.visit_mut(&format!("{prefix}.chan1"), f);
        self.chan2.visit_mut(&format!("{prefix}.chan2"), f);
    }
}

/// Stack of linear layers with GELU between them; the final layer stays
/// linear.
#[derive(Debug, Clone)]
pub struct PlainMlp {
    pub layers: Vec<Linear>,
}

impl PlainMlp {
    pub fn new(widths: &[usize], rng: &mut Rng) -> Self {
        assert!(widths.len() >= 2, "need at least input and output width");
        let layers = widths
            .windows(2)
            .map(|w| Linear::new(w[0], w[1], rng))
            .collect();
        PlainMlp { layers }
    }

    pub fn forward(
        &self,
        g: &mut GradGraph,
        bind: &mut Binder,
        prefix: &str,
        x: ValueId,
    ) -> TResult<ValueId> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, bind, &format!("{prefix}.l{i}"), h)?;
            if i < last {
                h = g.gelu(h)?;
            }
        }
        Ok(h)
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, layer) in self.layers.iter().enumerate() {
            layer.visit(&format!("{prefix}.l{i}"), f);
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            layer.visit_mut(&format!("{prefix}.l{i}"), f);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_input(n: usize, d: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let data = (0..n * d).map(|_| rng.normal()).collect();
        Tensor::new(vec![n, d], data).unwrap()
    }

    fn run_block(
        forward: impl Fn(&mut GradGraph, &mut Binder, ValueId) -> TResult<ValueId>,
        x: &Tensor,
    ) -> Tensor {
        let mut g = GradGraph::new();
        let mut bind = Binder::new(false);
        let xid = g.leaf(x.clone(), false).unwrap();
        let y = forward(&mut g, &mut bind, xid).unwrap();
        g.value(y).clone()
    }

    fn zero_all<V>(visit_mut: impl FnOnce(&mut dyn FnMut(&str, &mut Tensor)) -> V) {
        visit_mut(&mut |_name, t| {
            for v in t.data_mut() {
                *v = 0.0;
            }
        });
    }

    #[test]
    fn zeroed_mixer_block_is_identity() {
        let mut rng = Rng::new(1);
        let mut block = MlpMixerBlock::new(3, 4, 3, 8, &mut rng);
        zero_all(|f| block.visit_mut("b", f));
        let x = random_input(3, 4, 9);
        let y = run_block(|g, bind, xid| block.forward(g, bind, "b", xid), &x);
        assert_eq!(y, x);
    }

    #[test]
    fn zeroed_hyper_block_is_identity() {
        let mut rng = Rng::new(2);
        let mut block = HyperMixerBlock::new(4, 3, 8, None, &mut rng);
        zero_all(|f| block.visit_mut("b", f));
        let x = random_input(5, 4, 10);
        let y = run_block(|g, bind, xid| block.forward(g, bind, "b", xid), &x);
        assert_eq!(y, x);
    }

    #[test]
    fn zeroed_monarch_block_is_identity() {
        let mut rng = Rng::new(3);
        let mut block = MonarchMixerBlock::new(4, 6, &mut rng);
        zero_all(|f| block.visit_mut("b", f));
        let x = random_input(4, 6, 11);
        let y = run_block(|g, bind, xid| block.forward(g, bind, "b", xid), &x);
        assert_eq!(y, x);
    }

    #[test]
    fn mixer_block_is_position_sensitive() {
        // Swap two tokens of a random input: with nonzero token-mixing
        // weights the output must not be the same swap of the original
        // output. The concrete input is a regression fixture.
        let mut rng = Rng::new(4);
        let block = MlpMixerBlock::new(3, 4, 6, 8, &mut rng);
        let x = random_input(3, 4, 12);
        let mut perm_rows: Vec<Vec<f64>> = (0..3).map(|i| x.row(i).data().to_vec()).collect();
        perm_rows.swap(0, 2);
        let xp = Tensor::from_rows(&perm_rows).unwrap();

        let y = run_block(|g, b, id| block.forward(g, b, "b", id), &x);
        let yp = run_block(|g, b, id| block.forward(g, b, "b", id), &xp);
        let mut y_rows: Vec<Vec<f64>> = (0..3).map(|i| y.row(i).data().to_vec()).collect();
        y_rows.swap(0, 2);
        let y_permuted = Tensor::from_rows(&y_rows).unwrap();
        assert!(
            yp.max_abs_diff(&y_permuted) > 1e-6,
            "token mixing should break permutation equivariance"
        );
    }

    #[test]
    fn mixer_channel_substep_commutes_with_token_permutation() {
        // With token-mixing weights zeroed, only the channel MLP acts and the
        // block must commute with token permutations.
        let mut rng = Rng::new(5);
        let mut block = MlpMixerBlock::new(3, 4, 6, 8, &mut rng);
        for v in block.token_w1.data_mut() {
            *v = 0.0;
        }
        for v in block.token_w2.data_mut() {
            *v = 0.0;
        }
        let x = random_input(3, 4, 13);
        let mut rows: Vec<Vec<f64>> = (0..3).map(|i| x.row(i).data().to_vec()).collect();
        rows.rotate_left(1);
        let xp = Tensor::from_rows(&rows).unwrap();

        let y = run_block(|g, b, id| block.forward(g, b, "b", id), &x);
        let yp = run_block(|g, b, id| block.forward(g, b, "b", id), &xp);
        let mut y_rows: Vec<Vec<f64>> = (0..3).map(|i| y.row(i).data().to_vec()).collect();
        y_rows.rotate_left(1);
        assert!(yp.max_abs_diff(&Tensor::from_rows(&y_rows).unwrap()) < 1e-12);
    }

    #[test]
    fn mixer_block_rejects_wrong_token_count() {
        let mut rng = Rng::new(6);
        let block = MlpMixerBlock::new(3, 4, 6, 8, &mut rng);
        let x = random_input(5, 4, 14);
        let mut g = GradGraph::new();
        let mut bind = Binder::new(false);
        let xid = g.leaf(x, false).unwrap();
        let err = block.forward(&mut g, &mut bind, "b", xid).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains('3') && msg.contains('5'), "{msg}");
    }

    #[test]
    fn hyper_block_equivariant_under_token_permutation() {
        let mut rng = Rng::new(7);
        let block = HyperMixerBlock::new(6, 4, 12, None, &mut rng);
        let x = random_input(4, 6, 15);
        let perm = [2usize, 0, 3, 1];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| x.row(i).data().to_vec()).collect();
        let xp = Tensor::from_rows(&rows).unwrap();

        let y = run_block(|g, b, id| block.forward(g, b, "b", id), &x);
        let yp = run_block(|g, b, id| block.forward(g, b, "b", id), &xp);
        let y_rows: Vec<Vec<f64>> = perm.iter().map(|&i| y.row(i).data().to_vec()).collect();
        assert!(yp.max_abs_diff(&Tensor::from_rows(&y_rows).unwrap()) < 1e-10);
    }

    #[test]
    fn hyper_block_accepts_any_token_count() {
        let mut rng = Rng::new(8);
        let block = HyperMixerBlock::new(5, 3, 10, None, &mut rng);
        for n in [3usize, 7] {
            let x = random_input(n, 5, 16 + n as u64);
            let y = run_block(|g, b, id| block.forward(g, b, "b", id), &x);
            assert_eq!(y.shape(), &[n, 5]);
        }
    }

    #[test]
    fn hyper_block_with_positions_breaks_equivariance() {
        let mut rng = Rng::new(9);
        let block = HyperMixerBlock::new(6, 4, 12, Some(8), &mut rng);
        let x = random_input(4, 6, 17);
        let perm = [1usize, 0, 3, 2];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&i| x.row(i).data().to_vec()).collect();
        let xp = Tensor::from_rows(&rows).unwrap();
        let y = run_block(|g, b, id| block.forward(g, b, "b", id), &x);
        let yp = run_block(|g, b, id| block.forward(g, b, "b", id), &xp);
        let y_rows: Vec<Vec<f64>> = perm.iter().map(|&i| y.row(i).data().to_vec()).collect();
        assert!(yp.max_abs_diff(&Tensor::from_rows(&y_rows).unwrap()) > 1e-6);
    }

    #[test]
    fn zeroed_hypernet_output_reduces_to_channel_path() {
        let mut rng = Rng::new(10);
        let mut block = HyperMixerBlock::new(4, 3, 8, None, &mut rng);
        // Zero only the hypernetwork output layers: token mixing vanishes.
        zero_all(|f| block.hyper1.l2.visit_mut("z", f));
        zero_all(|f| block.hyper2.l2.visit_mut("z", f));
        let x = random_input(3, 4, 18);

        let y = run_block(|g, b, id| block.forward(g, b, "b", id), &x);

        // Reference: x + channel-MLP(LN2(x)) using the same parameters.
        let mut g = GradGraph::new();
        let mut bind = Binder::new(false);
        let xid = g.leaf(x.clone(), false).unwrap();
        let ln2 = block.ln2.forward(&mut g, &mut bind, "r.ln2", xid).unwrap();
        let w3 = bind.bind(&mut g, "r.w3", &block.chan_w3).unwrap();
        let w4 = bind.bind(&mut g, "r.w4", &block.chan_w4).unwrap();
        let w3t = g.transpose(w3).unwrap();
        let h = g.matmul(ln2, w3t).unwrap();
        let a = g.gelu(h).unwrap();
        let w4t = g.transpose(w4).unwrap();
        let cm = g.matmul(a, w4t).unwrap();
        let want = g.add(xid, cm).unwrap();
        assert!(y.max_abs_diff(g.value(want)) < 1e-12);
    }

    #[test]
    fn default_block_count_rule() {
        assert_eq!(default_block_count(4), 2);
        assert_eq!(default_block_count(8), 2); // floor(sqrt(8)) = 2, a divisor
        assert_eq!(default_block_count(16), 4);
        assert_eq!(default_block_count(64), 8);
        assert_eq!(default_block_count(12), 3);
        assert_eq!(default_block_count(7), 1); // prime: 1 and 7 tie at distance 1... smaller? no: |1-2|=1, |7-2|=5
        assert_eq!(default_block_count(1), 1);
    }

    #[test]
    fn monarch_parameter_count() {
        // n=64, b=8: 2 * 64^2 / 8 = 1024 parameters vs 4096 dense.
        let mut rng = Rng::new(11);
        let f = MonarchFactors::new(64, 8, &mut rng);
        assert_eq!(f.left.numel() + f.right.numel(), 1024);
    }

    #[test]
    fn identity_plain_mlp_layer_passes_through() {
        let layer = Linear::identity(4);
        let mlp = PlainMlp { layers: vec![layer] };
        let x = random_input(1, 4, 19);
        let y = run_block(|g, b, id| mlp.forward(g, b, "m", id), &x);
        assert_eq!(y, x);
    }

    #[test]
    fn zero_weight_mlp_outputs_bias() {
        let mut rng = Rng::new(12);
        let mut layer = Linear::new(3, 2, &mut rng);
        for v in layer.w.data_mut() {
            *v = 0.0;
        }
        layer.b = Tensor::vector(vec![0.7, -0.3]);
        let mlp = PlainMlp { layers: vec![layer] };
        let x = random_input(1, 3, 20);
        let y = run_block(|g, b, id| mlp.forward(g, b, "m", id), &x);
        assert_eq!(y.data(), &[0.7, -0.3]);
    }
}
