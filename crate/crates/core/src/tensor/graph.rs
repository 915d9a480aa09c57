//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`GradGraph`] owns every tensor created during one forward pass. Ops
//! append nodes in topological order; [`GradGraph::backward`] walks the tape
//! in reverse exactly once and fills `grad` on every `requires_grad` leaf.
//! Every forward op validates shapes up front and checks its output for
//! NaN/Inf, so divergence surfaces as an error instead of propagating
//! silently.
//!
//! Accumulation order is fixed everywhere (k-innermost in matmul, ascending
//! index in reductions), which makes results bit-reproducible across runs.

use std::collections::BTreeMap;

use super::{Result, Tensor, TensorError};

/// Handle to a value stored in a [`GradGraph`].
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash)]
pub struct ValueId(pub(crate) usize);

const GELU_COEFF: f64 = 0.044715;

fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEFF * x * x * x)).tanh())
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEFF * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    let du = c * (1.0 + 3.0 * GELU_COEFF * x * x);
    0.5 * (1.0 + t) + 0.5 * x * sech2 * du
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Raw matrix product with the k loop innermost per output element.
fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: ValueId, b: ValueId },
    Transpose { x: ValueId },
    Add { a: ValueId, b: ValueId },
    Sub { a: ValueId, b: ValueId },
    Mul { a: ValueId, b: ValueId },
    AddScalar { x: ValueId },
    MulScalar { x: ValueId, s: f64 },
    AddBias { x: ValueId, bias: ValueId },
    Gelu { x: ValueId },
    Relu { x: ValueId },
    Sigmoid { x: ValueId },
    LayerNorm { x: ValueId, gamma: ValueId, beta: ValueId, eps: f64 },
    MeanAxis { x: ValueId, axis: usize },
    MaxAxis { x: ValueId, winners: Vec<usize> },
    Softmax { x: ValueId, axis: usize },
    Concat { xs: Vec<ValueId>, axis: usize },
    Reshape { x: ValueId },
    SumAll { x: ValueId },
    ElemMax { a: ValueId, b: ValueId },
    MonarchLinear { left: ValueId, right: ValueId, x: ValueId, blocks: usize },
    CrossEntropy { logits: ValueId, targets: Vec<usize> },
    BinaryCrossEntropy { logits: ValueId, targets: Vec<f64> },
}

struct Node {
    tensor: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Reverse-mode computation tape.
pub struct GradGraph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Default for GradGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl GradGraph {
    pub fn new() -> Self {
        GradGraph { nodes: Vec::new(), consumed: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a leaf value. Trainable leaves receive gradients on backward.
    pub fn leaf(&mut self, mut tensor: Tensor, requires_grad: bool) -> Result<ValueId> {
        if !tensor.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        tensor.requires_grad = requires_grad;
        tensor.grad = None;
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { tensor, op: Op::Leaf, needs_grad: requires_grad });
        Ok(id)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Result<ValueId> {
        self.leaf(tensor, false)
    }

    pub fn value(&self, id: ValueId) -> &Tensor {
        &self.nodes[id.0].tensor
    }

    /// Gradient of a leaf, populated by [`GradGraph::backward`].
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    fn push(&mut self, op_name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op) -> Result<ValueId> {
        if data.iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let needs_grad = match &op {
            Op::Leaf => false,
            Op::Matmul { a, b }
            | Op::Add { a, b }
            | Op::Sub { a, b }
            | Op::Mul { a, b }
            | Op::ElemMax { a, b } => self.needs(*a) || self.needs(*b),
            Op::AddBias { x, bias } => self.needs(*x) || self.needs(*bias),
            Op::LayerNorm { x, gamma, beta, .. } => {
                self.needs(*x) || self.needs(*gamma) || self.needs(*beta)
            }
            Op::Concat { xs, .. } => xs.iter().any(|x| self.needs(*x)),
            Op::MonarchLinear { left, right, x, .. } => {
                self.needs(*left) || self.needs(*right) || self.needs(*x)
            }
            Op::Transpose { x }
            | Op::AddScalar { x }
            | Op::MulScalar { x, .. }
            | Op::Gelu { x }
            | Op::Relu { x }
            | Op::Sigmoid { x }
            | Op::MeanAxis { x, .. }
            | Op::MaxAxis { x, .. }
            | Op::Softmax { x, .. }
            | Op::Reshape { x }
            | Op::SumAll { x }
            | Op::CrossEntropy { logits: x, .. }
            | Op::BinaryCrossEntropy { logits: x, .. } => self.needs(*x),
        };
        let tensor = Tensor::new(shape, data)?;
        let id = ValueId(self.nodes.len());
        self.nodes.push(Node { tensor, op, needs_grad });
        Ok(id)
    }

    fn needs(&self, id: ValueId) -> bool {
        self.nodes[id.0].needs_grad
    }

    // ── Forward ops ──────────────────────────────────────────────────

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        let (m, ka) = self.value(a).dims2("matmul")?;
        let (kb, n) = self.value(b).dims2("matmul")?;
        if ka != kb {
            return Err(TensorError::Shape {
                op: "matmul",
                detail: format!(
                    "inner dimensions disagree: lhs {:?} vs rhs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, ka, n);
        self.push("matmul", vec![m, n], data, Op::Matmul { a, b })
    }

    pub fn transpose(&mut self, x: ValueId) -> Result<ValueId> {
        let (r, c) = self.value(x).dims2("transpose")?;
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push("transpose", vec![c, r], data, Op::Transpose { x })
    }

    fn binary_elementwise(
        &mut self,
        op_name: &'static str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<ValueId> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::Shape {
                op: op_name,
                detail: format!(
                    "shapes differ: {:?} vs {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        let shape = self.value(a).shape().to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data().iter())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(op_name, shape, data, op)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Elementwise maximum; ties route the gradient to the first argument.
    pub fn elem_max(&mut self, a: ValueId, b: ValueId) -> Result<ValueId> {
        self.binary_elementwise("elem_max", a, b, |x, y| if x >= y { x } else { y }, Op::ElemMax { a, b })
    }

    pub fn add_scalar(&mut self, x: ValueId, s: f64) -> Result<ValueId> {
        let shape = self.value(x).shape().to_vec();
        let data = self.value(x).data().iter().map(|&v| v + s).collect();
        self.push("add_scalar", shape, data, Op::AddScalar { x })
    }

    pub fn mul_scalar(&mut self, x: ValueId, s: f64) -> Result<ValueId> {
        let shape = self.value(x).shape().to_vec();
        let data = self.value(x).data().iter().map(|&v| v * s).collect();
        self.push("mul_scalar", shape, data, Op::MulScalar { x, s })
    }

    /// Broadcast a `[c]` bias over the rows of an `[r,c]` matrix.
    pub fn add_bias(&mut self, x: ValueId, bias: ValueId) -> Result<ValueId> {
        let (r, c) = self.value(x).dims2("add_bias")?;
        if self.value(bias).shape() != [c] {
            return Err(TensorError::Shape {
                op: "add_bias",
                detail: format!(
                    "bias shape {:?} does not match row width {c}",
                    self.value(bias).shape()
                ),
            });
        }
        let bd = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += bd[j];
            }
        }
        self.push("add_bias", vec![r, c], data, Op::AddBias { x, bias })
    }

    fn unary(
        &mut self,
        op_name: &'static str,
        x: ValueId,
        f: impl Fn(f64) -> f64,
        op: Op,
    ) -> Result<ValueId> {
        let shape = self.value(x).shape().to_vec();
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        self.push(op_name, shape, data, op)
    }

    /// GELU with the tanh approximation (coefficient 0.044715).
    pub fn gelu(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary("gelu", x, gelu_scalar, Op::Gelu { x })
    }

    pub fn relu(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu { x })
    }

    pub fn sigmoid(&mut self, x: ValueId) -> Result<ValueId> {
        self.unary("sigmoid", x, sigmoid_scalar, Op::Sigmoid { x })
    }

    /// Per-row normalization of an `[r,c]` matrix followed by an affine map.
    pub fn layer_norm(&mut self, x: ValueId, gamma: ValueId, beta: ValueId, eps: f64) -> Result<ValueId> {
        let (r, c) = self.value(x).dims2("layer_norm")?;
        for (name, id) in [("gamma", gamma), ("beta", beta)] {
            if self.value(id).shape() != [c] {
                return Err(TensorError::Shape {
                    op: "layer_norm",
                    detail: format!("{name} shape {:?} does not match width {c}", self.value(id).shape()),
                });
            }
        }
        let xd = self.value(x).data();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &xd[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                data[i * c + j] = (row[j] - mean) * inv * gd[j] + bd[j];
            }
        }
        self.push("layer_norm", vec![r, c], data, Op::LayerNorm { x, gamma, beta, eps })
    }

    fn check_axis2(&self, op: &'static str, x: ValueId, axis: usize) -> Result<(usize, usize)> {
        let (r, c) = self.value(x).dims2(op)?;
        if axis > 1 {
            return Err(TensorError::Axis { op, axis, rank: 2 });
        }
        Ok((r, c))
    }

    /// Mean over one axis of an `[r,c]` matrix; returns a 1-D tensor.
    pub fn mean_axis(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        let (r, c) = self.check_axis2("mean", x, axis)?;
        let xd = self.value(x).data();
        let data = if axis == 0 {
            (0..c)
                .map(|j| (0..r).map(|i| xd[i * c + j]).sum::<f64>() / r as f64)
                .collect::<Vec<f64>>()
        } else {
            (0..r)
                .map(|i| xd[i * c..(i + 1) * c].iter().sum::<f64>() / c as f64)
                .collect()
        };
        let len = data.len();
        self.push("mean", vec![len], data, Op::MeanAxis { x, axis })
    }

    /// Max over one axis of an `[r,c]` matrix (values only); first maximum wins.
    pub fn max_axis(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        let (r, c) = self.check_axis2("max", x, axis)?;
        let xd = self.value(x).data();
        let (out_len, stride_outer, stride_inner, inner_count) = if axis == 0 {
            (c, 1usize, c, r) // outputs indexed by column, scan rows
        } else {
            (r, c, 1usize, c) // outputs indexed by row, scan columns
        };
        let mut data = vec![0.0; out_len];
        let mut winners = vec![0usize; out_len];
        for o in 0..out_len {
            let mut best = f64::NEG_INFINITY;
            let mut best_idx = 0;
            for k in 0..inner_count {
                let idx = o * stride_outer + k * stride_inner;
                if xd[idx] > best {
                    best = xd[idx];
                    best_idx = idx;
                }
            }
            data[o] = best;
            winners[o] = best_idx;
        }
        self.push("max", vec![out_len], data, Op::MaxAxis { x, winners })
    }

    /// Softmax along an axis of an `[r,c]` matrix, stabilized by max subtraction.
    pub fn softmax(&mut self, x: ValueId, axis: usize) -> Result<ValueId> {
        let (r, c) = self.check_axis2("softmax", x, axis)?;
        let xd = self.value(x).data();
        let mut data = vec![0.0; r * c];
        let (groups, group_len, stride_group, stride_elem) = if axis == 1 {
            (r, c, c, 1usize)
        } else {
            (c, r, 1usize, c)
        };
        for g in 0..groups {
            let idx = |k: usize| g * stride_group + k * stride_elem;
            let mut m = f64::NEG_INFINITY;
            for k in 0..group_len {
                m = m.max(xd[idx(k)]);
            }
            let mut z = 0.0;
            for k in 0..group_len {
                let e = (xd[idx(k)] - m).exp();
                data[idx(k)] = e;
                z += e;
            }
            for k in 0..group_len {
                data[idx(k)] /= z;
            }
        }
        self.push("softmax", vec![r, c], data, Op::Softmax { x, axis })
    }

    /// Concatenate rank-2 tensors along axis 0 (rows) or 1 (columns).
    pub fn concat(&mut self, xs: &[ValueId], axis: usize) -> Result<ValueId> {
        if xs.is_empty() {
            return Err(TensorError::Shape { op: "concat", detail: "empty input list".to_string() });
        }
        if axis > 1 {
            return Err(TensorError::Axis { op: "concat", axis, rank: 2 });
        }
        let mut dims: Vec<(usize, usize)> = Vec::with_capacity(xs.len());
        for &x in xs {
            dims.push(self.value(x).dims2("concat")?);
        }
        let (r0, c0) = dims[0];
        if axis == 0 {
            if dims.iter().any(|&(_, c)| c != c0) {
                return Err(TensorError::Shape {
                    op: "concat",
                    detail: format!("column counts differ: {dims:?}"),
                });
            }
            let rows: usize = dims.iter().map(|&(r, _)| r).sum();
            let mut data = Vec::with_capacity(rows * c0);
            for &x in xs {
                data.extend_from_slice(self.value(x).data());
            }
            self.push("concat", vec![rows, c0], data, Op::Concat { xs: xs.to_vec(), axis })
        } else {
            if dims.iter().any(|&(r, _)| r != r0) {
                return Err(TensorError::Shape {
                    op: "concat",
                    detail: format!("row counts differ: {dims:?}"),
                });
            }
            let cols: usize = dims.iter().map(|&(_, c)| c).sum();
            let mut data = vec![0.0; r0 * cols];
            let mut offset = 0;
            for (&x, &(_, c)) in xs.iter().zip(dims.iter()) {
                let xd = self.value(x).data();
                for i in 0..r0 {
                    data[i * cols + offset..i * cols + offset + c]
                        .copy_from_slice(&xd[i * c..(i + 1) * c]);
                }
                offset += c;
            }
            self.push("concat", vec![r0, cols], data, Op::Concat { xs: xs.to_vec(), axis })
        }
    }

    pub fn reshape(&mut self, x: ValueId, shape: &[usize]) -> Result<ValueId> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() || shape.contains(&0) {
            return Err(TensorError::Shape {
                op: "reshape",
                detail: format!("cannot reshape {:?} into {shape:?}", self.value(x).shape()),
            });
        }
        let data = self.value(x).data().to_vec();
        self.push("reshape", shape.to_vec(), data, Op::Reshape { x })
    }

    /// Sum of all elements as a scalar.
    pub fn sum_all(&mut self, x: ValueId) -> Result<ValueId> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", vec![1], vec![s], Op::SumAll { x })
    }

    /// Structured linear map `y = L . P . R . x` applied to each row of `x`.
    ///
    /// `left` and `right` are `[b, q, q]` stacks of diagonal blocks with
    /// `b*q = n`; `P` is the fixed `(b, q)` transpose permutation. The product
    /// is computed blockwise; the dense `n x n` matrix is never materialized.
    pub fn monarch_linear(&mut self, left: ValueId, right: ValueId, x: ValueId, blocks: usize) -> Result<ValueId> {
        let (rows, n) = self.value(x).dims2("monarch_linear")?;
        if blocks == 0 || n % blocks != 0 {
            return Err(TensorError::Shape {
                op: "monarch_linear",
                detail: format!("block count {blocks} does not divide width {n}"),
            });
        }
        let q = n / blocks;
        for (name, id) in [("left", left), ("right", right)] {
            if self.value(id).shape() != [blocks, q, q] {
                return Err(TensorError::Shape {
                    op: "monarch_linear",
                    detail: format!(
                        "{name} factor shape {:?}, expected [{blocks}, {q}, {q}]",
                        self.value(id).shape()
                    ),
                });
            }
        }
        let ld = self.value(left).data();
        let rd = self.value(right).data();
        let xd = self.value(x).data();
        let mut data = vec![0.0; rows * n];
        let mut z = vec![0.0; n];
        let mut w = vec![0.0; n];
        for row in 0..rows {
            let xr = &xd[row * n..(row + 1) * n];
            // z = blockdiag(R) . x
            for i in 0..blocks {
                for s in 0..q {
                    let mut acc = 0.0;
                    for t in 0..q {
                        acc += rd[(i * q + s) * q + t] * xr[i * q + t];
                    }
                    z[i * q + s] = acc;
                }
            }
            // w = P . z  (transpose the (b, q) layout)
            for i in 0..blocks {
                for j in 0..q {
                    w[j * blocks + i] = z[i * q + j];
                }
            }
            // y = blockdiag(L) . w
            let yr = &mut data[row * n..(row + 1) * n];
            for u in 0..blocks {
                for s in 0..q {
                    let mut acc = 0.0;
                    for t in 0..q {
                        acc += ld[(u * q + s) * q + t] * w[u * q + t];
                    }
                    yr[u * q + s] = acc;
                }
            }
        }
        self.push(
            "monarch_linear",
            vec![rows, n],
            data,
            Op::MonarchLinear { left, right, x, blocks },
        )
    }

    /// Mean negative log-likelihood of integer targets under row softmax.
    pub fn cross_entropy(&mut self, logits: ValueId, targets: &[usize]) -> Result<ValueId> {
        let (n, k) = self.value(logits).dims2("cross_entropy")?;
        if targets.len() != n {
            return Err(TensorError::Shape {
                op: "cross_entropy",
                detail: format!("{n} logit rows but {} targets", targets.len()),
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::ClassIndex { index: bad, num_classes: k });
        }
        let xd = self.value(logits).data();
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = &xd[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[t];
        }
        let loss = total / n as f64;
        self.push(
            "cross_entropy",
            vec![1],
            vec![loss],
            Op::CrossEntropy { logits, targets: targets.to_vec() },
        )
    }

    /// Mean binary cross-entropy over all elements, applied to raw logits.
    ///
    /// Uses the stabilized form `max(z,0) - z*y + ln(1 + exp(-|z|))`.
    pub fn binary_cross_entropy(&mut self, logits: ValueId, targets: &Tensor) -> Result<ValueId> {
        if self.value(logits).shape() != targets.shape() {
            return Err(TensorError::Shape {
                op: "binary_cross_entropy",
                detail: format!(
                    "logits {:?} vs targets {:?}",
                    self.value(logits).shape(),
                    targets.shape()
                ),
            });
        }
        if targets.data().iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(TensorError::Shape {
                op: "binary_cross_entropy",
                detail: "targets must be 0 or 1".to_string(),
            });
        }
        let xd = self.value(logits).data();
        let count = xd.len() as f64;
        let mut total = 0.0;
        for (&z, &y) in xd.iter().zip(targets.data().iter()) {
            total += z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        }
        let loss = total / count;
        self.push(
            "binary_cross_entropy",
            vec![1],
            vec![loss],
            Op::BinaryCrossEntropy { logits, targets: targets.data().to_vec() },
        )
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse traversal from a scalar loss. Populates `grad` on every
    /// `requires_grad` leaf (zeros if the leaf is disconnected). A graph can
    /// only be traversed once.
    pub fn backward(&mut self, loss: ValueId) -> Result<()> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        let numel = self.value(loss).numel();
        if numel != 1 {
            return Err(TensorError::NonScalarLoss { numel });
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            if self.nodes[i].tensor.requires_grad {
                self.nodes[i].tensor.grad = Some(g.clone());
            }
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            self.propagate(i, &op, &g, &mut grads);
        }

        // Disconnected trainable leaves still get a (zero) gradient.
        for node in &mut self.nodes {
            if node.tensor.requires_grad && node.tensor.grad.is_none() {
                node.tensor.grad = Some(vec![0.0; node.tensor.numel()]);
            }
        }
        Ok(())
    }

    fn accum(grads: &mut [Option<Vec<f64>>], id: ValueId, len: usize, f: impl FnOnce(&mut [f64])) {
        let slot = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
        f(slot);
    }

    fn propagate(&self, i: usize, op: &Op, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match op {
            Op::Leaf => {}

            Op::Matmul { a, b } => {
                let (m, k) = (self.value(*a).shape()[0], self.value(*a).shape()[1]);
                let n = self.value(*b).shape()[1];
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if self.needs(*a) {
                    // dA = dC . B^T
                    Self::accum(grads, *a, m * k, |da| {
                        for r in 0..m {
                            for c in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += g[r * n + j] * bd[c * n + j];
                                }
                                da[r * k + c] += acc;
                            }
                        }
                    });
                }
                if self.needs(*b) {
                    // dB = A^T . dC
                    Self::accum(grads, *b, k * n, |db| {
                        for r in 0..k {
                            for c in 0..n {
                                let mut acc = 0.0;
                                for j in 0..m {
                                    acc += ad[j * k + r] * g[j * n + c];
                                }
                                db[r * n + c] += acc;
                            }
                        }
                    });
                }
            }

            Op::Transpose { x } => {
                let (c, r) = (self.nodes[i].tensor.shape()[0], self.nodes[i].tensor.shape()[1]);
                if self.needs(*x) {
                    Self::accum(grads, *x, r * c, |dx| {
                        for a in 0..c {
                            for b in 0..r {
                                dx[b * c + a] += g[a * r + b];
                            }
                        }
                    });
                }
            }

            Op::Add { a, b } => {
                for &side in [a, b].iter() {
                    if self.needs(*side) {
                        Self::accum(grads, *side, g.len(), |d| {
                            for (dv, gv) in d.iter_mut().zip(g.iter()) {
                                *dv += gv;
                            }
                        });
                    }
                }
            }

            Op::Sub { a, b } => {
                if self.needs(*a) {
                    Self::accum(grads, *a, g.len(), |d| {
                        for (dv, gv) in d.iter_mut().zip(g.iter()) {
                            *dv += gv;
                        }
                    });
                }
                if self.needs(*b) {
                    Self::accum(grads, *b, g.len(), |d| {
                        for (dv, gv) in d.iter_mut().zip(g.iter()) {
                            *dv -= gv;
                        }
                    });
                }
            }

            Op::Mul { a, b } => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if self.needs(*a) {
                    Self::accum(grads, *a, g.len(), |d| {
                        for ((dv, gv), bv) in d.iter_mut().zip(g.iter()).zip(bd.iter()) {
                            *dv += gv * bv;
                        }
                    });
                }
                if self.needs(*b) {
                    Self::accum(grads, *b, g.len(), |d| {
                        for ((dv, gv), av) in d.iter_mut().zip(g.iter()).zip(ad.iter()) {
                            *dv += gv * av;
                        }
                    });
                }
            }

            Op::ElemMax { a, b } => {
                let ad = self.value(*a).data();
                let bd = self.value(*b).data();
                if self.needs(*a) {
                    Self::accum(grads, *a, g.len(), |d| {
                        for k in 0..g.len() {
                            if ad[k] >= bd[k] {
                                d[k] += g[k];
                            }
                        }
                    });
                }
                if self.needs(*b) {
                    Self::accum(grads, *b, g.len(), |d| {
                        for k in 0..g.len() {
                            if ad[k] < bd[k] {
                                d[k] += g[k];
                            }
                        }
                    });
                }
            }

            Op::AddScalar { x } => {
                if self.needs(*x) {
                    Self::accum(grads, *x, g.len(), |d| {
                        for (dv, gv) in d.iter_mut().zip(g.iter()) {
                            *dv += gv;
                        }
                    });
                }
            }

            Op::MulScalar { x, s } => {
                if self.needs(*x) {
                    Self::accum(grads, *x, g.len(), |d| {
                        for (dv, gv) in d.iter_mut().zip(g.iter()) {
                            *dv += gv * s;
                        }
                    });
                }
            }

            Op::AddBias { x, bias } => {
                let (r, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                if self.needs(*x) {
                    Self::accum(grads, *x, r * c, |d| {
                        for (dv, gv) in d.iter_mut().zip(g.iter()) {
                            *dv += gv;
                        }
                    });
                }
                if self.needs(*bias) {
                    Self::accum(grads, *bias, c, |d| {
                        for row in 0..r {
                            for j in 0..c {
                                d[j] += g[row * c + j];
                            }
                        }
                    });
                }
            }

            Op::Gelu { x } => {
                if self.needs(*x) {
                    let xd = self.value(*x).data();
                    Self::accum(grads, *x, g.len(), |d| {
                        for k in 0..g.len() {
                            d[k] += g[k] * gelu_grad_scalar(xd[k]);
                        }
                    });
                }
            }

            Op::Relu { x } => {
                if self.needs(*x) {
                    let xd = self.value(*x).data();
                    Self::accum(grads, *x, g.len(), |d| {
                        for k in 0..g.len() {
                            if xd[k] > 0.0 {
                                d[k] += g[k];
                            }
                        }
                    });
                }
            }

            Op::Sigmoid { x } => {
                if self.needs(*x) {
                    let out = self.nodes[i].tensor.data();
                    Self::accum(grads, *x, g.len(), |d| {
                        for k in 0..g.len() {
                            d[k] += g[k] * out[k] * (1.0 - out[k]);
                        }
                    });
                }
            }

            Op::LayerNorm { x, gamma, beta, eps } => {
                let (r, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let xd = self.value(*x).data();
                let gd = self.value(*gamma).data();
                let cf = c as f64;
                // Recompute per-row statistics; cheaper than saving them.
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                let mut dx = vec![0.0; r * c];
                for row in 0..r {
                    let xs = &xd[row * c..(row + 1) * c];
                    let gs = &g[row * c..(row + 1) * c];
                    let mean = xs.iter().sum::<f64>() / cf;
                    let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cf;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = xs.iter().map(|&v| (v - mean) * inv).collect();
                    let dxhat: Vec<f64> = gs.iter().zip(gd.iter()).map(|(&gv, &gm)| gv * gm).collect();
                    let m1 = dxhat.iter().sum::<f64>() / cf;
                    let m2 = dxhat.iter().zip(xhat.iter()).map(|(&a, &b)| a * b).sum::<f64>() / cf;
                    for j in 0..c {
                        dgamma[j] += gs[j] * xhat[j];
                        dbeta[j] += gs[j];
                        dx[row * c + j] = (dxhat[j] - m1 - xhat[j] * m2) * inv;
                    }
                }
                if self.needs(*x) {
                    Self::accum(grads, *x, r * c, |d| {
                        for (dv, nv) in d.iter_mut().zip(dx.iter()) {
                            *dv += nv;
                        }
                    });
                }
                if self.needs(*gamma) {
                    Self::accum(grads, *gamma, c, |d| {
                        for (dv, nv) in d.iter_mut().zip(dgamma.iter()) {
                            *dv += nv;
                        }
                    });
                }
                if self.needs(*beta) {
                    Self::accum(grads, *beta, c, |d| {
                        for (dv, nv) in d.iter_mut().zip(dbeta.iter()) {
                            *dv += nv;
                        }
                    });
                }
            }

            Op::MeanAxis { x, axis } => {
                if self.needs(*x) {
                    let (r, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                    Self::accum(grads, *x, r * c, |d| {
                        if *axis == 0 {
                            let rf = r as f64;
                            for row in 0..r {
                                for j in 0..c {
                                    d[row * c + j] += g[j] / rf;
                                }
                            }
                        } else {
                            let cf = c as f64;
                            for row in 0..r {
                                for j in 0..c {
                                    d[row * c + j] += g[row] / cf;
                                }
                            }
                        }
                    });
                }
            }

            Op::MaxAxis { x, winners } => {
                if self.needs(*x) {
                    let numel = self.value(*x).numel();
                    Self::accum(grads, *x, numel, |d| {
                        for (o, &w) in winners.iter().enumerate() {
                            d[w] += g[o];
                        }
                    });
                }
            }

            Op::Softmax { x, axis } => {
                if self.needs(*x) {
                    let out = self.nodes[i].tensor.data();
                    let (r, c) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                    let (groups, group_len, sg, se) =
                        if *axis == 1 { (r, c, c, 1usize) } else { (c, r, 1usize, c) };
                    Self::accum(grads, *x, r * c, |d| {
                        for gi in 0..groups {
                            let idx = |k: usize| gi * sg + k * se;
                            let mut dot = 0.0;
                            for k in 0..group_len {
                                dot += g[idx(k)] * out[idx(k)];
                            }
                            for k in 0..group_len {
                                d[idx(k)] += out[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    });
                }
            }

            Op::Concat { xs, axis } => {
                if *axis == 0 {
                    let mut row_offset = 0;
                    let out_cols = self.nodes[i].tensor.shape()[1];
                    for &xv in xs {
                        let (r, c) = (self.value(xv).shape()[0], self.value(xv).shape()[1]);
                        if self.needs(xv) {
                            let base = row_offset * out_cols;
                            Self::accum(grads, xv, r * c, |d| {
                                for (dv, gv) in d.iter_mut().zip(g[base..base + r * c].iter()) {
                                    *dv += gv;
                                }
                            });
                        }
                        row_offset += r;
                    }
                } else {
                    let out_cols = self.nodes[i].tensor.shape()[1];
                    let mut col_offset = 0;
                    for &xv in xs {
                        let (r, c) = (self.value(xv).shape()[0], self.value(xv).shape()[1]);
                        if self.needs(xv) {
                            Self::accum(grads, xv, r * c, |d| {
                                for row in 0..r {
                                    for j in 0..c {
                                        d[row * c + j] += g[row * out_cols + col_offset + j];
                                    }
                                }
                            });
                        }
                        col_offset += c;
                    }
                }
            }

            Op::Reshape { x } => {
                if self.needs(*x) {
                    Self::accum(grads, *x, g.len(), |d| {
                        for (dv, gv) in d.iter_mut().zip(g.iter()) {
                            *dv += gv;
                        }
                    });
                }
            }

            Op::SumAll { x } => {
                if self.needs(*x) {
                    let numel = self.value(*x).numel();
                    Self::accum(grads, *x, numel, |d| {
                        for dv in d.iter_mut() {
                            *dv += g[0];
                        }
                    });
                }
            }

            Op::MonarchLinear { left, right, x, blocks } => {
                let b = *blocks;
                let (rows, n) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let q = n / b;
                let ld = self.value(*left).data();
                let rd = self.value(*right).data();
                let xd = self.value(*x).data();
                let mut dl = vec![0.0; b * q * q];
                let mut dr = vec![0.0; b * q * q];
                let mut dx = vec![0.0; rows * n];
                let mut z = vec![0.0; n];
                let mut w = vec![0.0; n];
                let mut dw = vec![0.0; n];
                let mut dz = vec![0.0; n];
                for row in 0..rows {
                    let xr = &xd[row * n..(row + 1) * n];
                    let gr = &g[row * n..(row + 1) * n];
                    // Recompute the intermediates for this row.
                    for bi in 0..b {
                        for s in 0..q {
                            let mut acc = 0.0;
                            for t in 0..q {
                                acc += rd[(bi * q + s) * q + t] * xr[bi * q + t];
                            }
                            z[bi * q + s] = acc;
                        }
                    }
                    for bi in 0..b {
                        for j in 0..q {
                            w[j * b + bi] = z[bi * q + j];
                        }
                    }
                    // dL and dw.
                    for u in 0..b {
                        for t in 0..q {
                            let mut acc = 0.0;
                            for s in 0..q {
                                acc += ld[(u * q + s) * q + t] * gr[u * q + s];
                            }
                            dw[u * q + t] = acc;
                        }
                        for s in 0..q {
                            for t in 0..q {
                                dl[(u * q + s) * q + t] += gr[u * q + s] * w[u * q + t];
                            }
                        }
                    }
                    // Undo the permutation.
                    for bi in 0..b {
                        for j in 0..q {
                            dz[bi * q + j] = dw[j * b + bi];
                        }
                    }
                    // dR and dx.
                    for bi in 0..b {
                        for s in 0..q {
                            for t in 0..q {
                                dr[(bi * q + s) * q + t] += dz[bi * q + s] * xr[bi * q + t];
                            }
                        }
                        for t in 0..q {
                            let mut acc = 0.0;
                            for s in 0..q {
                                acc += rd[(bi * q + s) * q + t] * dz[bi * q + s];
                            }
                            dx[row * n + bi * q + t] = acc;
                        }
                    }
                }
                if self.needs(*left) {
                    Self::accum(grads, *left, b * q * q, |d| {
                        for (dv, nv) in d.iter_mut().zip(dl.iter()) {
                            *dv += nv;
                        }
                    });
                }
                if self.needs(*right) {
                    Self::accum(grads, *right, b * q * q, |d| {
                        for (dv, nv) in d.iter_mut().zip(dr.iter()) {
                            *dv += nv;
                        }
                    });
                }
                if self.needs(*x) {
                    Self::accum(grads, *x, rows * n, |d| {
                        for (dv, nv) in d.iter_mut().zip(dx.iter()) {
                            *dv += nv;
                        }
                    });
                }
            }

            Op::CrossEntropy { logits, targets } => {
                if self.needs(*logits) {
                    let (n, k) = (self.value(*logits).shape()[0], self.value(*logits).shape()[1]);
                    let xd = self.value(*logits).data();
                    let nf = n as f64;
                    Self::accum(grads, *logits, n * k, |d| {
                        for (row, &t) in targets.iter().enumerate() {
                            let xs = &xd[row * k..(row + 1) * k];
                            let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                            let z: f64 = xs.iter().map(|&v| (v - m).exp()).sum();
                            for j in 0..k {
                                let p = (xs[j] - m).exp() / z;
                                let ind = if j == t { 1.0 } else { 0.0 };
                                d[row * k + j] += g[0] * (p - ind) / nf;
                            }
                        }
                    });
                }
            }

            Op::BinaryCrossEntropy { logits, targets } => {
                if self.needs(*logits) {
                    let xd = self.value(*logits).data();
                    let count = xd.len() as f64;
                    Self::accum(grads, *logits, xd.len(), |d| {
                        for k in 0..xd.len() {
                            d[k] += g[0] * (sigmoid_scalar(xd[k]) - targets[k]) / count;
                        }
                    });
                }
            }
        }
    }
}

/// Name-keyed registration of parameter tensors into a graph.
///
/// A model binds each of its parameters once per forward pass; after
/// `backward` the accumulated gradients are read back by the same names. The
/// map is ordered so iteration is deterministic.
pub struct Binder {
    ids: BTreeMap<String, ValueId>,
    trainable: bool,
}

impl Binder {
    /// `trainable = false` builds inference-only graphs (no gradient buffers).
    pub fn new(trainable: bool) -> Self {
        Binder { ids: BTreeMap::new(), trainable }
    }

    pub fn bind(&mut self, g: &mut GradGraph, name: &str, t: &Tensor) -> Result<ValueId> {
        if let Some(&id) = self.ids.get(name) {
            return Ok(id);
        }
        let id = g.leaf(t.clone(), self.trainable)?;
        self.ids.insert(name.to_string(), id);
        Ok(id)
    }

    /// Graph id a parameter was bound under, if any.
    pub fn lookup(&self, name: &str) -> Option<ValueId> {
        self.ids.get(name).copied()
    }

    /// Gradients of all bound parameters, keyed by name.
    pub fn grads<'g>(&self, g: &'g GradGraph) -> BTreeMap<String, &'g [f64]> {
        self.ids
            .iter()
            .filter_map(|(name, &id)| g.grad(id).map(|gr| (name.clone(), gr)))
            .collect()
    }

    pub fn bound_names(&self) -> impl Iterator<Item = &str> {
        self.ids.keys().map(|s| s.as_str())
    }
}
