//! Dense-tensor reverse-mode automatic differentiation.
//!
//! A [`Graph`] is a Wengert list built eagerly: every operation computes its
//! value at call time and records enough context to play the chain rule
//! backwards. [`Var`] is a cheap handle into the graph.
//!
//! Semantics:
//! - values are `f64`; shapes are explicit and checked at every op;
//! - `backward` walks from a scalar and **accumulates** into each reachable
//!   `requires_grad` tensor's gradient; calling it twice doubles gradients;
//! - a graph is single-writer: `&mut` receivers make concurrent backward
//!   passes over one graph unrepresentable.
//!
//! ```
//! use ukd::tensor::Graph;
//! let mut g = Graph::new();
//! let x = g.input(&[2], vec![3.0, -1.0], true);
//! let y = g.mul(x, x).unwrap();          // x^2 elementwise
//! let s = g.sum_all(y);                  // scalar
//! g.backward(s).unwrap();
//! assert_eq!(g.grad(x).unwrap(), &[6.0, -2.0]);
//! ```

mod gradcheck;
mod matops;
pub mod vmath;

pub use gradcheck::{check_gradients, primitive_suite, GradCheckReport, OpCheck};

use crate::error::{Result, UkdError};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    pub(crate) id: usize,
}

/// Operation record. Fields are parent ids plus whatever the backward pass
/// needs that is cheaper to store than to recompute.
#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddBias { x: usize, b: usize },
    MulBias { x: usize, b: usize },
    Exp(usize),
    Log(usize),
    ClampMin { x: usize, min: f64 },
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Gelu(usize),
    Dropout { x: usize, mask: Vec<f64> },
    Softmax { x: usize, axis: usize, temp: f64 },
    LogSoftmax { x: usize, axis: usize, temp: f64 },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    L2NormalizeRows { x: usize, eps: f64 },
    SumAll(usize),
    MeanAll(usize),
    SmoothL1 { a: usize, b: usize, beta: f64 },
    CrossEntropyRows { p: usize, log_q: usize },
    GatherCols { x: usize, idx: Vec<usize> },
    // Structural and matrix ops live in matops.rs.
    Matmul { a: usize, b: usize, m: usize, k: usize, n: usize },
    MatmulNT { a: usize, b: usize, m: usize, k: usize, n: usize },
    Bmm { a: usize, b: usize, bt: usize, m: usize, k: usize, n: usize },
    BmmNT { a: usize, b: usize, bt: usize, m: usize, k: usize, n: usize },
    Reshape(usize),
    ConcatRows { parts: Vec<usize>, rows: Vec<usize> },
    SelectRows { x: usize, idx: Vec<usize> },
    MaskRows { x: usize, token: usize, mask: Vec<bool> },
    ScaleRows { x: usize, scales: Vec<f64> },
    SplitHeads { x: usize, b: usize, t: usize, h: usize, dh: usize },
    MergeHeads { x: usize, b: usize, t: usize, h: usize, dh: usize },
    BilinearGrid { x: usize, src: usize, dst: usize, d: usize },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) values: Vec<f64>,
    pub(crate) shape: Vec<usize>,
    pub(crate) grad: Option<Vec<f64>>,
    pub(crate) requires_grad: bool,
    pub(crate) op: Op,
}

/// Eagerly evaluated computation tape.
#[derive(Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    /// Number of nodes recorded so far.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(
        &mut self,
        values: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Op,
    ) -> Var {
        debug_assert_eq!(values.len(), numel(&shape));
        self.nodes.push(Node { values, shape, grad: None, requires_grad, op });
        Var { id: self.nodes.len() - 1 }
    }

    /// New leaf tensor. `requires_grad` marks it as a gradient target.
    pub fn input(&mut self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Var {
        assert_eq!(
            values.len(),
            numel(shape),
            "input values length {} does not match shape {:?}",
            values.len(),
            shape
        );
        self.push(values, shape.to_vec(), requires_grad, Op::Leaf)
    }

    /// Leaf constant: never receives gradient.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Var {
        self.input(shape, values, false)
    }

    /// Scalar constant with shape `[]`.
    pub fn scalar(&mut self, value: f64) -> Var {
        self.push(vec![value], vec![], false, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.id].shape
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.id].values
    }

    /// Scalar value of a single-element tensor.
    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.id].values.len(), 1);
        self.nodes[v.id].values[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// Accumulated gradient, if a backward pass has reached this tensor.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.id].grad.as_deref()
    }

    /// Clear all accumulated gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rg2(&self, a: Var, b: Var) -> bool {
        self.nodes[a.id].requires_grad || self.nodes[b.id].requires_grad
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(UkdError::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    // ── Elementwise ──────────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(values, shape, self.rg2(a, b), Op::Add(a.id, b.id)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(values, shape, self.rg2(a, b), Op::Sub(a.id, b.id)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let values: Vec<f64> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(values, shape, self.rg2(a, b), Op::Mul(a.id, b.id)))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        let values: Vec<f64> = self.values(x).iter().map(|v| -v).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(values, shape, rg, Op::Neg(x.id))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let values: Vec<f64> = self.values(x).iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(values, shape, rg, Op::Scale(x.id, c))
    }

    /// Broadcast-add a `[D]` bias over the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| {
            UkdError::Dimension("add_bias: x must have at least one axis".into())
        })?;
        if self.shape(b) != [d] {
            return Err(UkdError::Dimension(format!(
                "add_bias: bias {:?} does not match last axis {d}",
                self.shape(b)
            )));
        }
        let bv = self.values(b).to_vec();
        let values: Vec<f64> = self
            .values(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv[i % d])
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(values, shape, self.rg2(x, b), Op::AddBias { x: x.id, b: b.id }))
    }

    /// Broadcast-multiply a `[D]` vector over the last axis of `x`
    /// (layer scale, per-channel gating).
    pub fn mul_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| {
            UkdError::Dimension("mul_bias: x must have at least one axis".into())
        })?;
        if self.shape(b) != [d] {
            return Err(UkdError::Dimension(format!(
                "mul_bias: vector {:?} does not match last axis {d}",
                self.shape(b)
            )));
        }
        let bv = self.values(b).to_vec();
        let values: Vec<f64> = self
            .values(x)
            .iter()
            .enumerate()
            .map(|(i, v)| v * bv[i % d])
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(values, shape, self.rg2(x, b), Op::MulBias { x: x.id, b: b.id }))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let values: Vec<f64> = self.values(x).iter().map(|v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(values, shape, rg, Op::Exp(x.id))
    }

    /// Natural log. Caller is responsible for positive inputs; combine with
    /// [`Graph::clamp_min`] where values can reach zero.
    pub fn log(&mut self, x: Var) -> Var {
        let values: Vec<f64> = self.values(x).iter().map(|v| v.ln()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(values, shape, rg, Op::Log(x.id))
    }

    /// `max(x, min)` elementwise; gradient is zero where the clamp is active.
    pub fn clamp_min(&mut self, x: Var, min: f64) -> Var {
        let values: Vec<f64> = self.values(x).iter().map(|v| v.max(min)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(values, shape, rg, Op::ClampMin { x: x.id, min })
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let values: Vec<f64> = self.values(x).iter().map(|v| v.tanh()).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(values, shape, rg, Op::Tanh(x.id))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let values: Vec<f64> = self.values(x).iter().map(|v| sigmoid(*v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(values, shape, rg, Op::Sigmoid(x.id))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let values: Vec<f64> = self.values(x).iter().map(|v| v.max(0.0)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(values, shape, rg, Op::Relu(x.id))
    }

    /// GELU, tanh approximation:
    /// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
    pub fn gelu(&mut self, x: Var) -> Var {
        let values: Vec<f64> = self.values(x).iter().map(|v| gelu(*v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        self.push(values, shape, rg, Op::Gelu(x.id))
    }

    /// Inverted dropout with keep-probability `1 - p`; the mask is sampled
    /// here from `rng` so replays are a function of the generator state.
    /// `p = 0` is the identity (still recorded, mask of ones).
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut crate::rng::Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(UkdError::Parameter(format!("dropout p must be in [0,1), got {p}")));
        }
        let scale = 1.0 / (1.0 - p);
        let mask: Vec<f64> = self
            .values(x)
            .iter()
            .map(|_| if rng.uniform() < p { 0.0 } else { scale })
            .collect();
        let values: Vec<f64> = self.values(x).iter().zip(&mask).map(|(v, m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(values, shape, rg, Op::Dropout { x: x.id, mask }))
    }

    // ── Normalizations ───────────────────────────────────────────────────

    /// Softmax along `axis` with temperature `temp > 0`:
    /// `softmax(x / temp)`. Output lanes sum to 1.
    pub fn softmax(&mut self, x: Var, axis: usize, temp: f64) -> Result<Var> {
        self.softmax_impl(x, axis, temp, false)
    }

    /// Log-softmax along `axis` with temperature `temp > 0`.
    pub fn log_softmax(&mut self, x: Var, axis: usize, temp: f64) -> Result<Var> {
        self.softmax_impl(x, axis, temp, true)
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, temp: f64, log: bool) -> Result<Var> {
        if temp <= 0.0 || !temp.is_finite() {
            return Err(UkdError::Parameter(format!("softmax temperature must be positive, got {temp}")));
        }
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(UkdError::Dimension(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let (outer, lanes, inner) = axis_strides(&shape, axis);
        let xs = self.values(x);
        let mut values = vec![0.0; xs.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * lanes + k) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for k in 0..lanes {
                    max = max.max(xs[at(k)] / temp);
                }
                let mut sum = 0.0;
                for k in 0..lanes {
                    sum += (xs[at(k)] / temp - max).exp();
                }
                if log {
                    let lse = max + sum.ln();
                    for k in 0..lanes {
                        values[at(k)] = xs[at(k)] / temp - lse;
                    }
                } else {
                    for k in 0..lanes {
                        values[at(k)] = (xs[at(k)] / temp - max).exp() / sum;
                    }
                }
            }
        }
        let rg = self.requires_grad(x);
        let op = if log {
            Op::LogSoftmax { x: x.id, axis, temp }
        } else {
            Op::Softmax { x: x.id, axis, temp }
        };
        Ok(self.push(values, shape, rg, op))
    }

    /// Layer normalization over the last axis with learnable `gamma`, `beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| {
            UkdError::Dimension("layernorm: x must have at least one axis".into())
        })?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(UkdError::Dimension(format!(
                "layernorm: gamma {:?} / beta {:?} must be [{d}]",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        if eps <= 0.0 {
            return Err(UkdError::Parameter(format!("layernorm eps must be positive, got {eps}")));
        }
        let xs = self.values(x);
        let gv = self.values(gamma).to_vec();
        let bv = self.values(beta).to_vec();
        let rows = xs.len() / d;
        let mut values = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                values[r * d + j] = gv[j] * (row[j] - mean) * rstd + bv[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x)
            || self.requires_grad(gamma)
            || self.requires_grad(beta);
        Ok(self.push(
            values,
            shape,
            rg,
            Op::LayerNorm { x: x.id, gamma: gamma.id, beta: beta.id, eps },
        ))
    }

    /// Normalize each row (last axis) to unit L2 norm. Norms are floored at
    /// `eps` so zero rows map to zero instead of NaN.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let d = *self.shape(x).last().ok_or_else(|| {
            UkdError::Dimension("l2_normalize_rows: x must have at least one axis".into())
        })?;
        let xs = self.values(x);
        let rows = xs.len() / d;
        let mut values = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(eps);
            for j in 0..d {
                values[r * d + j] = row[j] / norm;
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.requires_grad(x);
        Ok(self.push(values, shape, rg, Op::L2NormalizeRows { x: x.id, eps }))
    }

    // ── Reductions and losses ────────────────────────────────────────────

    /// Sum of all elements; scalar with shape `[]`.
    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.values(x).iter().sum();
        let rg = self.requires_grad(x);
        self.push(vec![s], vec![], rg, Op::SumAll(x.id))
    }

    /// Mean of all elements; scalar with shape `[]`.
    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.values(x).len();
        let s = self.values(x).iter().sum::<f64>() / n as f64;
        let rg = self.requires_grad(x);
        self.push(vec![s], vec![], rg, Op::MeanAll(x.id))
    }

    /// Smooth-L1 (Huber) loss with threshold `beta`, mean reduction:
    /// per element `0.5 d^2 / beta` if `|d| < beta`, else `|d| - 0.5 beta`.
    /// Identical inputs give exactly 0.
    pub fn smooth_l1(&mut self, a: Var, b: Var, beta: f64) -> Result<Var> {
        self.same_shape(a, b, "smooth_l1")?;
        if beta <= 0.0 {
            return Err(UkdError::Parameter(format!("smooth_l1 beta must be positive, got {beta}")));
        }
        let n = self.values(a).len();
        let mut total = 0.0;
        for (x, y) in self.values(a).iter().zip(self.values(b)) {
            let d = x - y;
            total += if d.abs() < beta { 0.5 * d * d / beta } else { d.abs() - 0.5 * beta };
        }
        let rg = self.rg2(a, b);
        Ok(self.push(vec![total / n as f64], vec![], rg, Op::SmoothL1 { a: a.id, b: b.id, beta }))
    }

    /// Cross-entropy between a target distribution `p` and student
    /// log-probabilities `log_q`, treating the last axis as the distribution
    /// and averaging over leading axes: `mean_rows(-sum_k p * log_q)`.
    ///
    /// `p` rows must sum to 1 within 1e-6. Gradient flows only into the
    /// `log_q` side; `p` is treated as detached even if it requires grad.
    pub fn cross_entropy(&mut self, p: Var, log_q: Var) -> Result<Var> {
        self.same_shape(p, log_q, "cross_entropy")?;
        let d = *self.shape(p).last().ok_or_else(|| {
            UkdError::Dimension("cross_entropy: inputs must have at least one axis".into())
        })?;
        let pv = self.values(p);
        let qv = self.values(log_q);
        let rows = pv.len() / d;
        let mut total = 0.0;
        for r in 0..rows {
            let prow = &pv[r * d..(r + 1) * d];
            let sum: f64 = prow.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(UkdError::Contract(format!(
                    "cross_entropy: target row {r} sums to {sum}, not 1"
                )));
            }
            for j in 0..d {
                total -= prow[j] * qv[r * d + j];
            }
        }
        // Gradient reaches log_q only; p never receives gradient here.
        let rg = self.requires_grad(log_q);
        Ok(self.push(
            vec![total / rows as f64],
            vec![],
            rg,
            Op::CrossEntropyRows { p: p.id, log_q: log_q.id },
        ))
    }

    /// `out[i] = x[i, idx[i]]` for a 2D `x`. Used to pick per-row label
    /// log-probabilities.
    pub fn gather_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 {
            return Err(UkdError::Dimension(format!("gather_cols: x must be 2D, got {shape:?}")));
        }
        let (n, k) = (shape[0], shape[1]);
        if idx.len() != n {
            return Err(UkdError::Dimension(format!(
                "gather_cols: {} indices for {n} rows",
                idx.len()
            )));
        }
        if let Some(bad) = idx.iter().find(|&&j| j >= k) {
            return Err(UkdError::Parameter(format!("gather_cols: index {bad} out of range {k}")));
        }
        let xs = self.values(x);
        let values: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| xs[i * k + j]).collect();
        let rg = self.requires_grad(x);
        Ok(self.push(values, vec![n], rg, Op::GatherCols { x: x.id, idx: idx.to_vec() }))
    }

    // ── Backward ─────────────────────────────────────────────────────────

    /// Reverse pass from a scalar `loss`. Contributions accumulate into the
    /// persistent gradients of every reachable `requires_grad` tensor.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.id].values.len() != 1 {
            return Err(UkdError::Dimension(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.id].requires_grad {
            // Nothing differentiable upstream; a no-op by definition.
            return Ok(());
        }
        // Per-call local adjoints; merged into persistent grads at the end so
        // repeated backward calls accumulate rather than compound.
        let mut local: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        local[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let g = match local[id].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(id, &g, &mut local);
            let node = &mut self.nodes[id];
            if node.requires_grad {
                match &mut node.grad {
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&g) {
                            *a += b;
                        }
                    }
                    None => node.grad = Some(g),
                }
            }
        }
        Ok(())
    }

    fn bump(&self, local: &mut [Option<Vec<f64>>], parent: usize) -> bool {
        // Only allocate adjoints for subgraphs that can reach a grad target.
        if !self.nodes[parent].requires_grad {
            return false;
        }
        if local[parent].is_none() {
            local[parent] = Some(vec![0.0; self.nodes[parent].values.len()]);
        }
        true
    }

    /// Push the adjoint `g` of node `id` into its parents' local adjoints.
    fn propagate(&self, id: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) {
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.bump(local, a) {
                    axpy(local[a].as_mut().unwrap(), g, 1.0);
                }
                if self.bump(local, b) {
                    axpy(local[b].as_mut().unwrap(), g, 1.0);
                }
            }
            Op::Sub(a, b) => {
                if self.bump(local, a) {
                    axpy(local[a].as_mut().unwrap(), g, 1.0);
                }
                if self.bump(local, b) {
                    axpy(local[b].as_mut().unwrap(), g, -1.0);
                }
            }
            Op::Mul(a, b) => {
                if self.bump(local, a) {
                    let bv = &self.nodes[b].values;
                    let dst = local[a].as_mut().unwrap();
                    for i in 0..g.len() {
                        dst[i] += g[i] * bv[i];
                    }
                }
                if self.bump(local, b) {
                    let av = &self.nodes[a].values;
                    let dst = local[b].as_mut().unwrap();
                    for i in 0..g.len() {
                        dst[i] += g[i] * av[i];
                    }
                }
            }
            Op::Neg(x) => {
                if self.bump(local, x) {
                    axpy(local[x].as_mut().unwrap(), g, -1.0);
                }
            }
            Op::Scale(x, c) => {
                if self.bump(local, x) {
                    axpy(local[x].as_mut().unwrap(), g, c);
                }
            }
            Op::AddBias { x, b } => {
                if self.bump(local, x) {
                    axpy(local[x].as_mut().unwrap(), g, 1.0);
                }
                if self.bump(local, b) {
                    let d = self.nodes[b].values.len();
                    let dst = local[b].as_mut().unwrap();
                    for (i, gi) in g.iter().enumerate() {
                        dst[i % d] += gi;
                    }
                }
            }
            Op::MulBias { x, b } => {
                let d = self.nodes[b].values.len();
                if self.bump(local, x) {
                    let bv = &self.nodes[b].values;
                    let dst = local[x].as_mut().unwrap();
                    for (i, gi) in g.iter().enumerate() {
                        dst[i] += gi * bv[i % d];
                    }
                }
                if self.bump(local, b) {
                    let xv = &self.nodes[x].values;
                    let dst = local[b].as_mut().unwrap();
                    for (i, gi) in g.iter().enumerate() {
                        dst[i % d] += gi * xv[i];
                    }
                }
            }
            Op::Exp(x) => {
                if self.bump(local, x) {
                    let y = &self.nodes[id].values;
                    let dst = local[x].as_mut().unwrap();
                    for i in 0..g.len() {
                        dst[i] += g[i] * y[i];
                    }
                }
            }
            Op::Log(x) => {
                if self.bump(local, x) {
                    let xv = &self.nodes[x].values;
                    let dst = local[x].as_mut().unwrap();
                    for i in 0..g.len() {
                        dst[i] += g[i] / xv[i];
                    }
                }
            }
            Op::ClampMin { x, min } => {
                if self.bump(local, x) {
                    let xv = &self.nodes[x].values;
                    let dst = local[x].as_mut().unwrap();
                    for i in 0..g.len() {
                        if xv[i] > min {
                            dst[i] += g[i];
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if self.bump(local, x) {
                    let y = &self.nodes[id].values;
                    let dst = local[x].as_mut().unwrap();
                    for i in 0..g.len() {
                        dst[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.bump(local, x) {
                    let y = &self.nodes[id].values;
                    let dst = local[x].as_mut().unwrap();
                    for i in 0..g.len() {
                        dst[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }
            }
            Op::Relu(x) => {
                if self.bump(local, x) {
                    let xv = &self.nodes[x].values;
                    let dst = local[x].as_mut().unwrap();
                    for i in 0..g.len() {
                        if xv[i] > 0.0 {
                            dst[i] += g[i];
                        }
                    }
                }
            }
            Op::Gelu(x) => {
                if self.bump(local, x) {
                    let xv = &self.nodes[x].values;
                    let dst = local[x].as_mut().unwrap();
                    for i in 0..g.len() {
                        dst[i] += g[i] * gelu_grad(xv[i]);
                    }
                }
            }
            Op::Dropout { x, ref mask } => {
                if self.bump(local, x) {
                    let dst = local[x].as_mut().unwrap();
                    for i in 0..g.len() {
                        dst[i] += g[i] * mask[i];
                    }
                }
            }
            Op::Softmax { x, axis, temp } => {
                if self.bump(local, x) {
                    let y = &self.nodes[id].values;
                    let (outer, lanes, inner) = axis_strides(&self.nodes[id].shape, axis);
                    let dst = local[x].as_mut().unwrap();
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * lanes + k) * inner + i;
                            let mut dot = 0.0;
                            for k in 0..lanes {
                                dot += g[at(k)] * y[at(k)];
                            }
                            for k in 0..lanes {
                                dst[at(k)] += y[at(k)] * (g[at(k)] - dot) / temp;
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax { x, axis, temp } => {
                if self.bump(local, x) {
                    let y = &self.nodes[id].values;
                    let (outer, lanes, inner) = axis_strides(&self.nodes[id].shape, axis);
                    let dst = local[x].as_mut().unwrap();
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * lanes + k) * inner + i;
                            let mut gsum = 0.0;
                            for k in 0..lanes {
                                gsum += g[at(k)];
                            }
                            for k in 0..lanes {
                                dst[at(k)] += (g[at(k)] - y[at(k)].exp() * gsum) / temp;
                            }
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let d = *self.nodes[id].shape.last().unwrap();
                let rows = self.nodes[id].values.len() / d;
                let xs = &self.nodes[x].values;
                let gv = &self.nodes[gamma].values;
                for r in 0..rows {
                    let row = &xs[r * d..(r + 1) * d];
                    let mean = row.iter().sum::<f64>() / d as f64;
                    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let rstd = 1.0 / (var + eps).sqrt();
                    let gr = &g[r * d..(r + 1) * d];
                    if self.nodes[x].requires_grad {
                        // dx = rstd * (gg - mean(gg) - xhat * mean(gg * xhat)),
                        // gg = g * gamma, xhat = (x - mean) * rstd.
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let xhat = (row[j] - mean) * rstd;
                            let gg = gr[j] * gv[j];
                            m1 += gg;
                            m2 += gg * xhat;
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        self.bump(local, x);
                        let dst = local[x].as_mut().unwrap();
                        for j in 0..d {
                            let xhat = (row[j] - mean) * rstd;
                            dst[r * d + j] += rstd * (gr[j] * gv[j] - m1 - xhat * m2);
                        }
                    }
                    if self.nodes[gamma].requires_grad {
                        self.bump(local, gamma);
                        let dst = local[gamma].as_mut().unwrap();
                        for j in 0..d {
                            let xhat = (row[j] - mean) * rstd;
                            dst[j] += gr[j] * xhat;
                        }
                    }
                    if self.nodes[beta].requires_grad {
                        self.bump(local, beta);
                        let dst = local[beta].as_mut().unwrap();
                        for j in 0..d {
                            dst[j] += gr[j];
                        }
                    }
                }
            }
            Op::L2NormalizeRows { x, eps } => {
                if self.bump(local, x) {
                    let d = *self.nodes[id].shape.last().unwrap();
                    let rows = self.nodes[id].values.len() / d;
                    let xs = &self.nodes[x].values;
                    let y = &self.nodes[id].values;
                    let dst = local[x].as_mut().unwrap();
                    for r in 0..rows {
                        let row = &xs[r * d..(r + 1) * d];
                        let raw = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let norm = raw.max(eps);
                        if raw <= eps {
                            // Clamped region: y = x / eps is linear.
                            for j in 0..d {
                                dst[r * d + j] += g[r * d + j] / norm;
                            }
                        } else {
                            let yr = &y[r * d..(r + 1) * d];
                            let gr = &g[r * d..(r + 1) * d];
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..d {
                                dst[r * d + j] += (gr[j] - yr[j] * dot) / norm;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if self.bump(local, x) {
                    let dst = local[x].as_mut().unwrap();
                    for v in dst.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            Op::MeanAll(x) => {
                if self.bump(local, x) {
                    let dst = local[x].as_mut().unwrap();
                    let n = dst.len() as f64;
                    for v in dst.iter_mut() {
                        *v += g[0] / n;
                    }
                }
            }
            Op::SmoothL1 { a, b, beta } => {
                let n = self.nodes[a].values.len() as f64;
                let av = &self.nodes[a].values;
                let bv = &self.nodes[b].values;
                let push = |dst: &mut Vec<f64>, sign: f64| {
                    for i in 0..av.len() {
                        let d = av[i] - bv[i];
                        let slope = if d.abs() < beta { d / beta } else { d.signum() };
                        dst[i] += sign * g[0] * slope / n;
                    }
                };
                if self.bump(local, a) {
                    push(local[a].as_mut().unwrap(), 1.0);
                }
                if self.bump(local, b) {
                    push(local[b].as_mut().unwrap(), -1.0);
                }
            }
            Op::CrossEntropyRows { p, log_q } => {
                // By contract the target side stays detached.
                if self.bump(local, log_q) {
                    let d = *self.nodes[p].shape.last().unwrap();
                    let rows = self.nodes[p].values.len() / d;
                    let pv = &self.nodes[p].values;
                    let dst = local[log_q].as_mut().unwrap();
                    let scale = g[0] / rows as f64;
                    for i in 0..pv.len() {
                        dst[i] -= scale * pv[i];
                    }
                }
            }
            Op::GatherCols { x, ref idx } => {
                if self.bump(local, x) {
                    let k = self.nodes[x].shape[1];
                    let dst = local[x].as_mut().unwrap();
                    for (i, &j) in idx.iter().enumerate() {
                        dst[i * k + j] += g[i];
                    }
                }
            }
            // Matrix and structural ops: implemented alongside their forward
            // definitions in matops.rs.
            ref other => self.propagate_matop(id, other, g, local),
        }
    }
}

/// Decompose `shape` around `axis` into (outer, lane length, inner stride).
fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let lanes = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, lanes, inner)
}

pub(crate) fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
