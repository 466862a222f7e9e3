//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A `Tape` records every operation of a forward pass in insertion order
//! (define-by-run). `backward` replays the records in reverse and
//! accumulates gradients additively, so a tensor feeding several
//! consumers receives the sum of the per-consumer gradients. Tapes are
//! rebuilt per example; there is no graph caching.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: empty input rejected")]
    EmptyInput { op: &'static str },
    #[error("backward: loss node must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("finite_diff_check: non-finite evaluation at coordinate {coord}")]
    NonFiniteEval { coord: usize },
    #[error("{op}: index {index} out of bounds for {len}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        len: usize,
    },
}

/// Dense row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Tensor { shape, data }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn scalar(x: f64) -> Self {
        Tensor::new(vec![1], vec![x])
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor::new(shape, vec![0.0; n])
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }
}

/// Handle into a `Tape`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(pub usize);

enum Op {
    Leaf,
    MatVec(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// a * x + b, elementwise with constants.
    Affine(NodeId, f64),
    /// vector * scalar node, broadcast.
    ScalarMul(NodeId, NodeId),
    /// scalar / scalar.
    ScalarDiv(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Ln(NodeId),
    Dot(NodeId, NodeId),
    Sum(NodeId),
    Concat(NodeId, NodeId),
    Softmax(NodeId),
    /// Row `i` of a rank-2 node (embedding lookup).
    Row(NodeId, usize),
    /// Element `i` of a vector node, as a scalar.
    Pick(NodeId, usize),
    /// Scalars stacked into a vector.
    Stack(Vec<NodeId>),
    /// sum_i weights[i] * items[i] (items are same-shape vectors).
    WeightedSum(NodeId, Vec<NodeId>),
}

struct Node {
    value: Tensor,
    grad: Vec<f64>,
    op: Op,
}

/// Append-only operation record for one forward/backward pass.
/// Confined to a single thread for the duration of the pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        let grad = vec![0.0; value.numel()];
        self.nodes.push(Node { value, grad, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> NodeId {
        self.leaf(Tensor::zeros(shape))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].grad
    }

    pub fn matvec(&mut self, m: NodeId, v: NodeId) -> Result<NodeId, TensorError> {
        let (mt, vt) = (self.value(m), self.value(v));
        if mt.shape.len() != 2 || vt.shape.len() != 1 || mt.cols() != vt.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                lhs: mt.shape.clone(),
                rhs: vt.shape.clone(),
            });
        }
        let (rows, cols) = (mt.rows(), mt.cols());
        let mut out = vec![0.0; rows];
        for i in 0..rows {
            let row = &mt.data[i * cols..(i + 1) * cols];
            out[i] = row.iter().zip(&vt.data).map(|(a, b)| a * b).sum();
        }
        Ok(self.push(Tensor::vector(out), Op::MatVec(m, v)))
    }

    fn binary_same_shape(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
    ) -> Result<(), TensorError> {
        if self.value(a).shape != self.value(b).shape {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push(Tensor::new(shape, data), Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x - y)
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push(Tensor::new(shape, data), Op::Sub(a, b)))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.value(a).shape.clone();
        Ok(self.push(Tensor::new(shape, data), Op::Mul(a, b)))
    }

    /// a * x + b elementwise, with scalar constants.
    pub fn affine(&mut self, x: NodeId, a: f64, b: f64) -> NodeId {
        let data = self.value(x).data.iter().map(|v| a * v + b).collect();
        let shape = self.value(x).shape.clone();
        self.push(Tensor::new(shape, data), Op::Affine(x, a))
    }

    pub fn scale(&mut self, x: NodeId, a: f64) -> NodeId {
        self.affine(x, a, 0.0)
    }

    /// Vector times a scalar node.
    pub fn scalar_mul(&mut self, v: NodeId, s: NodeId) -> Result<NodeId, TensorError> {
        if !self.value(s).is_scalar() {
            return Err(TensorError::ShapeMismatch {
                op: "scalar_mul",
                lhs: self.value(v).shape.clone(),
                rhs: self.value(s).shape.clone(),
            });
        }
        let c = self.value(s).data[0];
        let data = self.value(v).data.iter().map(|x| x * c).collect();
        let shape = self.value(v).shape.clone();
        Ok(self.push(Tensor::new(shape, data), Op::ScalarMul(v, s)))
    }

    pub fn scalar_div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        if !self.value(a).is_scalar() || !self.value(b).is_scalar() {
            return Err(TensorError::ShapeMismatch {
                op: "scalar_div",
                lhs: self.value(a).shape.clone(),
                rhs: self.value(b).shape.clone(),
            });
        }
        let q = self.value(a).data[0] / self.value(b).data[0];
        Ok(self.push(Tensor::scalar(q), Op::ScalarDiv(a, b)))
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data.iter().map(|v| v.tanh()).collect();
        let shape = self.value(x).shape.clone();
        self.push(Tensor::new(shape, data), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data = self
            .value(x)
            .data
            .iter()
            .map(|v| 1.0 / (1.0 + (-v).exp()))
            .collect();
        let shape = self.value(x).shape.clone();
        self.push(Tensor::new(shape, data), Op::Sigmoid(x))
    }

    pub fn ln(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data.iter().map(|v| v.ln()).collect();
        let shape = self.value(x).shape.clone();
        self.push(Tensor::new(shape, data), Op::Ln(x))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.binary_same_shape("dot", a, b)?;
        let s = self
            .value(a)
            .data
            .iter()
            .zip(&self.value(b).data)
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::Dot(a, b)))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut data = self.value(a).data.clone();
        data.extend_from_slice(&self.value(b).data);
        let n = data.len();
        self.push(Tensor::new(vec![n], data), Op::Concat(a, b))
    }

    /// Numerically stable softmax (max subtraction). Output sums to 1.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        let xs = &self.value(x).data;
        if xs.is_empty() {
            return Err(TensorError::EmptyInput { op: "softmax" });
        }
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xs.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        let data = exps.iter().map(|e| e / z).collect();
        let shape = self.value(x).shape.clone();
        Ok(self.push(Tensor::new(shape, data), Op::Softmax(x)))
    }

    pub fn row(&mut self, m: NodeId, i: usize) -> Result<NodeId, TensorError> {
        let mt = self.value(m);
        if mt.shape.len() != 2 || i >= mt.rows() {
            return Err(TensorError::IndexOutOfBounds {
                op: "row",
                index: i,
                len: mt.shape.first().copied().unwrap_or(0),
            });
        }
        let cols = mt.cols();
        let data = mt.data[i * cols..(i + 1) * cols].to_vec();
        Ok(self.push(Tensor::vector(data), Op::Row(m, i)))
    }

    pub fn pick(&mut self, v: NodeId, i: usize) -> Result<NodeId, TensorError> {
        let vt = self.value(v);
        if i >= vt.numel() {
            return Err(TensorError::IndexOutOfBounds {
                op: "pick",
                index: i,
                len: vt.numel(),
            });
        }
        let x = vt.data[i];
        Ok(self.push(Tensor::scalar(x), Op::Pick(v, i)))
    }

    /// Stack scalar nodes into one vector node.
    pub fn stack(&mut self, scalars: &[NodeId]) -> Result<NodeId, TensorError> {
        if scalars.is_empty() {
            return Err(TensorError::EmptyInput { op: "stack" });
        }
        let data: Vec<f64> = scalars.iter().map(|&s| self.value(s).data[0]).collect();
        Ok(self.push(Tensor::vector(data), Op::Stack(scalars.to_vec())))
    }

    /// Convex/linear combination sum_i w[i] * items[i].
    pub fn weighted_sum(&mut self, weights: NodeId, items: &[NodeId]) -> Result<NodeId, TensorError> {
        if items.is_empty() {
            return Err(TensorError::EmptyInput { op: "weighted_sum" });
        }
        if self.value(weights).numel() != items.len() {
            return Err(TensorError::ShapeMismatch {
                op: "weighted_sum",
                lhs: self.value(weights).shape.clone(),
                rhs: vec![items.len()],
            });
        }
        let dim = self.value(items[0]).numel();
        let mut out = vec![0.0; dim];
        for (i, &item) in items.iter().enumerate() {
            if self.value(item).numel() != dim {
                return Err(TensorError::ShapeMismatch {
                    op: "weighted_sum",
                    lhs: vec![dim],
                    rhs: self.value(item).shape.clone(),
                });
            }
            let w = self.value(weights).data[i];
            for (o, x) in out.iter_mut().zip(&self.value(item).data) {
                *o += w * x;
            }
        }
        Ok(self.push(Tensor::vector(out), Op::WeightedSum(weights, items.to_vec())))
    }

    /// v minus gate ⊙ ((v·u)/(u·u)) u. With no gate and ‖u‖² above the
    /// guard the result is orthogonal to u. When ‖u‖² ≤ 1e-12 the
    /// projection is skipped entirely and v is returned unchanged.
    pub fn project_out(
        &mut self,
        v: NodeId,
        u: NodeId,
        gate: Option<NodeId>,
    ) -> Result<NodeId, TensorError> {
        self.binary_same_shape("project_out", v, u)?;
        let denom: f64 = self.value(u).data.iter().map(|x| x * x).sum();
        if denom <= PROJECTION_EPS {
            return Ok(v);
        }
        let num = self.dot(v, u)?;
        let den = self.dot(u, u)?;
        let coef = self.scalar_div(num, den)?;
        let mut proj = self.scalar_mul(u, coef)?;
        if let Some(g) = gate {
            proj = self.mul(g, proj)?;
        }
        self.sub(v, proj)
    }

    /// Reverse sweep from a scalar loss node. Gradients accumulate into
    /// every node reachable from `loss`; call `grad` to read them.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), TensorError> {
        if !self.value(loss).is_scalar() {
            return Err(TensorError::NonScalarLoss {
                shape: self.value(loss).shape.clone(),
            });
        }
        for n in self.nodes.iter_mut() {
            n.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for i in (0..=loss.0).rev() {
            // take the output grad; ops never reference their own node
            let g = std::mem::take(&mut self.nodes[i].grad);
            self.step_backward(i, &g);
            self.nodes[i].grad = g;
        }
        Ok(())
    }

    fn step_backward(&mut self, i: usize, g: &[f64]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatVec(m, v) => {
                let (m, v) = (*m, *v);
                let cols = self.nodes[m.0].value.cols();
                let vdata = self.nodes[v.0].value.data.clone();
                let mdata = self.nodes[m.0].value.data.clone();
                for (r, gi) in g.iter().enumerate() {
                    for c in 0..cols {
                        self.nodes[m.0].grad[r * cols + c] += gi * vdata[c];
                        self.nodes[v.0].grad[c] += gi * mdata[r * cols + c];
                    }
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                for (j, gi) in g.iter().enumerate() {
                    self.nodes[a.0].grad[j] += gi;
                    self.nodes[b.0].grad[j] += gi;
                }
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                for (j, gi) in g.iter().enumerate() {
                    self.nodes[a.0].grad[j] += gi;
                    self.nodes[b.0].grad[j] -= gi;
                }
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let (av, bv) = (
                    self.nodes[a.0].value.data.clone(),
                    self.nodes[b.0].value.data.clone(),
                );
                for (j, gi) in g.iter().enumerate() {
                    self.nodes[a.0].grad[j] += gi * bv[j];
                    self.nodes[b.0].grad[j] += gi * av[j];
                }
            }
            Op::Affine(x, a) => {
                let (x, a) = (*x, *a);
                for (j, gi) in g.iter().enumerate() {
                    self.nodes[x.0].grad[j] += a * gi;
                }
            }
            Op::ScalarMul(v, s) => {
                let (v, s) = (*v, *s);
                let c = self.nodes[s.0].value.data[0];
                let vv = self.nodes[v.0].value.data.clone();
                let mut ds = 0.0;
                for (j, gi) in g.iter().enumerate() {
                    self.nodes[v.0].grad[j] += c * gi;
                    ds += gi * vv[j];
                }
                self.nodes[s.0].grad[0] += ds;
            }
            Op::ScalarDiv(a, b) => {
                let (a, b) = (*a, *b);
                let av = self.nodes[a.0].value.data[0];
                let bv = self.nodes[b.0].value.data[0];
                self.nodes[a.0].grad[0] += g[0] / bv;
                self.nodes[b.0].grad[0] -= g[0] * av / (bv * bv);
            }
            Op::Tanh(x) => {
                let x = *x;
                let yv = self.nodes[i].value.data.clone();
                for (j, gi) in g.iter().enumerate() {
                    self.nodes[x.0].grad[j] += gi * (1.0 - yv[j] * yv[j]);
                }
            }
            Op::Sigmoid(x) => {
                let x = *x;
                let yv = self.nodes[i].value.data.clone();
                for (j, gi) in g.iter().enumerate() {
                    self.nodes[x.0].grad[j] += gi * yv[j] * (1.0 - yv[j]);
                }
            }
            Op::Ln(x) => {
                let x = *x;
                let xv = self.nodes[x.0].value.data.clone();
                for (j, gi) in g.iter().enumerate() {
                    self.nodes[x.0].grad[j] += gi / xv[j];
                }
            }
            Op::Dot(a, b) => {
                let (a, b) = (*a, *b);
                let (av, bv) = (
                    self.nodes[a.0].value.data.clone(),
                    self.nodes[b.0].value.data.clone(),
                );
                for j in 0..av.len() {
                    self.nodes[a.0].grad[j] += g[0] * bv[j];
                    self.nodes[b.0].grad[j] += g[0] * av[j];
                }
            }
            Op::Sum(x) => {
                let x = *x;
                for gj in self.nodes[x.0].grad.iter_mut() {
                    *gj += g[0];
                }
            }
            Op::Concat(a, b) => {
                let (a, b) = (*a, *b);
                let na = self.nodes[a.0].value.numel();
                for (j, gi) in g.iter().enumerate() {
                    if j < na {
                        self.nodes[a.0].grad[j] += gi;
                    } else {
                        self.nodes[b.0].grad[j - na] += gi;
                    }
                }
            }
            Op::Softmax(x) => {
                let x = *x;
                let yv = self.nodes[i].value.data.clone();
                let gy: f64 = g.iter().zip(&yv).map(|(gi, yi)| gi * yi).sum();
                for (j, gi) in g.iter().enumerate() {
                    self.nodes[x.0].grad[j] += yv[j] * (gi - gy);
                }
            }
            Op::Row(m, r) => {
                let (m, r) = (*m, *r);
                let cols = self.nodes[m.0].value.cols();
                for (j, gi) in g.iter().enumerate() {
                    self.nodes[m.0].grad[r * cols + j] += gi;
                }
            }
            Op::Pick(v, j) => {
                let (v, j) = (*v, *j);
                self.nodes[v.0].grad[j] += g[0];
            }
            Op::Stack(parts) => {
                let parts = parts.clone();
                for (j, &p) in parts.iter().enumerate() {
                    self.nodes[p.0].grad[0] += g[j];
                }
            }
            Op::WeightedSum(w, items) => {
                let w = *w;
                let items = items.clone();
                let wv = self.nodes[w.0].value.data.clone();
                for (k, &item) in items.iter().enumerate() {
                    let xv = self.nodes[item.0].value.data.clone();
                    let mut dw = 0.0;
                    for (j, gi) in g.iter().enumerate() {
                        self.nodes[item.0].grad[j] += wv[k] * gi;
                        dw += gi * xv[j];
                    }
                    self.nodes[w.0].grad[k] += dw;
                }
            }
        }
    }
}

/// Denominator guard for projections; below this the projection is a
/// no-op rather than a clamped division.
pub const PROJECTION_EPS: f64 = 1e-12;

/// Max relative error between analytic gradients and central finite
/// differences of `f` at `params`.
pub fn finite_diff_check<F>(
    f: F,
    params: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<f64, TensorError>
where
    F: Fn(&[f64]) -> f64,
{
    assert_eq!(params.len(), analytic.len());
    let mut work = params.to_vec();
    let mut max_err = 0.0f64;
    for i in 0..params.len() {
        work[i] = params[i] + step;
        let fp = f(&work);
        work[i] = params[i] - step;
        let fm = f(&work);
        work[i] = params[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TensorError::NonFiniteEval { coord: i });
        }
        let numeric = (fp - fm) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        max_err = max_err.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vec_node(t: &mut Tape, data: &[f64]) -> NodeId {
        t.leaf(Tensor::vector(data.to_vec()))
    }

    #[test]
    fn matvec_identity_and_hand_cases() {
        let mut t = Tape::new();
        let i2 = t.leaf(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let v = vec_node(&mut t, &[3.0, 4.0]);
        let out = t.matvec(i2, v).unwrap();
        assert_eq!(t.value(out).data, vec![3.0, 4.0]);

        let m = t.leaf(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let ones = vec_node(&mut t, &[1.0, 1.0]);
        let out = t.matvec(m, ones).unwrap();
        assert_eq!(t.value(out).data, vec![3.0, 7.0]);

        let z = t.leaf(Tensor::matrix(2, 2, vec![0.0; 4]));
        let out = t.matvec(z, v).unwrap();
        assert_eq!(t.value(out).data, vec![0.0, 0.0]);
    }

    #[test]
    fn matvec_dim_mismatch_reports_shapes() {
        let mut t = Tape::new();
        let m = t.leaf(Tensor::matrix(2, 3, vec![0.0; 6]));
        let v = vec_node(&mut t, &[1.0, 2.0]);
        let err = t.matvec(m, v).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let mut t = Tape::new();
        let v = vec_node(&mut t, &[0.0, 0.0]);
        let s = t.softmax(v).unwrap();
        assert_eq!(t.value(s).data, vec![0.5, 0.5]);

        let v = vec_node(&mut t, &[2.0f64.ln(), 0.0]);
        let s = t.softmax(v).unwrap();
        assert!((t.value(s).data[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((t.value(s).data[1] - 1.0 / 3.0).abs() < 1e-15);

        // shift invariance
        let v1 = vec_node(&mut t, &[0.3, -1.2, 2.5]);
        let v2 = vec_node(&mut t, &[0.3 + 7.0, -1.2 + 7.0, 2.5 + 7.0]);
        let s1 = t.softmax(v1).unwrap();
        let s2 = t.softmax(v2).unwrap();
        for (a, b) in t.value(s1).data.iter().zip(&t.value(s2).data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_empty_rejected() {
        let mut t = Tape::new();
        let v = t.leaf(Tensor::new(vec![0], vec![]));
        assert!(t.softmax(v).is_err());
    }

    #[test]
    fn softmax_simplex_for_any_finite_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let n = rng.gen_range(1..8);
            let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-700.0..700.0)).collect();
            let mut t = Tape::new();
            let v = t.leaf(Tensor::vector(data));
            let s = t.softmax(v).unwrap();
            let sum: f64 = t.value(s).data.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(t.value(s).data.iter().all(|&x| x >= 0.0 && x.is_finite()));
        }
    }

    #[test]
    fn project_out_cases() {
        let mut t = Tape::new();
        let v = vec_node(&mut t, &[1.0, 1.0]);
        let u = vec_node(&mut t, &[1.0, 0.0]);
        let out = t.project_out(v, u, None).unwrap();
        assert_eq!(t.value(out).data, vec![0.0, 1.0]);

        // already orthogonal input is unchanged
        let v = vec_node(&mut t, &[0.0, 2.0]);
        let u = vec_node(&mut t, &[3.0, 0.0]);
        let out = t.project_out(v, u, None).unwrap();
        assert_eq!(t.value(out).data, vec![0.0, 2.0]);

        // gated
        let v = vec_node(&mut t, &[1.0, 1.0]);
        let u = vec_node(&mut t, &[1.0, 0.0]);
        let gate = vec_node(&mut t, &[0.5, 0.5]);
        let out = t.project_out(v, u, Some(gate)).unwrap();
        assert_eq!(t.value(out).data, vec![0.5, 1.0]);

        // degenerate guard: zero history passes v through unchanged
        let v = vec_node(&mut t, &[1.0, 2.0]);
        let u = vec_node(&mut t, &[0.0, 0.0]);
        let out = t.project_out(v, u, None).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn project_out_orthogonality_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = rng.gen_range(2..8);
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let u: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut t = Tape::new();
            let vn = t.leaf(Tensor::vector(v));
            let un = t.leaf(Tensor::vector(u.clone()));
            let out = t.project_out(vn, un, None).unwrap();
            let ip: f64 = t
                .value(out)
                .data
                .iter()
                .zip(&u)
                .map(|(a, b)| a * b)
                .sum();
            let nr: f64 = t.value(out).data.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nu: f64 = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!(ip.abs() <= 1e-10 * nr.max(1e-30) * nu + 1e-14);
        }
    }

    #[test]
    fn backward_dot_square() {
        let mut t = Tape::new();
        let v = vec_node(&mut t, &[1.0, 2.0]);
        let loss = t.dot(v, v).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(v), &[2.0, 4.0]);
    }

    #[test]
    fn backward_constant_loss_zero_grad() {
        let mut t = Tape::new();
        let v = vec_node(&mut t, &[1.0, 2.0]);
        let c = t.leaf(Tensor::scalar(5.0));
        t.backward(c).unwrap();
        assert_eq!(t.grad(v), &[0.0, 0.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let v = vec_node(&mut t, &[1.0, 2.0]);
        assert!(matches!(
            t.backward(v),
            Err(TensorError::NonScalarLoss { .. })
        ));
    }

    #[test]
    fn fanout_gradients_accumulate() {
        // loss = sum(v) + dot(v, v): grad = 1 + 2v
        let mut t = Tape::new();
        let v = vec_node(&mut t, &[1.5, -0.5]);
        let s = t.sum(v);
        let d = t.dot(v, v).unwrap();
        let loss = t.add(s, d).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(v), &[4.0, 0.0]);
    }

    #[test]
    fn finite_diff_quadratic_and_linear() {
        let err = finite_diff_check(|p| p[0] * p[0], &[3.0], &[6.0], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
        let err = finite_diff_check(|p| 3.0 * p[0] - p[1], &[1.0, 2.0], &[3.0, -1.0], 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn finite_diff_reports_non_finite() {
        let err = finite_diff_check(|p| p[0].ln(), &[0.0], &[1.0], 1e-5);
        assert!(matches!(err, Err(TensorError::NonFiniteEval { coord: 0 })));
    }

    #[test]
    fn project_out_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let n = rng.gen_range(2..6);
            let params: Vec<f64> = (0..2 * n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let f = |p: &[f64]| {
                let mut t = Tape::new();
                let v = t.leaf(Tensor::vector(p[..n].to_vec()));
                let u = t.leaf(Tensor::vector(p[n..].to_vec()));
                let out = t.project_out(v, u, None).unwrap();
                let s = t.sum(out);
                t.value(s).data[0]
            };
            let mut t = Tape::new();
            let v = t.leaf(Tensor::vector(params[..n].to_vec()));
            let u = t.leaf(Tensor::vector(params[n..].to_vec()));
            let out = t.project_out(v, u, None).unwrap();
            let loss = t.sum(out);
            t.backward(loss).unwrap();
            let analytic: Vec<f64> = t.grad(v).iter().chain(t.grad(u)).cloned().collect();
            let err = finite_diff_check(f, &params, &analytic, 1e-5).unwrap();
            assert!(err < 1e-4, "{err}");
        }
    }

    // every differentiable op against central differences, random shapes
    #[test]
    fn all_ops_gradient_check_randomized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for seed in 0..100u64 {
            let n = rng.gen_range(2..8);
            let m = rng.gen_range(2..8);
            let nparams = m * n + 2 * n + 1;
            let params: Vec<f64> = (0..nparams).map(|_| rng.gen_range(-1.0..1.0)).collect();
            // builds a little network exercising every op
            let build = |p: &[f64]| -> (Tape, Vec<NodeId>, NodeId) {
                let mut t = Tape::new();
                let mat = t.leaf(Tensor::matrix(m, n, p[..m * n].to_vec()));
                let a = t.leaf(Tensor::vector(p[m * n..m * n + n].to_vec()));
                let b = t.leaf(Tensor::vector(p[m * n + n..m * n + 2 * n].to_vec()));
                let s = t.leaf(Tensor::scalar(p[nparams - 1]));
                let mv = t.matvec(mat, a).unwrap();
                let th = t.tanh(mv);
                let sg = t.sigmoid(th);
                let sm = t.softmax(sg).unwrap();
                let had = t.mul(a, b).unwrap();
                let su = t.add(a, b).unwrap();
                let df = t.sub(su, had).unwrap();
                let scl = t.scalar_mul(df, s).unwrap();
                let cat = t.concat(scl, sm);
                let aff = t.affine(cat, 0.7, -0.1);
                let d1 = t.dot(a, b).unwrap();
                let d2 = t.dot(b, b).unwrap();
                // keep the denominator well away from zero so central
                // differences stay accurate
                let d2p = t.affine(d2, 1.0, 4.0);
                let q = t.scalar_div(d1, d2p).unwrap();
                let pr = t.project_out(a, b, None).unwrap();
                let e1 = t.sum(aff);
                let e2 = t.sum(pr);
                let p0 = t.pick(sm, 0).unwrap();
                let lp = t.affine(p0, 1.0, 1.5);
                let ll = t.ln(lp);
                let st = t.stack(&[e1, e2, q, ll]).unwrap();
                let w = t.softmax(st).unwrap();
                let ws = t.weighted_sum(w, &[st, st]);
                let _ = ws; // weighted_sum needs matching lengths; checked below
                let items = vec![a, b];
                let w2 = t.leaf(Tensor::vector(vec![0.25, -0.5]));
                let mixed = t.weighted_sum(w2, &items).unwrap();
                let e3 = t.sum(mixed);
                let all = t.stack(&[e1, e2, q, ll, e3]).unwrap();
                let loss = t.sum(all);
                (t, vec![mat, a, b, s], loss)
            };
            let f = |p: &[f64]| {
                let (t, _, loss) = build(p);
                t.value(loss).data[0]
            };
            let (mut t, leaves, loss) = build(&params);
            t.backward(loss).unwrap();
            let analytic: Vec<f64> = leaves
                .iter()
                .flat_map(|&l| t.grad(l).to_vec())
                .collect();
            let err = finite_diff_check(f, &params, &analytic, 1e-4).unwrap();
            assert!(err < 1e-4, "seed {seed}: rel err {err}");
        }
    }
}
