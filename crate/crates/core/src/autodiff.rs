//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation of one forward pass. Leaves are created
//! with [`Tape::leaf`]; a leaf registered with `requires_grad = false` is a
//! constant, and so is every node computed only from constants. Constants never
//! receive a gradient, which is how the target network is kept out of the
//! backward pass.
//!
//! The tape is rebuilt on every forward pass and is not meant to be shared
//! between threads.

use crate::error::TensorError;
use crate::tensor::{
    bias_add_kernel, l2_normalize_kernel, matmul_kernel, matmul_nt_kernel, matmul_tn_kernel,
    softmax_rows, Tensor,
};

/// Denominator guard for [`Tape::l2_normalize`].
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    BiasAdd(NodeId, NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Dot(NodeId, NodeId),
    L2Normalize(NodeId),
    Mse(NodeId, NodeId),
    SoftmaxCrossEntropy(NodeId, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `id`; `None` for constants.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Registers an input tensor. Leaf values are validated at construction.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn record(
        &mut self,
        name: &'static str,
        value: Tensor,
        op: Op,
        inputs: &[NodeId],
    ) -> Result<NodeId, TensorError> {
        if !value.all_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i.0].requires_grad);
        Ok(self.push(value, op, requires_grad))
    }

    fn check_id(&self, op: &'static str, id: NodeId) -> Result<(), TensorError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::Contract(format!("{op}: unknown node {}", id.0)))
        }
    }

    /// Matrix product of `(m, k)` and `(k, n)` operands.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check_id("matmul", a)?;
        self.check_id("matmul", b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k, n) = match (av.shape(), bv.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (sa, sb) => {
                return Err(TensorError::shape(
                    "matmul",
                    format!("{sa:?} x {sb:?}"),
                ))
            }
        };
        let out = matmul_kernel(av.data(), bv.data(), m, k, n);
        let value = Tensor::from_raw(vec![m, n], out);
        self.record("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Elementwise sum of equally shaped operands.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check_id("add", a)?;
        self.check_id("add", b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::shape(
                "add",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let value = Tensor::from_raw(av.shape().to_vec(), out);
        self.record("add", value, Op::Add(a, b), &[a, b])
    }

    /// Adds a length-`n` bias to every row of an `(m, n)` matrix (or an `(n,)` vector).
    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, TensorError> {
        self.check_id("bias_add", x)?;
        self.check_id("bias_add", bias)?;
        let (xv, bv) = (self.value(x), self.value(bias));
        let ok = bv.shape().len() == 1
            && matches!(xv.as_rows(), Some((_, c)) if c == bv.len());
        if !ok {
            return Err(TensorError::shape(
                "bias_add",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let out = bias_add_kernel(xv.data(), bv.data());
        let value = Tensor::from_raw(xv.shape().to_vec(), out);
        self.record("bias_add", value, Op::BiasAdd(x, bias), &[x, bias])
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.check_id("tanh", x)?;
        let xv = self.value(x);
        let out = xv.data().iter().map(|v| v.tanh()).collect();
        let value = Tensor::from_raw(xv.shape().to_vec(), out);
        self.record("tanh", value, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.check_id("relu", x)?;
        let xv = self.value(x);
        let out = xv.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::from_raw(xv.shape().to_vec(), out);
        self.record("relu", value, Op::Relu(x), &[x])
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId, TensorError> {
        self.check_id("scale", x)?;
        if !factor.is_finite() {
            return Err(TensorError::NonFinite("scale"));
        }
        let xv = self.value(x);
        let out = xv.data().iter().map(|v| v * factor).collect();
        let value = Tensor::from_raw(xv.shape().to_vec(), out);
        self.record("scale", value, Op::Scale(x, factor), &[x])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.check_id("sum", x)?;
        let total = self.value(x).data().iter().sum();
        self.record("sum", Tensor::from_raw(Vec::new(), vec![total]), Op::Sum(x), &[x])
    }

    /// Full contraction `Σ aᵢbᵢ` of two equally shaped tensors.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check_id("dot", a)?;
        self.check_id("dot", b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(TensorError::shape(
                "dot",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let total = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).sum();
        self.record(
            "dot",
            Tensor::from_raw(Vec::new(), vec![total]),
            Op::Dot(a, b),
            &[a, b],
        )
    }

    /// Row-wise `v / max(‖v‖, NORM_EPS)`; a vector is treated as a single row.
    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId, TensorError> {
        self.check_id("l2_normalize", x)?;
        let xv = self.value(x);
        let Some((_, cols)) = xv.as_rows() else {
            return Err(TensorError::shape("l2_normalize", format!("{:?}", xv.shape())));
        };
        let out = l2_normalize_kernel(xv.data(), cols, NORM_EPS);
        let value = Tensor::from_raw(xv.shape().to_vec(), out);
        self.record("l2_normalize", value, Op::L2Normalize(x), &[x])
    }

    /// Mean over rows of the squared Euclidean row distance `‖aᵢ − bᵢ‖²`.
    pub fn mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.check_id("mse", a)?;
        self.check_id("mse", b)?;
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || av.as_rows().is_none() {
            return Err(TensorError::shape(
                "mse",
                format!("{:?} vs {:?}", av.shape(), bv.shape()),
            ));
        }
        let rows = av.rows();
        let total: f64 = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        self.record(
            "mse",
            Tensor::from_raw(Vec::new(), vec![total / rows as f64]),
            Op::Mse(a, b),
            &[a, b],
        )
    }

    /// Mean softmax cross-entropy of `(m, C)` logits against class labels.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: NodeId,
        labels: &[usize],
    ) -> Result<NodeId, TensorError> {
        self.check_id("softmax_cross_entropy", logits)?;
        let lv = self.value(logits);
        let (m, c) = match lv.shape() {
            [m, c] if *m == labels.len() && *m > 0 => (*m, *c),
            s => {
                return Err(TensorError::shape(
                    "softmax_cross_entropy",
                    format!("logits {s:?} with {} labels", labels.len()),
                ))
            }
        };
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(TensorError::Contract(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let mut total = 0.0;
        for (row, &label) in lv.data().chunks(c).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[label];
        }
        self.record(
            "softmax_cross_entropy",
            Tensor::from_raw(Vec::new(), vec![total / m as f64]),
            Op::SoftmaxCrossEntropy(logits, labels.to_vec()),
            &[logits],
        )
    }

    /// Reverse sweep from a scalar loss. Nodes are visited once each, in reverse
    /// recording order; constants are skipped.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        self.check_id("backward", loss)?;
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::from_raw(n.value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut send = |id: NodeId, contrib: Vec<f64>| {
            if !self.nodes[id.0].requires_grad {
                return;
            }
            match &mut grads[id.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.requires_grad(*a) {
                    send(*a, matmul_nt_kernel(g, bv.data(), m, n, k));
                }
                if self.requires_grad(*b) {
                    send(*b, matmul_tn_kernel(av.data(), g, m, k, n));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.to_vec());
                send(*b, g.to_vec());
            }
            Op::BiasAdd(x, bias) => {
                send(*x, g.to_vec());
                if self.requires_grad(*bias) {
                    let n = self.value(*bias).len();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(a, r)| *a += r);
                    }
                    send(*bias, gb);
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                send(*x, g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect());
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                send(
                    *x,
                    g.iter()
                        .zip(xv)
                        .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Scale(x, factor) => send(*x, g.iter().map(|g| g * factor).collect()),
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::Dot(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                send(*a, bv.iter().map(|v| g[0] * v).collect());
                send(*b, av.iter().map(|v| g[0] * v).collect());
            }
            Op::L2Normalize(x) => {
                let xv = self.value(*x);
                let cols = xv.cols();
                let mut out = Vec::with_capacity(xv.len());
                for (row, grow) in xv.data().chunks(cols).zip(g.chunks(cols)) {
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if norm > NORM_EPS {
                        let gv: f64 = grow.iter().zip(row).map(|(a, b)| a * b).sum();
                        let n3 = norm * norm * norm;
                        out.extend(row.iter().zip(grow).map(|(v, gi)| gi / norm - v * gv / n3));
                    } else {
                        out.extend(grow.iter().map(|gi| gi / NORM_EPS));
                    }
                }
                send(*x, out);
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let coef = 2.0 * g[0] / av.rows() as f64;
                let da: Vec<f64> = av
                    .data()
                    .iter()
                    .zip(bv.data())
                    .map(|(x, y)| coef * (x - y))
                    .collect();
                if self.requires_grad(*b) {
                    send(*b, da.iter().map(|v| -v).collect());
                }
                send(*a, da);
            }
            Op::SoftmaxCrossEntropy(logits, labels) => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let mut p = softmax_rows(lv.data(), c);
                let coef = g[0] / labels.len() as f64;
                for (row, &label) in p.chunks_mut(c).zip(labels) {
                    row[label] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= coef);
                }
                send(*logits, p);
            }
        }
    }
}

/// Maximum relative discrepancy between an analytic gradient and central
/// finite differences.
///
/// `eval` maps a flat parameter vector to `(value, gradient)`; the gradient is
/// taken from the call at `params`, and the value at `params ± h·eᵢ` feeds the
/// central difference. Per coordinate the error is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F, E>(mut eval: F, params: &[f64], h: f64) -> Result<f64, E>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>), E>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let (_, analytic) = eval(params)?;
    assert_eq!(analytic.len(), params.len(), "gradient length mismatch");
    let mut probe = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        probe[i] = params[i] + h;
        let (plus, _) = eval(&probe)?;
        probe[i] = params[i] - h;
        let (minus, _) = eval(&probe)?;
        probe[i] = params[i];
        let numeric = (plus - minus) / (2.0 * h);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
        let n = shape.iter().product();
        t(shape, (0..n).map(|_| rng.gen_range(-1.5..1.5)).collect())
    }

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![2], vec![3.0, 4.0]));
        let y = tape.l2_normalize(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.6, 0.8]);
    }

    #[test]
    fn dot_of_orthogonal_vectors_is_zero() {
        let mut tape = Tape::new();
        let a = tape.constant(t(vec![2], vec![1.0, 0.0]));
        let b = tape.constant(t(vec![2], vec![0.0, 1.0]));
        let d = tape.dot(a, b).unwrap();
        assert_eq!(tape.value(d).data(), &[0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random(&mut rng, vec![2, 3]);
            let b = random(&mut rng, vec![3, 4]);
            let expect = naive_matmul(&a, &b);
            let mut tape = Tape::new();
            let (na, nb) = (tape.constant(a), tape.constant(b));
            let c = tape.matmul(na, nb).unwrap();
            assert_eq!(tape.value(c).shape(), &[2, 4]);
            for (x, y) in tape.value(c).data().iter().zip(&expect) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        assert!(matches!(tape.matmul(a, b), Err(TensorError::Shape { .. })));
        let v = tape.constant(Tensor::zeros(vec![4]));
        assert!(tape.add(a, v).is_err());
        assert!(tape.bias_add(a, v).is_err());
        assert!(tape.dot(a, v).is_err());
        assert!(tape.mse(a, v).is_err());
        assert!(tape.softmax_cross_entropy(a, &[0]).is_err());
        assert!(matches!(
            tape.softmax_cross_entropy(a, &[0, 3]),
            Err(TensorError::Contract(_))
        ));
    }

    #[test]
    fn overflow_is_a_numeric_error() {
        let mut tape = Tape::new();
        let a = tape.param(t(vec![1], vec![1e300]));
        assert_eq!(tape.scale(a, 1e300), Err(TensorError::NonFinite("scale")));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(vec![3], vec![0.3, -1.0, 2.0]));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_self_dot() {
        let mut tape = Tape::new();
        let x = tape.param(t(vec![2], vec![2.0, -1.0]));
        let d = tape.dot(x, x).unwrap();
        let g = tape.backward(d).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[4.0, -2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(t(vec![2], vec![2.0, -1.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(t(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let frozen = tape.constant(t(vec![2, 2], vec![0.5, 0.5, 0.5, 0.5]));
        let x = tape.constant(t(vec![1, 2], vec![1.0, -1.0]));
        let a = tape.matmul(x, w).unwrap();
        let b = tape.matmul(x, frozen).unwrap();
        let l = tape.mse(a, b).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(g.get(w).is_some());
        assert!(g.get(frozen).is_none());
        assert!(g.get(b).is_none());
    }

    #[test]
    fn grad_check_quadratic_and_constant() {
        let quad = |p: &[f64]| -> Result<(f64, Vec<f64>), ()> {
            Ok((p.iter().map(|v| v * v).sum(), p.iter().map(|v| 2.0 * v).collect()))
        };
        let err = grad_check(quad, &[1.0, 2.0, 3.0], 1e-5).unwrap();
        assert!(err < 1e-7, "{err}");
        let constant = |p: &[f64]| -> Result<(f64, Vec<f64>), ()> { Ok((4.2, vec![0.0; p.len()])) };
        assert_eq!(grad_check(constant, &[1.0, -1.0], 1e-5).unwrap(), 0.0);
    }

    /// Builds `loss = f(params)` for one primitive and returns value + gradient.
    fn primitive_loss(kind: usize, params: &[f64], aux: &[f64]) -> (f64, Vec<f64>) {
        let mut tape = Tape::new();
        let x = tape.param(t(vec![2, 3], params[..6].to_vec()));
        let c = tape.constant(t(vec![2, 3], aux[..6].to_vec()));
        let out = match kind {
            0 => {
                let w = tape.param(t(vec![3, 2], params[6..12].to_vec()));
                let y = tape.matmul(x, w).unwrap();
                let ty = tape.tanh(y).unwrap();
                tape.sum(ty).unwrap()
            }
            1 => {
                let y = tape.add(x, c).unwrap();
                let y = tape.tanh(y).unwrap();
                tape.dot(y, c).unwrap()
            }
            2 => {
                let b = tape.param(t(vec![3], params[6..9].to_vec()));
                let y = tape.bias_add(x, b).unwrap();
                tape.dot(y, c).unwrap()
            }
            3 => {
                let y = tape.relu(x).unwrap();
                tape.dot(y, c).unwrap()
            }
            4 => {
                let y = tape.scale(x, -1.7).unwrap();
                let y = tape.tanh(y).unwrap();
                tape.sum(y).unwrap()
            }
            5 => {
                let y = tape.l2_normalize(x).unwrap();
                tape.dot(y, c).unwrap()
            }
            6 => {
                let y = tape.l2_normalize(x).unwrap();
                let z = tape.l2_normalize(c).unwrap();
                tape.mse(y, z).unwrap()
            }
            7 => tape.softmax_cross_entropy(x, &[2, 0]).unwrap(),
            _ => unreachable!(),
        };
        let g = tape.backward(out).unwrap();
        let mut grad = g.get(x).unwrap().data().to_vec();
        let extra = match kind {
            0 => 6,
            2 => 3,
            _ => 0,
        };
        if extra > 0 {
            // the second parameter leaf is always node 2
            grad.extend_from_slice(g.get(NodeId(2)).unwrap().data());
        }
        (tape.value(out).data()[0], grad)
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        for kind in 0..8 {
            let n_params = match kind {
                0 => 12,
                2 => 9,
                _ => 6,
            };
            for seed in 0..100u64 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed * 31 + kind as u64);
                let mut params: Vec<f64> = (0..n_params).map(|_| rng.gen_range(-1.5..1.5)).collect();
                if kind == 3 {
                    // keep relu inputs away from the kink
                    for p in &mut params {
                        if p.abs() < 1e-3 {
                            *p += 0.01;
                        }
                    }
                }
                let aux: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.5..1.5)).collect();
                let err = grad_check(
                    |p: &[f64]| -> Result<_, ()> { Ok(primitive_loss(kind, p, &aux)) },
                    &params,
                    1e-5,
                )
                .unwrap();
                assert!(err < 1e-4, "primitive {kind} seed {seed}: rel err {err}");
            }
        }
    }

    #[test]
    fn l2_normalize_yields_unit_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let scale = 10f64.powf(rng.gen_range(-5.9..3.0));
            let data: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
            let mut tape = Tape::new();
            let x = tape.constant(t(vec![2, 4], data));
            let y = tape.l2_normalize(x).unwrap();
            let rows_in = tape.value(x).data().chunks(4);
            for (row, input) in tape.value(y).data().chunks(4).zip(rows_in) {
                let input_norm = input.iter().map(|v| v * v).sum::<f64>().sqrt();
                if input_norm <= 1e-6 {
                    continue;
                }
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((norm - 1.0).abs() < 1e-9, "norm {norm}");
            }
        }
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let params: Vec<f64> = (0..12).map(|v| (v as f64 * 0.37).sin()).collect();
        let aux = vec![0.1; 6];
        let a = primitive_loss(0, &params, &aux);
        let b = primitive_loss(0, &params, &aux);
        assert_eq!(a.1, b.1);
    }
}
