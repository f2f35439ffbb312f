//! Eager computation graph with reverse-mode differentiation.
//!
//! Every op computes its forward value immediately and appends a node that
//! remembers its inputs. Because nodes are only ever appended, insertion
//! order is already a topological order and `backward` just walks it in
//! reverse.

use super::tensor::{gemm, transpose_buf, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    BatchMatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Relu(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    Concat(NodeId, NodeId),
    Reshape(NodeId),
    Transpose(NodeId),
    Mean(NodeId),
    Sum(NodeId),
    SquaredError(NodeId, NodeId),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints indexed by node, as returned by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradient for `id`, or zeros of the node's shape when the loss does
    /// not depend on it.
    pub fn wrt(&self, id: NodeId) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[id.0]),
        }
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Graph {
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

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Inserts an input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(shape_err("matmul", va, vb));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let out = Tensor::matrix(m, n, gemm(va.data(), vb.data(), m, k, n))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// `[B, p, q] x [B, q, s] -> [B, p, s]`.
    pub fn batch_matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 3
            || vb.rank() != 3
            || va.shape()[0] != vb.shape()[0]
            || va.shape()[2] != vb.shape()[1]
        {
            return Err(shape_err("batch_matmul", va, vb));
        }
        let (bs, p, q, s) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[2]);
        let mut data = Vec::with_capacity(bs * p * s);
        for i in 0..bs {
            let ab = &va.data()[i * p * q..(i + 1) * p * q];
            let bb = &vb.data()[i * q * s..(i + 1) * q * s];
            data.extend(gemm(ab, bb, p, q, s));
        }
        let out = Tensor::new(vec![bs, p, s], data)?;
        Ok(self.push(Op::BatchMatMul(a, b), out))
    }

    /// Elementwise sum. `b` may also be a single row (`[c]` or `[1, c]`)
    /// broadcast over every row of `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let data = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect()
        } else if is_row_broadcast(va, vb) {
            let c = va.cols();
            va.data()
                .iter()
                .enumerate()
                .map(|(i, x)| x + vb.data()[i % c])
                .collect()
        } else {
            return Err(shape_err("add", va, vb));
        };
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("sub", va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x - y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Sub(a, b), out))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("mul", va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let out = self.value(a).map(|v| v * factor);
        self.push(Op::Scale(a, factor), out)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(Op::Relu(a), out)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), out)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a), out)
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let c = va.cols();
        if c == 0 || va.rank() == 0 {
            return Err(Error::invalid("softmax", "cannot normalize an empty row"));
        }
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(c) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(Op::Softmax(a), out))
    }

    /// Concatenation of two matrices along the last dimension.
    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 || va.rows() != vb.rows() {
            return Err(shape_err("concat", va, vb));
        }
        let (rows, ca, cb) = (va.rows(), va.cols(), vb.cols());
        let mut data = Vec::with_capacity(rows * (ca + cb));
        for i in 0..rows {
            data.extend_from_slice(va.row(i));
            data.extend_from_slice(vb.row(i));
        }
        let out = Tensor::matrix(rows, ca + cb, data)?;
        Ok(self.push(Op::Concat(a, b), out))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(Op::Reshape(a), out))
    }

    /// Swaps the last two dimensions of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        let out = match *va.shape() {
            [m, n] => Tensor::matrix(n, m, transpose_buf(va.data(), m, n))?,
            [b, m, n] => {
                let mut data = Vec::with_capacity(va.len());
                for i in 0..b {
                    data.extend(transpose_buf(&va.data()[i * m * n..(i + 1) * m * n], m, n));
                }
                Tensor::new(vec![b, n, m], data)?
            }
            _ => {
                return Err(Error::invalid(
                    "transpose",
                    format!("expected rank 2 or 3, got shape {:?}", va.shape()),
                ))
            }
        };
        Ok(self.push(Op::Transpose(a), out))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let va = self.value(a);
        if va.is_empty() {
            return Err(Error::invalid("mean", "empty tensor"));
        }
        let m = va.data().iter().sum::<f64>() / va.len() as f64;
        Ok(self.push(Op::Mean(a), Tensor::scalar(m)))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a), Tensor::scalar(s))
    }

    /// Mean of squared residuals `mean((a - b)^2)`.
    pub fn squared_error(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err("squared_error", va, vb));
        }
        if va.is_empty() {
            return Err(Error::invalid("squared_error", "empty batch"));
        }
        let s = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / va.len() as f64;
        Ok(self.push(Op::SquaredError(a, b), Tensor::scalar(s)))
    }

    /// Reverse sweep from `loss`, which must be a one-element node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::invalid(
                "backward",
                format!("node {} has not been computed by a forward pass", loss.0),
            ));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        grads.resize(self.nodes.len(), None);
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &node.value;
        match node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                let bt = transpose_buf(vb.data(), k, n);
                let ga = gemm(g.data(), &bt, m, n, k);
                let at = transpose_buf(va.data(), m, k);
                let gb = gemm(&at, g.data(), k, m, n);
                accumulate(grads, a, Tensor::matrix(m, k, ga)?);
                accumulate(grads, b, Tensor::matrix(k, n, gb)?);
            }
            Op::BatchMatMul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let (bs, p, q, s) = (va.shape()[0], va.shape()[1], va.shape()[2], vb.shape()[2]);
                let mut ga = Vec::with_capacity(bs * p * q);
                let mut gb = Vec::with_capacity(bs * q * s);
                for i in 0..bs {
                    let ab = &va.data()[i * p * q..(i + 1) * p * q];
                    let bb = &vb.data()[i * q * s..(i + 1) * q * s];
                    let gi = &g.data()[i * p * s..(i + 1) * p * s];
                    ga.extend(gemm(gi, &transpose_buf(bb, q, s), p, s, q));
                    gb.extend(gemm(&transpose_buf(ab, p, q), gi, q, p, s));
                }
                accumulate(grads, a, Tensor::new(vec![bs, p, q], ga)?);
                accumulate(grads, b, Tensor::new(vec![bs, q, s], gb)?);
            }
            Op::Add(a, b) => {
                accumulate(grads, a, g.clone());
                let vb = self.value(b);
                if vb.shape() == g.shape() {
                    accumulate(grads, b, g.clone());
                } else {
                    let c = vb.len();
                    let mut gb = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    accumulate(grads, b, Tensor::new(vb.shape().to_vec(), gb)?);
                }
            }
            Op::Sub(a, b) => {
                accumulate(grads, a, g.clone());
                accumulate(grads, b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                accumulate(grads, a, zip_with(g, vb, |gv, bv| gv * bv));
                accumulate(grads, b, zip_with(g, va, |gv, av| gv * av));
            }
            Op::Scale(a, factor) => accumulate(grads, a, g.map(|v| v * factor)),
            Op::Relu(a) => {
                let va = self.value(a);
                accumulate(grads, a, zip_with(g, va, |gv, x| if x > 0.0 { gv } else { 0.0 }));
            }
            Op::Tanh(a) => accumulate(grads, a, zip_with(g, out, |gv, y| gv * (1.0 - y * y))),
            Op::Sigmoid(a) => accumulate(grads, a, zip_with(g, out, |gv, y| gv * y * (1.0 - y))),
            Op::Softmax(a) => {
                // s * (g - <g, s>) per row
                let c = out.cols();
                let mut ga = Vec::with_capacity(out.len());
                for (srow, grow) in out.data().chunks(c).zip(g.data().chunks(c)) {
                    let dot: f64 = srow.iter().zip(grow).map(|(s, gv)| s * gv).sum();
                    ga.extend(srow.iter().zip(grow).map(|(s, gv)| s * (gv - dot)));
                }
                accumulate(grads, a, Tensor::new(out.shape().to_vec(), ga)?);
            }
            Op::Concat(a, b) => {
                let (ca, cb) = (self.value(a).cols(), self.value(b).cols());
                let rows = out.rows();
                let mut ga = Vec::with_capacity(rows * ca);
                let mut gb = Vec::with_capacity(rows * cb);
                for row in g.data().chunks(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                accumulate(grads, a, Tensor::matrix(rows, ca, ga)?);
                accumulate(grads, b, Tensor::matrix(rows, cb, gb)?);
            }
            Op::Reshape(a) => {
                let shape = self.value(a).shape().to_vec();
                accumulate(grads, a, g.clone().reshaped(&shape)?);
            }
            Op::Transpose(a) => {
                let ga = match *g.shape() {
                    [n, m] => Tensor::matrix(m, n, transpose_buf(g.data(), n, m))?,
                    [b, n, m] => {
                        let mut data = Vec::with_capacity(g.len());
                        for i in 0..b {
                            data.extend(transpose_buf(&g.data()[i * n * m..(i + 1) * n * m], n, m));
                        }
                        Tensor::new(vec![b, m, n], data)?
                    }
                    _ => unreachable!("transpose forward only accepts rank 2 or 3"),
                };
                accumulate(grads, a, ga);
            }
            Op::Mean(a) => {
                let va = self.value(a);
                let gv = g.data()[0] / va.len() as f64;
                accumulate(grads, a, Tensor::filled(va.shape(), gv));
            }
            Op::Sum(a) => {
                let va = self.value(a);
                accumulate(grads, a, Tensor::filled(va.shape(), g.data()[0]));
            }
            Op::SquaredError(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let k = 2.0 * g.data()[0] / va.len() as f64;
                let ga = zip_with(va, vb, |x, y| k * (x - y));
                accumulate(grads, b, ga.map(|v| -v));
                accumulate(grads, a, ga);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

fn is_row_broadcast(a: &Tensor, b: &Tensor) -> bool {
    let c = a.cols();
    a.rank() >= 1 && b.len() == c && matches!(b.shape(), [n] | [1, n] if *n == c)
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("zip_with on equal shapes")
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
