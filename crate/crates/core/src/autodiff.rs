//! Reverse-mode automatic differentiation over dense row-major tensors.
//!
//! A [`Graph`] is an append-only tape of operation records. Parents always
//! precede children, so insertion order is already a topological order and
//! the backward pass is a single reverse scan.
//!
//! Higher-order gradients come from running the backward pass *through the
//! tape itself*: with [`GradOpts::retain`] set, every adjoint is built out of
//! ordinary recorded operations, so the returned gradients are graph-attached
//! tensors that can be differentiated again. With `retain` off, recording is
//! paused during the walk and the same arithmetic produces detached values,
//! bit-identical to the retained ones.

use std::sync::Arc;

use crate::element::Element;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Operation kinds recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Hadamard,
    Scale,
    Matmul,
    Transpose,
    Relu,
    LeakyRelu,
    Square,
    Mean,
    Sum,
    RowSum,
    Softmax,
    MseLoss,
    SoftmaxCrossEntropy,
    BroadcastRepeat,
    ReduceSumTo,
    Concat,
    Slice,
    Reshape,
    RsqrtEps,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Hadamard => "hadamard",
            OpKind::Scale => "scale",
            OpKind::Matmul => "matmul",
            OpKind::Transpose => "transpose",
            OpKind::Relu => "relu",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Square => "square",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::RowSum => "row_sum",
            OpKind::Softmax => "softmax",
            OpKind::MseLoss => "mse_loss",
            OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpKind::BroadcastRepeat => "broadcast_repeat",
            OpKind::ReduceSumTo => "reduce_sum_to",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
            OpKind::Reshape => "reshape",
            OpKind::RsqrtEps => "rsqrt_eps",
        }
    }
}

/// Slope used by `leaky_relu`.
pub const LEAKY_RELU_SLOPE: f64 = 0.01;

/// An n-dimensional float tensor. Rank-0 tensors hold a single scalar.
///
/// Data is shared behind an [`Arc`], so clones are cheap and detached tensors
/// are safely shareable across threads. `node` ties the tensor to the graph
/// that produced it; detached tensors (`node == None`) are plain values.
#[derive(Debug, Clone)]
pub struct Tensor<E> {
    shape: Vec<usize>,
    data: Arc<Vec<E>>,
    node: Option<NodeId>,
}

impl<E: Element> Tensor<E> {
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: format!("shape wants {expected} elements, data has {}", data.len()),
            });
        }
        Ok(Tensor { shape, data: Arc::new(data), node: None })
    }

    pub fn scalar(v: E) -> Self {
        Tensor { shape: vec![], data: Arc::new(vec![v]), node: None }
    }

    pub fn vector(data: Vec<E>) -> Self {
        Tensor { shape: vec![data.len()], data: Arc::new(data), node: None }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<E>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![E::ZERO; n]), node: None }
    }

    pub fn filled(shape: Vec<usize>, v: E) -> Self {
        let n: usize = shape.iter().product();
        Tensor { shape, data: Arc::new(vec![v; n]), node: None }
    }

    pub fn from_f64_slice(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Tensor::new(shape, data.iter().map(|&v| E::from_f64(v)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn node(&self) -> Option<NodeId> {
        self.node
    }

    pub fn is_attached(&self) -> bool {
        self.node.is_some()
    }

    /// A copy of this tensor with no graph attachment.
    pub fn detached(&self) -> Tensor<E> {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: None }
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> E {
        assert_eq!(self.numel(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn with_node(&self, node: NodeId) -> Tensor<E> {
        Tensor { shape: self.shape.clone(), data: Arc::clone(&self.data), node: Some(node) }
    }
}

#[derive(Debug, Clone)]
enum Aux<E> {
    None,
    Scalar(E),
    Offset(usize),
}

#[derive(Debug)]
struct Node<E> {
    op: OpKind,
    parents: Vec<NodeId>,
    value: Tensor<E>,
    aux: Aux<E>,
}

/// Options for [`Graph::grad`].
#[derive(Debug, Clone, Copy, Default)]
pub struct GradOpts {
    /// Record the backward pass as graph operations so the returned
    /// gradients can be differentiated again.
    pub retain: bool,
    /// Return zeros for `wrt` tensors the output does not depend on, instead
    /// of erroring. Off by default: silent zeros mask wiring bugs.
    pub allow_unreachable: bool,
}

impl GradOpts {
    pub fn retained() -> Self {
        GradOpts { retain: true, allow_unreachable: false }
    }
}

/// Append-only computation tape.
///
/// Single-writer: one episode's forward/backward runs on one thread.
/// Distinct graphs are fully independent.
pub struct Graph<E> {
    nodes: Vec<Node<E>>,
    recording: bool,
    strict: bool,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), recording: true, strict: false }
    }

    /// Rejects non-finite op inputs. Costs a scan per input per op.
    pub fn strict() -> Self {
        Graph { nodes: Vec::new(), recording: true, strict: true }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Attach a detached tensor as a leaf (variable or constant).
    pub fn var(&mut self, t: &Tensor<E>) -> Tensor<E> {
        if !self.recording {
            return t.detached();
        }
        let id = self.nodes.len();
        let value = t.with_node(id);
        self.nodes.push(Node { op: OpKind::Leaf, parents: vec![], value: value.clone(), aux: Aux::None });
        value
    }

    fn check_strict(&self, op: &'static str, inputs: &[&Tensor<E>]) -> Result<()> {
        if self.strict {
            for t in inputs {
                if !t.all_finite() {
                    return Err(Error::NonFiniteInput { op });
                }
            }
        }
        Ok(())
    }

    /// Record `value` as the result of `op` over `inputs`. Detached inputs
    /// are attached as leaves first. If recording is off or no input is
    /// attached, the value is returned detached.
    fn push(&mut self, op: OpKind, inputs: &[&Tensor<E>], value: Tensor<E>, aux: Aux<E>) -> Tensor<E> {
        if !self.recording || inputs.iter().all(|t| t.node.is_none()) {
            return value;
        }
        let parents: Vec<NodeId> = inputs
            .iter()
            .map(|t| match t.node {
                Some(id) => id,
                None => self.var(t).node.expect("var attaches"),
            })
            .collect();
        let id = self.nodes.len();
        let value = value.with_node(id);
        self.nodes.push(Node { op, parents, value: value.clone(), aux });
        value
    }

    fn elementwise2(
        &mut self,
        op: OpKind,
        a: &Tensor<E>,
        b: &Tensor<E>,
        f: impl Fn(E, E) -> E,
    ) -> Result<Tensor<E>> {
        self.check_strict(op.name(), &[a, b])?;
        if a.shape != b.shape {
            return Err(Error::ShapeMismatch {
                op: op.name(),
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let data: Vec<E> = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor { shape: a.shape.clone(), data: Arc::new(data), node: None };
        Ok(self.push(op, &[a, b], value, Aux::None))
    }

    pub fn add(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.elementwise2(OpKind::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.elementwise2(OpKind::Sub, a, b, |x, y| x - y)
    }

    /// Hadamard (element-wise) product.
    pub fn hadamard(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.elementwise2(OpKind::Hadamard, a, b, |x, y| x * y)
    }

    /// Multiply every element by the constant `c`.
    pub fn scale(&mut self, a: &Tensor<E>, c: E) -> Result<Tensor<E>> {
        self.check_strict("scale", &[a])?;
        let data: Vec<E> = a.data.iter().map(|&x| x * c).collect();
        let value = Tensor { shape: a.shape.clone(), data: Arc::new(data), node: None };
        Ok(self.push(OpKind::Scale, &[a], value, Aux::Scalar(c)))
    }

    pub fn matmul(&mut self, a: &Tensor<E>, b: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_strict("matmul", &[a, b])?;
        let (&[m, k], &[k2, n]) = (&a.shape[..], &b.shape[..]) else {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        };
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: a.shape.clone(),
                rhs: b.shape.clone(),
            });
        }
        let mut out = vec![E::ZERO; m * n];
        for i in 0..m {
            let arow = &a.data[i * k..(i + 1) * k];
            let crow = &mut out[i * n..(i + 1) * n];
            for (l, &av) in arow.iter().enumerate() {
                let brow = &b.data[l * n..(l + 1) * n];
                for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                    *c = *c + av * bv;
                }
            }
        }
        let value = Tensor { shape: vec![m, n], data: Arc::new(out), node: None };
        Ok(self.push(OpKind::Matmul, &[a, b], value, Aux::None))
    }

    pub fn transpose(&mut self, a: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_strict("transpose", &[a])?;
        let &[r, c] = &a.shape[..] else {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: a.shape.clone(),
                reason: "expected a rank-2 tensor".into(),
            });
        };
        let mut out = vec![E::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a.data[i * c + j];
            }
        }
        let value = Tensor { shape: vec![c, r], data: Arc::new(out), node: None };
        Ok(self.push(OpKind::Transpose, &[a], value, Aux::None))
    }

    fn elementwise1(
        &mut self,
        op: OpKind,
        a: &Tensor<E>,
        f: impl Fn(E) -> E,
    ) -> Result<Tensor<E>> {
        self.check_strict(op.name(), &[a])?;
        let data: Vec<E> = a.data.iter().map(|&x| f(x)).collect();
        let value = Tensor { shape: a.shape.clone(), data: Arc::new(data), node: None };
        Ok(self.push(op, &[a], value, Aux::None))
    }

    pub fn relu(&mut self, a: &Tensor<E>) -> Result<Tensor<E>> {
        self.elementwise1(OpKind::Relu, a, |x| x.maximum(E::ZERO))
    }

    pub fn leaky_relu(&mut self, a: &Tensor<E>) -> Result<Tensor<E>> {
        let slope = E::from_f64(LEAKY_RELU_SLOPE);
        self.elementwise1(OpKind::LeakyRelu, a, |x| if x > E::ZERO { x } else { x * slope })
    }

    pub fn square(&mut self, a: &Tensor<E>) -> Result<Tensor<E>> {
        self.elementwise1(OpKind::Square, a, |x| x * x)
    }

    fn reduce_all(&mut self, op: OpKind, a: &Tensor<E>, divide: bool) -> Result<Tensor<E>> {
        self.check_strict(op.name(), &[a])?;
        if a.numel() == 0 {
            return Err(Error::EmptyBatch { op: op.name() });
        }
        let mut acc = E::ZERO;
        for &v in a.data.iter() {
            acc = acc + v;
        }
        if divide {
            acc = acc / E::from_f64(a.numel() as f64);
        }
        let value = Tensor { shape: vec![], data: Arc::new(vec![acc]), node: None };
        Ok(self.push(op, &[a], value, Aux::None))
    }

    /// Mean over all elements; returns a scalar.
    pub fn mean(&mut self, a: &Tensor<E>) -> Result<Tensor<E>> {
        self.reduce_all(OpKind::Mean, a, true)
    }

    /// Sum over all elements; returns a scalar.
    pub fn sum(&mut self, a: &Tensor<E>) -> Result<Tensor<E>> {
        self.reduce_all(OpKind::Sum, a, false)
    }

    /// Sum over the last axis of a rank-2 tensor: `(r, c) -> (r,)`.
    pub fn row_sum(&mut self, a: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_strict("row_sum", &[a])?;
        let &[r, c] = &a.shape[..] else {
            return Err(Error::InvalidShape {
                op: "row_sum",
                shape: a.shape.clone(),
                reason: "expected a rank-2 tensor".into(),
            });
        };
        let out: Vec<E> = if c == 0 {
            vec![E::ZERO; r]
        } else {
            a.data
                .chunks_exact(c)
                .map(|row| {
                    let mut acc = E::ZERO;
                    for &v in row {
                        acc = acc + v;
                    }
                    acc
                })
                .collect()
        };
        debug_assert_eq!(out.len(), r);
        let value = Tensor { shape: vec![r], data: Arc::new(out), node: None };
        Ok(self.push(OpKind::RowSum, &[a], value, Aux::None))
    }

    /// Row-wise softmax of a rank-2 tensor (max-shifted for stability).
    pub fn softmax(&mut self, a: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_strict("softmax", &[a])?;
        let &[r, c] = &a.shape[..] else {
            return Err(Error::InvalidShape {
                op: "softmax",
                shape: a.shape.clone(),
                reason: "expected a rank-2 tensor".into(),
            });
        };
        if c == 0 {
            return Err(Error::EmptyBatch { op: "softmax" });
        }
        let mut out = vec![E::ZERO; r * c];
        for i in 0..r {
            let row = &a.data[i * c..(i + 1) * c];
            let mut mx = row[0];
            for &v in row.iter() {
                mx = mx.maximum(v);
            }
            let mut denom = E::ZERO;
            for (o, &v) in out[i * c..(i + 1) * c].iter_mut().zip(row.iter()) {
                let e = (v - mx).exp();
                *o = e;
                denom = denom + e;
            }
            for o in out[i * c..(i + 1) * c].iter_mut() {
                *o = *o / denom;
            }
        }
        let value = Tensor { shape: vec![r, c], data: Arc::new(out), node: None };
        Ok(self.push(OpKind::Softmax, &[a], value, Aux::None))
    }

    /// Mean of squared errors over all elements; returns a scalar.
    pub fn mse_loss(&mut self, pred: &Tensor<E>, target: &Tensor<E>) -> Result<Tensor<E>> {
        self.check_strict("mse_loss", &[pred, target])?;
        if pred.shape != target.shape {
            return Err(Error::ShapeMismatch {
                op: "mse_loss",
                lhs: pred.shape.clone(),
                rhs: target.shape.clone(),
            });
        }
        if pred.numel() == 0 {
            return Err(Error::EmptyBatch { op: "mse_loss" });
        }
        let mut acc = E::ZERO;
        for (&p, &t) in pred.data.iter().zip(target.data.iter()) {
            let d = p - t;
            acc = acc + d * d;
        }
        acc = acc / E::from_f64(pred.numel() as f64);
        let value = Tensor { shape: vec![], data: Arc::new(vec![acc]), node: None };
        Ok(self.push(OpKind::MseLoss, &[pred, target], value, Aux::None))
    }

    /// Batch-mean softmax cross-entropy of `logits (B, C)` against one-hot
    /// `targets (B, C)`. Targets are treated as constants: no gradient is
    /// produced for them.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: &Tensor<E>,
        targets: &Tensor<E>,
    ) -> Result<Tensor<E>> {
        self.check_strict("softmax_cross_entropy", &[logits, targets])?;
        if logits.shape != targets.shape {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: logits.shape.clone(),
                rhs: targets.shape.clone(),
            });
        }
        let &[b, c] = &logits.shape[..] else {
            return Err(Error::InvalidShape {
                op: "softmax_cross_entropy",
                shape: logits.shape.clone(),
                reason: "expected rank-2 logits".into(),
            });
        };
        if b == 0 || c == 0 {
            return Err(Error::EmptyBatch { op: "softmax_cross_entropy" });
        }
        let mut acc = E::ZERO;
        for i in 0..b {
            let row = &logits.data[i * c..(i + 1) * c];
            let trow = &targets.data[i * c..(i + 1) * c];
            let mut mx = row[0];
            for &v in row.iter() {
                mx = mx.maximum(v);
            }
            let mut denom = E::ZERO;
            for &v in row.iter() {
                denom = denom + (v - mx).exp();
            }
            let lse = denom.ln() + mx;
            for (&z, &t) in row.iter().zip(trow.iter()) {
                acc = acc + t * (lse - z);
            }
        }
        acc = acc / E::from_f64(b as f64);
        let value = Tensor { shape: vec![], data: Arc::new(vec![acc]), node: None };
        Ok(self.push(OpKind::SoftmaxCrossEntropy, &[logits, targets], value, Aux::None))
    }

    fn broadcast_compatible(src: &[usize], dst: &[usize], src_n: usize, dst_n: usize) -> bool {
        if src_n == 1 {
            return true;
        }
        if src.len() > dst.len() || !dst_n.is_multiple_of(src_n) {
            return false;
        }
        dst[dst.len() - src.len()..] == *src
    }

    /// Tile `a` up to `target_shape`. Either `a` has one element, or its
    /// shape is a suffix of `target_shape` and it is repeated over the
    /// leading axes.
    pub fn broadcast_repeat(&mut self, a: &Tensor<E>, target_shape: &[usize]) -> Result<Tensor<E>> {
        self.check_strict("broadcast_repeat", &[a])?;
        let dst_n: usize = target_shape.iter().product();
        if !Self::broadcast_compatible(&a.shape, target_shape, a.numel(), dst_n) {
            return Err(Error::ShapeMismatch {
                op: "broadcast_repeat",
                lhs: a.shape.clone(),
                rhs: target_shape.to_vec(),
            });
        }
        let src_n = a.numel();
        let mut out = Vec::with_capacity(dst_n);
        if src_n == 1 {
            out.resize(dst_n, a.data[0]);
        } else {
            for _ in 0..dst_n / src_n {
                out.extend_from_slice(&a.data);
            }
        }
        let value = Tensor { shape: target_shape.to_vec(), data: Arc::new(out), node: None };
        Ok(self.push(OpKind::BroadcastRepeat, &[a], value, Aux::None))
    }

    /// Inverse of [`Graph::broadcast_repeat`]: sum `a` down to `target_shape`.
    pub fn reduce_sum_to(&mut self, a: &Tensor<E>, target_shape: &[usize]) -> Result<Tensor<E>> {
        self.check_strict("reduce_sum_to", &[a])?;
        let dst_n: usize = target_shape.iter().product();
        if !Self::broadcast_compatible(target_shape, &a.shape, dst_n, a.numel()) {
            return Err(Error::ShapeMismatch {
                op: "reduce_sum_to",
                lhs: a.shape.clone(),
                rhs: target_shape.to_vec(),
            });
        }
        let mut out = vec![E::ZERO; dst_n];
        for (i, &v) in a.data.iter().enumerate() {
            let j = i % dst_n;
            out[j] = out[j] + v;
        }
        let value = Tensor { shape: target_shape.to_vec(), data: Arc::new(out), node: None };
        Ok(self.push(OpKind::ReduceSumTo, &[a], value, Aux::None))
    }

    /// Concatenate scalars and vectors into one vector.
    pub fn concat(&mut self, parts: &[&Tensor<E>]) -> Result<Tensor<E>> {
        self.check_strict("concat", parts)?;
        if parts.is_empty() {
            return Err(Error::EmptyBatch { op: "concat" });
        }
        let mut data = Vec::new();
        for p in parts {
            if p.shape.len() > 1 {
                return Err(Error::InvalidShape {
                    op: "concat",
                    shape: p.shape.clone(),
                    reason: "expected scalars or vectors".into(),
                });
            }
            data.extend_from_slice(&p.data);
        }
        let value = Tensor { shape: vec![data.len()], data: Arc::new(data), node: None };
        Ok(self.push(OpKind::Concat, parts, value, Aux::None))
    }

    /// Elementwise `(x + eps)^(-1/2)`; `eps > 0` keeps it total.
    pub fn rsqrt_eps(&mut self, a: &Tensor<E>, eps: E) -> Result<Tensor<E>> {
        self.check_strict("rsqrt_eps", &[a])?;
        let data: Vec<E> = a.data.iter().map(|&x| E::ONE / (x + eps).sqrt()).collect();
        let value = Tensor { shape: a.shape.clone(), data: Arc::new(data), node: None };
        Ok(self.push(OpKind::RsqrtEps, &[a], value, Aux::Scalar(eps)))
    }

    /// Reinterpret the element buffer under a new shape of equal size.
    pub fn reshape(&mut self, a: &Tensor<E>, shape: &[usize]) -> Result<Tensor<E>> {
        let n: usize = shape.iter().product();
        if n != a.numel() {
            return Err(Error::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                reason: format!("cannot hold {} elements", a.numel()),
            });
        }
        let value = Tensor { shape: shape.to_vec(), data: Arc::clone(&a.data), node: None };
        Ok(self.push(OpKind::Reshape, &[a], value, Aux::None))
    }

    /// Contiguous sub-vector `[offset, offset + len)` of a vector.
    pub fn slice(&mut self, a: &Tensor<E>, offset: usize, len: usize) -> Result<Tensor<E>> {
        self.check_strict("slice", &[a])?;
        if a.shape.len() > 1 || offset + len > a.numel() {
            return Err(Error::InvalidShape {
                op: "slice",
                shape: a.shape.clone(),
                reason: format!("cannot take [{offset}, {}) from it", offset + len),
            });
        }
        let data = a.data[offset..offset + len].to_vec();
        let value = Tensor { shape: vec![len], data: Arc::new(data), node: None };
        Ok(self.push(OpKind::Slice, &[a], value, Aux::Offset(offset)))
    }

    /// Gradients of a scalar `output` with respect to each tensor in `wrt`.
    ///
    /// Appends to the graph when `opts.retain` is set; never consumes it.
    pub fn grad(
        &mut self,
        output: &Tensor<E>,
        wrt: &[&Tensor<E>],
        opts: GradOpts,
    ) -> Result<Vec<Tensor<E>>> {
        if !output.is_scalar() {
            return Err(Error::NonScalarOutput(output.shape.clone()));
        }
        let out_id = output.node.ok_or(Error::DetachedOutput)?;
        for (i, t) in wrt.iter().enumerate() {
            if t.node.is_none() {
                return Err(Error::DetachedWrt { index: i });
            }
        }

        let was_recording = self.recording;
        self.recording = opts.retain;
        let result = self.backward(out_id, wrt, opts);
        self.recording = was_recording;
        result
    }

    fn backward(
        &mut self,
        out_id: NodeId,
        wrt: &[&Tensor<E>],
        opts: GradOpts,
    ) -> Result<Vec<Tensor<E>>> {
        let limit = out_id + 1;
        let mut adjoint: Vec<Option<Tensor<E>>> = vec![None; limit];
        adjoint[out_id] = Some(Tensor::scalar(E::ONE));

        for id in (0..limit).rev() {
            let Some(gbar) = adjoint[id].take() else { continue };
            // Re-store: a wrt tensor may point at this node.
            adjoint[id] = Some(gbar.clone());
            let (op, parents, aux) = {
                let n = &self.nodes[id];
                (n.op, n.parents.clone(), n.aux.clone())
            };
            if op == OpKind::Leaf {
                continue;
            }
            let contributions = self.vjp(op, &parents, &aux, &gbar, id)?;
            for (pid, contrib) in contributions {
                adjoint[pid] = Some(match adjoint[pid].take() {
                    None => contrib,
                    Some(existing) => self.add(&existing, &contrib)?,
                });
            }
        }

        let mut grads = Vec::with_capacity(wrt.len());
        for (i, t) in wrt.iter().enumerate() {
            let id = t.node.expect("checked above");
            match adjoint.get(id).and_then(|a| a.clone()) {
                Some(g) => grads.push(g),
                None if opts.allow_unreachable => {
                    let zeros = Tensor::zeros(t.shape.clone());
                    grads.push(if opts.retain { self.var(&zeros) } else { zeros });
                }
                None => return Err(Error::UnreachableWrt { index: i }),
            }
        }
        Ok(grads)
    }

    /// Adjoint contributions of one node to its parents, built from ordinary
    /// ops so they are differentiable when recording is on.
    fn vjp(
        &mut self,
        op: OpKind,
        parents: &[NodeId],
        aux: &Aux<E>,
        gbar: &Tensor<E>,
        node_id: NodeId,
    ) -> Result<Vec<(NodeId, Tensor<E>)>> {
        let pval = |g: &Graph<E>, i: usize| g.nodes[parents[i]].value.clone();
        match op {
            OpKind::Leaf => Ok(vec![]),
            OpKind::Add => Ok(vec![(parents[0], gbar.clone()), (parents[1], gbar.clone())]),
            OpKind::Sub => {
                let neg = self.scale(gbar, -E::ONE)?;
                Ok(vec![(parents[0], gbar.clone()), (parents[1], neg)])
            }
            OpKind::Hadamard => {
                let (a, b) = (pval(self, 0), pval(self, 1));
                let da = self.hadamard(gbar, &b)?;
                let db = self.hadamard(gbar, &a)?;
                Ok(vec![(parents[0], da), (parents[1], db)])
            }
            OpKind::Scale => {
                let Aux::Scalar(c) = aux else { unreachable!("scale saves its factor") };
                let da = self.scale(gbar, *c)?;
                Ok(vec![(parents[0], da)])
            }
            OpKind::Matmul => {
                let (a, b) = (pval(self, 0), pval(self, 1));
                let bt = self.transpose(&b)?;
                let da = self.matmul(gbar, &bt)?;
                let at = self.transpose(&a)?;
                let db = self.matmul(&at, gbar)?;
                Ok(vec![(parents[0], da), (parents[1], db)])
            }
            OpKind::Transpose => {
                let da = self.transpose(gbar)?;
                Ok(vec![(parents[0], da)])
            }
            OpKind::Relu | OpKind::LeakyRelu => {
                let x = pval(self, 0);
                let low = if op == OpKind::Relu { E::ZERO } else { E::from_f64(LEAKY_RELU_SLOPE) };
                let mask: Vec<E> =
                    x.data().iter().map(|&v| if v > E::ZERO { E::ONE } else { low }).collect();
                let mask = Tensor { shape: x.shape.clone(), data: Arc::new(mask), node: None };
                let da = self.hadamard(gbar, &mask)?;
                Ok(vec![(parents[0], da)])
            }
            OpKind::Square => {
                let x = pval(self, 0);
                let gx = self.hadamard(gbar, &x)?;
                let da = self.scale(&gx, E::from_f64(2.0))?;
                Ok(vec![(parents[0], da)])
            }
            OpKind::Mean => {
                let x = pval(self, 0);
                let scaled = self.scale(gbar, E::ONE / E::from_f64(x.numel() as f64))?;
                let da = self.broadcast_repeat(&scaled, x.shape())?;
                Ok(vec![(parents[0], da)])
            }
            OpKind::Sum => {
                let x = pval(self, 0);
                let da = self.broadcast_repeat(gbar, x.shape())?;
                Ok(vec![(parents[0], da)])
            }
            OpKind::RowSum => {
                // (r,) -> (c, r) by tiling, then transpose to (r, c).
                let x = pval(self, 0);
                let &[r, c] = x.shape() else { unreachable!("row_sum input is rank-2") };
                let tiled = self.broadcast_repeat(gbar, &[c, r])?;
                let da = self.transpose(&tiled)?;
                Ok(vec![(parents[0], da)])
            }
            OpKind::Softmax => {
                // dx = s * (g - rowsum(g * s))
                let s = self.nodes[node_id].value.clone();
                let &[r, c] = s.shape() else { unreachable!("softmax output is rank-2") };
                let gs = self.hadamard(gbar, &s)?;
                let rs = self.row_sum(&gs)?;
                let tiled = self.broadcast_repeat(&rs, &[c, r])?;
                let rsb = self.transpose(&tiled)?;
                let centered = self.sub(gbar, &rsb)?;
                let da = self.hadamard(&s, &centered)?;
                Ok(vec![(parents[0], da)])
            }
            OpKind::MseLoss => {
                let (pred, target) = (pval(self, 0), pval(self, 1));
                let diff = self.sub(&pred, &target)?;
                let gb = self.broadcast_repeat(gbar, pred.shape())?;
                let gd = self.hadamard(&gb, &diff)?;
                let dpred = self.scale(&gd, E::from_f64(2.0 / pred.numel() as f64))?;
                let dtarget = self.scale(&dpred, -E::ONE)?;
                Ok(vec![(parents[0], dpred), (parents[1], dtarget)])
            }
            OpKind::SoftmaxCrossEntropy => {
                // dlogits = g * (softmax(z) - onehot) / B; targets get none.
                let (logits, targets) = (pval(self, 0), pval(self, 1));
                let &[b, _] = logits.shape() else { unreachable!("validated rank-2") };
                let sm = self.softmax(&logits)?;
                let diff = self.sub(&sm, &targets.detached())?;
                let scaled = self.scale(&diff, E::ONE / E::from_f64(b as f64))?;
                let gb = self.broadcast_repeat(gbar, logits.shape())?;
                let da = self.hadamard(&gb, &scaled)?;
                Ok(vec![(parents[0], da)])
            }
            OpKind::BroadcastRepeat => {
                let x = pval(self, 0);
                let da = self.reduce_sum_to(gbar, x.shape())?;
                Ok(vec![(parents[0], da)])
            }
            OpKind::ReduceSumTo => {
                let x = pval(self, 0);
                let da = self.broadcast_repeat(gbar, x.shape())?;
                Ok(vec![(parents[0], da)])
            }
            OpKind::Concat => {
                let mut out = Vec::with_capacity(parents.len());
                let mut offset = 0;
                for (i, &pid) in parents.iter().enumerate() {
                    let pshape = self.nodes[pid].value.shape().to_vec();
                    let n = self.nodes[pid].value.numel();
                    let piece = self.slice(gbar, offset, n)?;
                    // Restore the parent's rank (scalars came in as rank-0).
                    let piece = if pshape.is_empty() {
                        self.reduce_sum_to(&piece, &[])?
                    } else {
                        piece
                    };
                    offset += n;
                    out.push((parents[i], piece));
                }
                Ok(out)
            }
            OpKind::Reshape => {
                let x = pval(self, 0);
                let da = self.reshape(gbar, x.shape())?;
                Ok(vec![(parents[0], da)])
            }
            OpKind::RsqrtEps => {
                // d/dx (x+eps)^(-1/2) = -1/2 (x+eps)^(-3/2) = -y^3 / 2.
                let y = self.nodes[node_id].value.clone();
                let y2 = self.hadamard(&y, &y)?;
                let y3 = self.hadamard(&y2, &y)?;
                let gy = self.hadamard(gbar, &y3)?;
                let da = self.scale(&gy, E::from_f64(-0.5))?;
                Ok(vec![(parents[0], da)])
            }
            OpKind::Slice => {
                let Aux::Offset(offset) = aux else { unreachable!("slice saves its offset") };
                let x = pval(self, 0);
                let n = self.nodes[node_id].value.numel();
                let total = x.numel();
                let mut pieces: Vec<Tensor<E>> = Vec::new();
                if *offset > 0 {
                    pieces.push(Tensor::zeros(vec![*offset]));
                }
                pieces.push(gbar.clone());
                if offset + n < total {
                    pieces.push(Tensor::zeros(vec![total - offset - n]));
                }
                let refs: Vec<&Tensor<E>> = pieces.iter().collect();
                let da = self.concat(&refs)?;
                Ok(vec![(parents[0], da)])
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = Tensor<f64>;

    fn g() -> Graph<f64> {
        Graph::new()
    }

    #[test]
    fn relu_definition() {
        let mut g = g();
        let x = g.var(&T::vector(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn mse_loss_definition() {
        let mut g = g();
        let p = g.var(&T::vector(vec![1.0, 3.0]));
        let t = T::vector(vec![1.0, 1.0]);
        let loss = g.mse_loss(&p, &t).unwrap();
        assert_eq!(loss.item(), 2.0);
    }

    #[test]
    fn grad_of_square_is_power_rule() {
        let mut g = g();
        let x = g.var(&T::scalar(3.0));
        let y = g.square(&x).unwrap();
        let dx = g.grad(&y, &[&x], GradOpts::default()).unwrap();
        assert_eq!(dx[0].item(), 6.0);
    }

    #[test]
    fn second_derivative_of_cube() {
        let mut g = g();
        let x = g.var(&T::scalar(2.0));
        let x2 = g.hadamard(&x, &x).unwrap();
        let x3 = g.hadamard(&x2, &x).unwrap();
        let dx = g.grad(&x3, &[&x], GradOpts::retained()).unwrap();
        assert_eq!(dx[0].item(), 12.0); // 3x^2
        let ddx = g.grad(&dx[0], &[&x], GradOpts::default()).unwrap();
        assert_eq!(ddx[0].item(), 12.0); // 6x
    }

    #[test]
    fn unreachable_wrt_errors_without_opt_in() {
        let mut g = g();
        let x = g.var(&T::scalar(1.0));
        let z = g.var(&T::scalar(5.0));
        let y = g.square(&x).unwrap();
        let err = g.grad(&y, &[&z], GradOpts::default()).unwrap_err();
        assert!(matches!(err, Error::UnreachableWrt { index: 0 }));
        let opts = GradOpts { allow_unreachable: true, ..Default::default() };
        let dz = g.grad(&y, &[&z], opts).unwrap();
        assert_eq!(dz[0].item(), 0.0);
    }

    #[test]
    fn non_scalar_output_rejected() {
        let mut g = g();
        let x = g.var(&T::vector(vec![1.0, 2.0]));
        let y = g.square(&x).unwrap();
        let err = g.grad(&y, &[&x], GradOpts::default()).unwrap_err();
        assert!(matches!(err, Error::NonScalarOutput(_)));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = g();
        let a = g.var(&T::vector(vec![1.0, 2.0]));
        let b = g.var(&T::vector(vec![1.0, 2.0, 3.0]));
        let err = g.add(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "{msg}");
        assert!(msg.contains("[2]") && msg.contains("[3]"), "{msg}");
    }

    #[test]
    fn strict_mode_rejects_non_finite() {
        let mut g = Graph::<f64>::strict();
        let a = g.var(&T::vector(vec![1.0, f64::NAN]));
        let err = g.square(&a).unwrap_err();
        assert!(matches!(err, Error::NonFiniteInput { op: "square" }));
    }

    #[test]
    fn broadcast_round_trip_sums() {
        let mut g = g();
        let bias = g.var(&T::vector(vec![1.0, -2.0]));
        let wide = g.broadcast_repeat(&bias, &[3, 2]).unwrap();
        assert_eq!(wide.data(), &[1.0, -2.0, 1.0, -2.0, 1.0, -2.0]);
        let s = g.sum(&wide).unwrap();
        let d = g.grad(&s, &[&bias], GradOpts::default()).unwrap();
        assert_eq!(d[0].data(), &[3.0, 3.0]);
    }

    #[test]
    fn concat_slice_round_trip_gradients() {
        let mut g = g();
        let a = g.var(&T::vector(vec![1.0, 2.0]));
        let b = g.var(&T::vector(vec![3.0]));
        let cat = g.concat(&[&a, &b]).unwrap();
        assert_eq!(cat.data(), &[1.0, 2.0, 3.0]);
        let mid = g.slice(&cat, 1, 2).unwrap();
        let s = g.sum(&mid).unwrap();
        let d = g.grad(&s, &[&a, &b], GradOpts::default()).unwrap();
        assert_eq!(d[0].data(), &[0.0, 1.0]);
        assert_eq!(d[1].data(), &[1.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = g();
        let x = g.var(&T::matrix(2, 3, vec![1.0, 2.0, 0.5, -1.0, 0.0, 1.0]).unwrap());
        let s = g.softmax(&x).unwrap();
        for r in 0..2 {
            let sum: f64 = s.data()[r * 3..(r + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_classes() {
        let mut g = g();
        let logits = g.var(&T::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let onehot = T::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let loss = g.softmax_cross_entropy(&logits, &onehot).unwrap();
        assert!((loss.item() - 2.0_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn replay_is_bitwise_deterministic() {
        let run = || {
            let mut g = Graph::<f64>::new();
            let a = g.var(&T::matrix(2, 2, vec![0.3, -1.7, 2.2, 0.9]).unwrap());
            let b = g.var(&T::matrix(2, 2, vec![1.1, 0.4, -0.6, 0.05]).unwrap());
            let c = g.matmul(&a, &b).unwrap();
            let r = g.relu(&c).unwrap();
            let l = g.mean(&r).unwrap();
            let d = g.grad(&l, &[&a, &b], GradOpts::default()).unwrap();
            (l.item().to_bits(), d[0].to_f64_vec(), d[1].to_f64_vec())
        };
        let (l1, da1, db1) = run();
        let (l2, da2, db2) = run();
        assert_eq!(l1, l2);
        assert_eq!(
            da1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            da2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(
            db1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            db2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
