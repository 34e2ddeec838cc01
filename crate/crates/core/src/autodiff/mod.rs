//! Minimal dense-tensor reverse-mode differentiation engine.
//!
//! Sized for the generators in this crate: the operator set is affine maps,
//! concatenation, elementwise sigmoid/tanh, softmax, cross-entropy, KL
//! against a fixed target, dot products, the GRU cell, and the 2D quad
//! transposed convolution. Graphs are append-only arenas (acyclic by
//! construction); values are computed eagerly on node creation and
//! `backward` runs one reverse sweep, accumulating gradients per parameter.

pub mod gradcheck;

use crate::scalar::Scalar;
use crate::tensor::{self, Tensor};
use crate::{Error, Result};

/// Identity of a parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors. The store owns the canonical values; graphs copy
/// them in as leaves and gradients come back keyed by [`ParamId`].
#[derive(Debug, Clone)]
pub struct ParamStore<S: Scalar = f64> {
    names: Vec<String>,
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor<S>) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<S>)> {
        self.tensors
            .iter()
            .enumerate()
            .map(|(i, t)| (ParamId(i), self.names[i].as_str(), t))
    }

    /// Total scalar parameter count.
    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients for every parameter of a store, optionally tagged with the
/// training example they came from (the tag is required before clipping).
#[derive(Debug, Clone)]
pub struct GradientSet<S: Scalar = f64> {
    grads: Vec<Tensor<S>>,
    pub example: Option<usize>,
}

impl<S: Scalar> GradientSet<S> {
    pub fn zeros_like(store: &ParamStore<S>) -> Self {
        GradientSet {
            grads: store
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.dims()))
                .collect(),
            example: None,
        }
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<S> {
        &self.grads[id.0]
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.grads[id.0]
    }

    pub fn tensors(&self) -> &[Tensor<S>] {
        &self.grads
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.grads
    }

    pub fn sq_l2_norm(&self) -> S {
        self.grads.iter().map(|g| g.sq_l2_norm()).sum()
    }

    pub fn l2_norm(&self) -> S {
        self.sq_l2_norm().sqrt()
    }

    pub fn scale(&mut self, alpha: S) {
        for g in self.grads.iter_mut() {
            g.scale(alpha);
        }
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: S, other: &Self) {
        assert_eq!(self.grads.len(), other.grads.len());
        for (a, b) in self.grads.iter_mut().zip(other.grads.iter()) {
            a.axpy(alpha, b);
        }
    }
}

/// Node handle inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op<S: Scalar> {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `y = mul * x + add`; only the slope matters on the way back.
    ScaleAdd { x: NodeId, mul: S },
    MatVec { w: NodeId, x: NodeId },
    Sigmoid(NodeId),
    Tanh(NodeId),
    Concat(NodeId, NodeId),
    Dot(NodeId, NodeId),
    Softmax(NodeId),
    /// `-log softmax(logits)[target]`.
    CrossEntropy { logits: NodeId, target: usize },
    /// `KL(p || softmax(logits))` for a fixed target distribution `p`.
    KlFromLogits { logits: NodeId, target: Tensor<S> },
    QuadDeconv { input: NodeId, kernel: NodeId },
    /// The channel fiber `input[row, col, :]` of an `(s, s, c)` tensor.
    SliceVec { input: NodeId, row: usize, col: usize },
    /// Row `input[row, :]` of a matrix (embedding lookup).
    SliceRow { input: NodeId, row: usize },
    /// Contiguous subvector `input[start .. start + len]`.
    SliceRange {
        input: NodeId,
        start: usize,
        len: usize,
    },
    /// View an `(s, s, c)` map as its `(s*s, c)` matrix of channel fibers.
    FlattenMap(NodeId),
    /// `y = a w^T` for `a: (m, k)`, `w: (n, k)`; rows of `w` act on rows of
    /// `a`, so one node applies a layer to a whole matrix of encodings.
    MatMulT { a: NodeId, w: NodeId },
    /// Broadcast-add a row vector to every row of a matrix.
    AddRow { m: NodeId, b: NodeId },
    /// Stack scalar nodes into a vector.
    Gather(Vec<NodeId>),
    /// Sum of scalar nodes.
    SumN(Vec<NodeId>),
    /// `y = sum_i weights[i] * inputs[i]`, same-shaped inputs.
    WeightedSum { inputs: Vec<NodeId>, weights: Vec<S> },
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    param: Option<ParamId>,
}

/// Append-only computation graph with eager forward values.
pub struct Graph<S: Scalar = f64> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, param: Option<ParamId>) -> NodeId {
        self.nodes.push(Node { value, op, param });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, None)
    }

    /// Instantiate a parameter as a leaf; its gradient is keyed by the id.
    pub fn param(&mut self, store: &ParamStore<S>, id: ParamId) -> NodeId {
        self.push(store.get(id).clone(), Op::Leaf, Some(id))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(Error::Dimension(format!(
                "add {:?} + {:?}",
                va.dims(),
                vb.dims()
            )));
        }
        let mut out = va.clone();
        out.axpy(S::one(), vb);
        Ok(self.push(out, Op::Add(a, b), None))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if !va.same_shape(vb) {
            return Err(Error::Dimension(format!(
                "mul {:?} * {:?}",
                va.dims(),
                vb.dims()
            )));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(x, y)| *x * *y)
            .collect();
        let out = Tensor::from_vec(va.dims(), data);
        Ok(self.push(out, Op::Mul(a, b), None))
    }

    pub fn scale_add(&mut self, x: NodeId, mul: S, add: S) -> NodeId {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|v| mul * *v + add)
            .collect();
        let out = Tensor::from_vec(self.value(x).dims(), data);
        self.push(out, Op::ScaleAdd { x, mul }, None)
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, x: NodeId) -> NodeId {
        self.scale_add(x, -S::one(), S::one())
    }

    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let out = tensor::matvec(self.value(w), self.value(x))?;
        Ok(self.push(out, Op::MatVec { w, x }, None))
    }

    /// `W x + b`.
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId> {
        let wx = self.matvec(w, x)?;
        self.add(wx, b)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|v| tensor::sigmoid(*v))
            .collect();
        let out = Tensor::from_vec(self.value(x).dims(), data);
        self.push(out, Op::Sigmoid(x), None)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let data = self.value(x).data().iter().map(|v| v.tanh()).collect();
        let out = Tensor::from_vec(self.value(x).dims(), data);
        self.push(out, Op::Tanh(x), None)
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = tensor::concat(self.value(a), self.value(b));
        self.push(out, Op::Concat(a, b), None)
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::dot(self.value(a), self.value(b))?;
        Ok(self.push(Tensor::scalar(v), Op::Dot(a, b), None))
    }

    pub fn softmax(&mut self, logits: NodeId) -> NodeId {
        let out = Tensor::from_vec(
            self.value(logits).dims(),
            tensor::softmax(self.value(logits).data()),
        );
        self.push(out, Op::Softmax(logits), None)
    }

    /// `-log softmax(logits)[target]`, computed via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: NodeId, target: usize) -> Result<NodeId> {
        let v = self.value(logits);
        if target >= v.len() {
            return Err(Error::Range(format!(
                "cross-entropy target {target} out of {} classes",
                v.len()
            )));
        }
        let loss = tensor::log_sum_exp(v.data()) - v.data()[target];
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy { logits, target },
            None,
        ))
    }

    /// `KL(p || softmax(logits))` against a fixed distribution `p`.
    pub fn kl_from_logits(&mut self, target: Tensor<S>, logits: NodeId) -> Result<NodeId> {
        let v = self.value(logits);
        if v.len() != target.len() {
            return Err(Error::Dimension(format!(
                "kl target {} vs {} logits",
                target.len(),
                v.len()
            )));
        }
        let lse = tensor::log_sum_exp(v.data());
        let mut loss = S::zero();
        for (p, logit) in target.data().iter().zip(v.data()) {
            if *p > S::zero() {
                loss += *p * (p.ln() - (*logit - lse));
            }
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::KlFromLogits { logits, target },
            None,
        ))
    }

    /// Stride-2 transposed convolution: `(s, s, c_in)` -> `(2s, 2s, c_out)`.
    pub fn quad_deconv(&mut self, input: NodeId, kernel: NodeId) -> Result<NodeId> {
        let out = quad_deconv_forward(self.value(input), self.value(kernel))?;
        Ok(self.push(out, Op::QuadDeconv { input, kernel }, None))
    }

    /// Channel fiber `input[row, col, :]` of an `(s, s, c)` tensor.
    pub fn slice_vec(&mut self, input: NodeId, row: usize, col: usize) -> Result<NodeId> {
        let v = self.value(input);
        if v.shape().ndim() != 3 {
            return Err(Error::Dimension(format!(
                "slice_vec needs 3 axes, got {:?}",
                v.dims()
            )));
        }
        let (s0, s1, c) = (v.dims()[0], v.dims()[1], v.dims()[2]);
        if row >= s0 || col >= s1 {
            return Err(Error::Range(format!("slice_vec ({row}, {col}) out of {s0}x{s1}")));
        }
        let base = (row * s1 + col) * c;
        let data = v.data()[base..base + c].to_vec();
        Ok(self.push(
            Tensor::from_vec(&[c], data),
            Op::SliceVec { input, row, col },
            None,
        ))
    }

    /// Row `input[row, :]` of a matrix node (embedding lookup).
    pub fn slice_row(&mut self, input: NodeId, row: usize) -> Result<NodeId> {
        let v = self.value(input);
        if v.shape().ndim() != 2 {
            return Err(Error::Dimension(format!(
                "slice_row needs 2 axes, got {:?}",
                v.dims()
            )));
        }
        let (rows, cols) = (v.dims()[0], v.dims()[1]);
        if row >= rows {
            return Err(Error::Range(format!("slice_row {row} out of {rows} rows")));
        }
        let data = v.data()[row * cols..(row + 1) * cols].to_vec();
        Ok(self.push(
            Tensor::from_vec(&[cols], data),
            Op::SliceRow { input, row },
            None,
        ))
    }

    /// Contiguous subvector of a vector node.
    pub fn slice_range(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(input);
        if v.shape().ndim() != 1 || start + len > v.len() {
            return Err(Error::Range(format!(
                "slice_range [{start}, {}) of {:?}",
                start + len,
                v.dims()
            )));
        }
        let data = v.data()[start..start + len].to_vec();
        Ok(self.push(
            Tensor::from_vec(&[len], data),
            Op::SliceRange { input, start, len },
            None,
        ))
    }

    /// Reinterpret an `(s, s, c)` map as the `(s*s, c)` matrix whose rows
    /// are the channel fibers in row-major cell order (a pure reshape).
    pub fn flatten_map(&mut self, input: NodeId) -> Result<NodeId> {
        let v = self.value(input);
        if v.shape().ndim() != 3 {
            return Err(Error::Dimension(format!(
                "flatten_map needs 3 axes, got {:?}",
                v.dims()
            )));
        }
        let (s0, s1, c) = (v.dims()[0], v.dims()[1], v.dims()[2]);
        let out = Tensor::from_vec(&[s0 * s1, c], v.data().to_vec());
        Ok(self.push(out, Op::FlattenMap(input), None))
    }

    /// `a w^T` for `a: (m, k)` and `w: (n, k)`: applies the layer `w` to
    /// every row of `a` in one node.
    pub fn matmul_t(&mut self, a: NodeId, w: NodeId) -> Result<NodeId> {
        let (va, vw) = (self.value(a), self.value(w));
        if va.shape().ndim() != 2 || vw.shape().ndim() != 2 || va.dims()[1] != vw.dims()[1] {
            return Err(Error::Dimension(format!(
                "matmul_t {:?} x {:?}^T",
                va.dims(),
                vw.dims()
            )));
        }
        let (m, k) = (va.dims()[0], va.dims()[1]);
        let n = vw.dims()[0];
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &va.data()[i * k..(i + 1) * k];
            for j in 0..n {
                let wrow = &vw.data()[j * k..(j + 1) * k];
                let mut acc = S::zero();
                for (x, y) in row.iter().zip(wrow) {
                    acc += *x * *y;
                }
                out[i * n + j] = acc;
            }
        }
        Ok(self.push(
            Tensor::from_vec(&[m, n], out),
            Op::MatMulT { a, w },
            None,
        ))
    }

    /// Broadcast-add a row vector to every row of a matrix.
    pub fn add_row(&mut self, m: NodeId, b: NodeId) -> Result<NodeId> {
        let (vm, vb) = (self.value(m), self.value(b));
        if vm.shape().ndim() != 2 || vb.shape().ndim() != 1 || vm.dims()[1] != vb.dims()[0] {
            return Err(Error::Dimension(format!(
                "add_row {:?} + {:?}",
                vm.dims(),
                vb.dims()
            )));
        }
        let cols = vb.len();
        let mut out = vm.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += vb.data()[i % cols];
        }
        Ok(self.push(out, Op::AddRow { m, b }, None))
    }

    /// Stack scalar nodes into one vector node.
    pub fn gather(&mut self, scalars: &[NodeId]) -> Result<NodeId> {
        let mut data = Vec::with_capacity(scalars.len());
        for &id in scalars {
            let v = self.value(id);
            if v.len() != 1 {
                return Err(Error::Dimension("gather expects scalar nodes".into()));
            }
            data.push(v.item());
        }
        Ok(self.push(
            Tensor::from_vec(&[data.len()], data),
            Op::Gather(scalars.to_vec()),
            None,
        ))
    }

    /// Sum scalar nodes.
    pub fn sum(&mut self, terms: &[NodeId]) -> Result<NodeId> {
        let mut total = S::zero();
        for &id in terms {
            let v = self.value(id);
            if v.len() != 1 {
                return Err(Error::Dimension("sum expects scalar nodes".into()));
            }
            total += v.item();
        }
        Ok(self.push(Tensor::scalar(total), Op::SumN(terms.to_vec()), None))
    }

    /// `sum_i weights[i] * inputs[i]` over same-shaped inputs.
    pub fn weighted_sum(&mut self, inputs: &[NodeId], weights: &[S]) -> Result<NodeId> {
        if inputs.is_empty() || inputs.len() != weights.len() {
            return Err(Error::Dimension("weighted_sum arity mismatch".into()));
        }
        let mut out = Tensor::zeros(self.value(inputs[0]).dims());
        for (&id, &w) in inputs.iter().zip(weights) {
            if !out.same_shape(self.value(id)) {
                return Err(Error::Dimension("weighted_sum shape mismatch".into()));
            }
            out.axpy(w, self.value(id));
        }
        Ok(self.push(
            out,
            Op::WeightedSum {
                inputs: inputs.to_vec(),
                weights: weights.to_vec(),
            },
            None,
        ))
    }

    /// Reverse sweep from a scalar loss node; returns gradients accumulated
    /// per parameter of `store`.
    pub fn backward(&self, loss: NodeId, store: &ParamStore<S>) -> GradientSet<S> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut adjoint: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        adjoint[loss.0] = Some(Tensor::scalar(S::one()));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = adjoint[idx].take() else {
                continue;
            };
            self.propagate(idx, &dy, &mut adjoint);
            adjoint[idx] = Some(dy);
        }

        let mut grads = GradientSet::zeros_like(store);
        for (idx, node) in self.nodes.iter().enumerate() {
            if let (Some(pid), Some(adj)) = (node.param, adjoint[idx].as_ref()) {
                grads.grad_mut(pid).axpy(S::one(), adj);
            }
        }
        grads
    }

    fn accumulate(adjoint: &mut [Option<Tensor<S>>], id: NodeId, delta: Tensor<S>) {
        match adjoint[id.0].as_mut() {
            Some(existing) => existing.axpy(S::one(), &delta),
            None => adjoint[id.0] = Some(delta),
        }
    }

    fn propagate(&self, idx: usize, dy: &Tensor<S>, adjoint: &mut [Option<Tensor<S>>]) {
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                Self::accumulate(adjoint, *a, dy.clone());
                Self::accumulate(adjoint, *b, dy.clone());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let da = Tensor::from_vec(
                    dy.dims(),
                    dy.data().iter().zip(vb.data()).map(|(d, v)| *d * *v).collect(),
                );
                let db = Tensor::from_vec(
                    dy.dims(),
                    dy.data().iter().zip(va.data()).map(|(d, v)| *d * *v).collect(),
                );
                Self::accumulate(adjoint, *a, da);
                Self::accumulate(adjoint, *b, db);
            }
            Op::ScaleAdd { x, mul } => {
                let mut dx = dy.clone();
                dx.scale(*mul);
                Self::accumulate(adjoint, *x, dx);
            }
            Op::MatVec { w, x } => {
                let (vw, vx) = (self.value(*w), self.value(*x));
                let (m, n) = (vw.dims()[0], vw.dims()[1]);
                let mut dw = Tensor::zeros(&[m, n]);
                let mut dx = Tensor::zeros(&[n]);
                for i in 0..m {
                    let d = dy.data()[i];
                    for j in 0..n {
                        dw.data_mut()[i * n + j] += d * vx.data()[j];
                        dx.data_mut()[j] += d * vw.data()[i * n + j];
                    }
                }
                Self::accumulate(adjoint, *w, dw);
                Self::accumulate(adjoint, *x, dx);
            }
            Op::Sigmoid(x) => {
                let y = &self.nodes[idx].value;
                let dx = Tensor::from_vec(
                    dy.dims(),
                    dy.data()
                        .iter()
                        .zip(y.data())
                        .map(|(d, s)| *d * *s * (S::one() - *s))
                        .collect(),
                );
                Self::accumulate(adjoint, *x, dx);
            }
            Op::Tanh(x) => {
                let y = &self.nodes[idx].value;
                let dx = Tensor::from_vec(
                    dy.dims(),
                    dy.data()
                        .iter()
                        .zip(y.data())
                        .map(|(d, t)| *d * (S::one() - *t * *t))
                        .collect(),
                );
                Self::accumulate(adjoint, *x, dx);
            }
            Op::Concat(a, b) => {
                let na = self.value(*a).len();
                let da = Tensor::from_vec(&[na], dy.data()[..na].to_vec());
                let db = Tensor::from_vec(&[dy.len() - na], dy.data()[na..].to_vec());
                Self::accumulate(adjoint, *a, da);
                Self::accumulate(adjoint, *b, db);
            }
            Op::Dot(a, b) => {
                let d = dy.item();
                let mut da = self.value(*b).clone();
                da.scale(d);
                let mut db = self.value(*a).clone();
                db.scale(d);
                Self::accumulate(adjoint, *a, da);
                Self::accumulate(adjoint, *b, db);
            }
            Op::Softmax(x) => {
                let p = &self.nodes[idx].value;
                let inner: S = dy.data().iter().zip(p.data()).map(|(d, pi)| *d * *pi).sum();
                let dx = Tensor::from_vec(
                    dy.dims(),
                    dy.data()
                        .iter()
                        .zip(p.data())
                        .map(|(d, pi)| *pi * (*d - inner))
                        .collect(),
                );
                Self::accumulate(adjoint, *x, dx);
            }
            Op::CrossEntropy { logits, target } => {
                let d = dy.item();
                let p = tensor::softmax(self.value(*logits).data());
                let mut dx = Tensor::from_vec(&[p.len()], p);
                dx.data_mut()[*target] -= S::one();
                dx.scale(d);
                Self::accumulate(adjoint, *logits, dx);
            }
            Op::KlFromLogits { logits, target } => {
                let d = dy.item();
                let p = tensor::softmax(self.value(*logits).data());
                let dx = Tensor::from_vec(
                    &[p.len()],
                    p.iter()
                        .zip(target.data())
                        .map(|(model, tgt)| d * (*model - *tgt))
                        .collect(),
                );
                Self::accumulate(adjoint, *logits, dx);
            }
            Op::QuadDeconv { input, kernel } => {
                let (din, dker) = quad_deconv_backward(self.value(*input), self.value(*kernel), dy);
                Self::accumulate(adjoint, *input, din);
                Self::accumulate(adjoint, *kernel, dker);
            }
            Op::SliceVec { input, row, col } => {
                let v = self.value(*input);
                let (s1, c) = (v.dims()[1], v.dims()[2]);
                let mut dx = Tensor::zeros(v.dims());
                let base = (row * s1 + col) * c;
                dx.data_mut()[base..base + c].copy_from_slice(dy.data());
                Self::accumulate(adjoint, *input, dx);
            }
            Op::SliceRow { input, row } => {
                let v = self.value(*input);
                let cols = v.dims()[1];
                let mut dx = Tensor::zeros(v.dims());
                dx.data_mut()[row * cols..(row + 1) * cols].copy_from_slice(dy.data());
                Self::accumulate(adjoint, *input, dx);
            }
            Op::SliceRange { input, start, len } => {
                let v = self.value(*input);
                let mut dx = Tensor::zeros(v.dims());
                dx.data_mut()[*start..start + len].copy_from_slice(dy.data());
                Self::accumulate(adjoint, *input, dx);
            }
            Op::FlattenMap(input) => {
                let dx = Tensor::from_vec(self.value(*input).dims(), dy.data().to_vec());
                Self::accumulate(adjoint, *input, dx);
            }
            Op::MatMulT { a, w } => {
                let (va, vw) = (self.value(*a), self.value(*w));
                let (m, k) = (va.dims()[0], va.dims()[1]);
                let n = vw.dims()[0];
                // da = dy w; dw = dy^T a.
                let mut da = Tensor::zeros(&[m, k]);
                let mut dw = Tensor::zeros(&[n, k]);
                for i in 0..m {
                    for j in 0..n {
                        let d = dy.data()[i * n + j];
                        if d == S::zero() {
                            continue;
                        }
                        let wrow = &vw.data()[j * k..(j + 1) * k];
                        let arow = &va.data()[i * k..(i + 1) * k];
                        let da_row = &mut da.data_mut()[i * k..(i + 1) * k];
                        for (dst, src) in da_row.iter_mut().zip(wrow) {
                            *dst += d * *src;
                        }
                        let dw_row = &mut dw.data_mut()[j * k..(j + 1) * k];
                        for (dst, src) in dw_row.iter_mut().zip(arow) {
                            *dst += d * *src;
                        }
                    }
                }
                Self::accumulate(adjoint, *a, da);
                Self::accumulate(adjoint, *w, dw);
            }
            Op::AddRow { m, b } => {
                let cols = self.value(*b).len();
                Self::accumulate(adjoint, *m, dy.clone());
                let mut db = Tensor::zeros(&[cols]);
                for (i, v) in dy.data().iter().enumerate() {
                    db.data_mut()[i % cols] += *v;
                }
                Self::accumulate(adjoint, *b, db);
            }
            Op::Gather(ids) => {
                for (k, &id) in ids.iter().enumerate() {
                    Self::accumulate(adjoint, id, Tensor::scalar(dy.data()[k]));
                }
            }
            Op::SumN(ids) => {
                for &id in ids {
                    Self::accumulate(adjoint, id, dy.clone());
                }
            }
            Op::WeightedSum { inputs, weights } => {
                for (&id, &w) in inputs.iter().zip(weights) {
                    let mut dx = dy.clone();
                    dx.scale(w);
                    Self::accumulate(adjoint, id, dx);
                }
            }
        }
    }
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// One 2D quad deconvolution layer's kernel, shape `(c_out, 2, 2, c_in)`.
#[derive(Debug, Clone)]
pub struct DeconvKernel<S: Scalar = f64>(Tensor<S>);

impl<S: Scalar> DeconvKernel<S> {
    pub fn new(tensor: Tensor<S>) -> Result<Self> {
        let d = tensor.dims();
        if tensor.shape().ndim() != 4 || d[1] != 2 || d[2] != 2 {
            return Err(Error::Dimension(format!(
                "deconv kernel must be (c_out, 2, 2, c_in), got {d:?}"
            )));
        }
        Ok(DeconvKernel(tensor))
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor<S> {
        self.0
    }
}

/// Forward 2D quad deconvolution:
/// `out[2x+dx, 2y+dy, k] = sum_k' kernel[k, dx, dy, k'] * input[x, y, k']`.
pub fn quad_deconv_forward<S: Scalar>(input: &Tensor<S>, kernel: &Tensor<S>) -> Result<Tensor<S>> {
    if input.shape().ndim() != 3 {
        return Err(Error::Dimension(format!(
            "deconv input needs 3 axes, got {:?}",
            input.dims()
        )));
    }
    if kernel.shape().ndim() != 4 || kernel.dims()[1] != 2 || kernel.dims()[2] != 2 {
        return Err(Error::Dimension(format!(
            "deconv kernel must be (c_out, 2, 2, c_in), got {:?}",
            kernel.dims()
        )));
    }
    let (s0, s1, c_in) = (input.dims()[0], input.dims()[1], input.dims()[2]);
    let (c_out, k_in) = (kernel.dims()[0], kernel.dims()[3]);
    if s0 != s1 || c_in != k_in {
        return Err(Error::Dimension(format!(
            "deconv shapes: input {:?} vs kernel {:?}",
            input.dims(),
            kernel.dims()
        )));
    }
    let s = s0;
    let mut out = Tensor::zeros(&[2 * s, 2 * s, c_out]);
    for x in 0..s {
        for y in 0..s {
            let in_base = (x * s + y) * c_in;
            let fiber = &input.data()[in_base..in_base + c_in];
            for dx in 0..2 {
                for dy in 0..2 {
                    let out_base = ((2 * x + dx) * 2 * s + (2 * y + dy)) * c_out;
                    for k in 0..c_out {
                        let ker_base = ((k * 2 + dx) * 2 + dy) * c_in;
                        let krow = &kernel.data()[ker_base..ker_base + c_in];
                        let mut acc = S::zero();
                        for (kv, iv) in krow.iter().zip(fiber) {
                            acc += *kv * *iv;
                        }
                        out.data_mut()[out_base + k] = acc;
                    }
                }
            }
        }
    }
    Ok(out)
}

fn quad_deconv_backward<S: Scalar>(
    input: &Tensor<S>,
    kernel: &Tensor<S>,
    dy: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let (s, c_in) = (input.dims()[0], input.dims()[2]);
    let c_out = kernel.dims()[0];
    let mut din = Tensor::zeros(input.dims());
    let mut dker = Tensor::zeros(kernel.dims());
    for x in 0..s {
        for y in 0..s {
            let in_base = (x * s + y) * c_in;
            for dx in 0..2 {
                for dy_ in 0..2 {
                    let out_base = ((2 * x + dx) * 2 * s + (2 * y + dy_)) * c_out;
                    for k in 0..c_out {
                        let d = dy.data()[out_base + k];
                        if d == S::zero() {
                            continue;
                        }
                        let ker_base = ((k * 2 + dx) * 2 + dy_) * c_in;
                        for kp in 0..c_in {
                            din.data_mut()[in_base + kp] += d * kernel.data()[ker_base + kp];
                            dker.data_mut()[ker_base + kp] += d * input.data()[in_base + kp];
                        }
                    }
                }
            }
        }
    }
    (din, dker)
}

/// Weight node ids for one GRU cell inside a graph.
#[derive(Debug, Clone, Copy)]
pub struct GruCellNodes {
    pub w_update: NodeId,
    pub u_update: NodeId,
    pub b_update: NodeId,
    pub w_reset: NodeId,
    pub u_reset: NodeId,
    pub b_reset: NodeId,
    pub w_cand: NodeId,
    pub u_cand: NodeId,
    pub b_cand: NodeId,
}

/// Standard GRU cell:
/// `z = sigmoid(Wz x + Uz h + bz)`, `r = sigmoid(Wr x + Ur h + br)`,
/// `c = tanh(Wc x + Uc (r . h) + bc)`, `h' = (1 - z) . h + z . c`.
pub fn gru_cell<S: Scalar>(
    g: &mut Graph<S>,
    weights: &GruCellNodes,
    h_prev: NodeId,
    x: NodeId,
) -> Result<NodeId> {
    let zx = g.matvec(weights.w_update, x)?;
    let zh = g.matvec(weights.u_update, h_prev)?;
    let zs = g.add(zx, zh)?;
    let zs = g.add(zs, weights.b_update)?;
    let z = g.sigmoid(zs);

    let rx = g.matvec(weights.w_reset, x)?;
    let rh = g.matvec(weights.u_reset, h_prev)?;
    let rs = g.add(rx, rh)?;
    let rs = g.add(rs, weights.b_reset)?;
    let r = g.sigmoid(rs);

    let gated = g.mul(r, h_prev)?;
    let cx = g.matvec(weights.w_cand, x)?;
    let ch = g.matvec(weights.u_cand, gated)?;
    let cs = g.add(cx, ch)?;
    let cs = g.add(cs, weights.b_cand)?;
    let cand = g.tanh(cs);

    let keep = g.one_minus(z);
    let kept = g.mul(keep, h_prev)?;
    let new = g.mul(z, cand)?;
    g.add(kept, new)
}

/// `sum_i p_i log(p_i / q_i)` with `0 log 0 = 0`; infinite when `q` lacks
/// support somewhere `p` has mass.
pub fn kl_div<S: Scalar>(p: &[S], q: &[S]) -> S {
    assert_eq!(p.len(), q.len(), "kl_div support mismatch");
    let mut total = S::zero();
    for (pi, qi) in p.iter().zip(q) {
        if *pi > S::zero() {
            if *qi <= S::zero() {
                return S::infinity();
            }
            total += *pi * (*pi / *qi).ln();
        }
    }
    total
}

/// `-log softmax(logits)[target]` as plain math.
pub fn cross_entropy_logits<S: Scalar>(logits: &[S], target: usize) -> S {
    tensor::log_sum_exp(logits) - logits[target]
}

/// Check a probability vector: nonnegative entries summing to 1 within 1e-9.
pub fn validate_distribution<S: Scalar>(p: &[S]) -> Result<()> {
    if p.iter().any(|x| *x < S::zero()) {
        return Err(Error::Range("negative probability".into()));
    }
    let total = p.iter().copied().sum::<S>().to_f64_lossy();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Range(format!("distribution sums to {total}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests;
