//! Dense `f64` tensors and an eager reverse-mode differentiation graph.
//!
//! A [`Graph`] records every operation as it is applied, storing the
//! operation kind, the ids of its inputs and the computed value. Nodes are
//! appended in topological order, so a backward sweep is a reverse walk over
//! the node list. Graphs are cheap to build and are meant to be thrown away
//! after each forward/backward pair.
//!
//! Broadcasting is deliberately absent: apart from [`Graph::scale`], every
//! binary operation requires identical shapes. Use [`Graph::tile`] or
//! [`Graph::expand_last`] to make a repetition explicit.
//!
//! ```
//! use nrsfm_core::tensor::{Graph, Tensor};
//!
//! let mut g = Graph::new();
//! let a = g.input("a", Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap().with_grad()).unwrap();
//! let loss = g.frob_sq(a).unwrap();
//! assert_eq!(g.value(loss).item(), 30.0);
//! let grads = g.backward(loss).unwrap();
//! assert_eq!(grads.get("a").unwrap().data(), &[2.0, 4.0, 6.0, 8.0]);
//! ```

pub mod check;
mod kernels;

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("non-finite entry in input `{name}`")]
    NonFiniteInput { name: String },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("unknown input `{0}`")]
    UnknownInput(String),
    #[error("duplicate input name `{0}`")]
    DuplicateInput(String),
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadData { shape: Vec<usize>, len: usize },
}

type Result<T> = std::result::Result<T, TensorError>;

/// Row-major dense tensor of `f64`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("data", &self.data)
            .field("requires_grad", &self.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::BadData {
                shape,
                len: data.len(),
            });
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.data.iter_mut().for_each(|x| *x = value);
        t
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
        }
    }

    /// Identity matrix of size `n`.
    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros([n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    /// Marks the tensor as trainable when bound into a graph.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Value of a single-element tensor.
    ///
    /// Panics if the tensor holds more than one element.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Handle to a node inside a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    /// Tanh approximation of GELU.
    Gelu,
    /// Square root; the derivative is taken as zero at the origin.
    Sqrt,
    Rsqrt,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf { name: Option<String> },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    MatMul(NodeId, NodeId),
    Permute(NodeId, Vec<usize>),
    Reshape(NodeId, Vec<usize>),
    Slice {
        input: NodeId,
        axis: usize,
        start: usize,
        end: usize,
    },
    Concat(Vec<NodeId>, usize),
    Tile(NodeId, usize),
    ExpandLast(NodeId, usize),
    Sum(NodeId),
    SumLast(NodeId),
    FrobSq(NodeId),
    Softmax(NodeId),
    LayerNorm(NodeId),
    Unary(NodeId, Unary),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul(..) => "matmul",
            Op::Permute(..) => "permute",
            Op::Reshape(..) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Concat(..) => "concat",
            Op::Tile(..) => "tile",
            Op::ExpandLast(..) => "expand_last",
            Op::Sum(..) => "sum",
            Op::SumLast(..) => "sum_last",
            Op::FrobSq(..) => "frob_sq",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm(..) => "layer_norm",
            Op::Unary(_, Unary::Gelu) => "gelu",
            Op::Unary(_, Unary::Sqrt) => "sqrt",
            Op::Unary(_, Unary::Rsqrt) => "rsqrt",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf { .. } => Vec::new(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Concat(xs, _) => xs.clone(),
            Op::Scale(a, _)
            | Op::Permute(a, _)
            | Op::Reshape(a, _)
            | Op::Tile(a, _)
            | Op::ExpandLast(a, _)
            | Op::Sum(a)
            | Op::SumLast(a)
            | Op::FrobSq(a)
            | Op::Softmax(a)
            | Op::LayerNorm(a)
            | Op::Unary(a, _) => vec![*a],
            Op::Slice { input, .. } => vec![*input],
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Eagerly evaluated computation graph.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    names: HashMap<String, NodeId>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    named: HashMap<String, Tensor>,
    by_node: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named.get(name)
    }

    /// Gradient with respect to a trainable leaf, named or not.
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(&id.0)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.named.keys().map(String::as_str)
    }

    /// Drops a named gradient so optimizers leave that tensor untouched.
    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.named.remove(name)
    }

    pub fn into_named(self) -> HashMap<String, Tensor> {
        self.named
    }
}

/// Layer-norm epsilon used by [`Graph::layer_norm`].
pub const LAYER_NORM_EPS: f64 = 1e-5;

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

    /// Looks up a named input.
    pub fn lookup(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    /// Binds a named leaf. It receives a gradient iff `tensor.requires_grad()`.
    pub fn input(&mut self, name: &str, tensor: Tensor) -> Result<NodeId> {
        if self.names.contains_key(name) {
            return Err(TensorError::DuplicateInput(name.to_string()));
        }
        if !tensor.is_finite() {
            return Err(TensorError::NonFiniteInput {
                name: name.to_string(),
            });
        }
        let needs_grad = tensor.requires_grad;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf {
                name: Some(name.to_string()),
            },
            value: tensor,
            needs_grad,
        });
        self.names.insert(name.to_string(), id);
        Ok(id)
    }

    /// Unnamed, non-trainable leaf.
    pub fn constant(&mut self, mut tensor: Tensor) -> Result<NodeId> {
        if !tensor.is_finite() {
            return Err(TensorError::NonFiniteInput {
                name: format!("<constant #{}>", self.nodes.len()),
            });
        }
        tensor.requires_grad = false;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf { name: None },
            value: tensor,
            needs_grad: false,
        });
        Ok(id)
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let index = self.nodes.len();
        let value = {
            let inputs: Vec<&Tensor> = op.inputs().iter().map(|i| &self.nodes[i.0].value).collect();
            kernels::forward(&op, &inputs, index)?
        };
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                node: index,
                op: op.kind(),
            });
        }
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(NodeId(index))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    /// Scalar-times-tensor, the only broadcasting operation.
    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, c))
    }

    /// `[n,k] x [k,m]`, or batched `[b,n,k] x [b,k,m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, b))
    }

    pub fn permute(&mut self, a: NodeId, axes: &[usize]) -> Result<NodeId> {
        self.push(Op::Permute(a, axes.to_vec()))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let rank = self.value(a).shape.len();
        if rank < 2 {
            return Err(TensorError::ShapeMismatch {
                node: self.nodes.len(),
                op: "permute",
                detail: format!("transpose needs rank >= 2, got {rank}"),
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(a, &axes)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Reshape(a, shape.to_vec()))
    }

    /// Half-open range `start..end` along `axis`.
    pub fn slice(&mut self, a: NodeId, axis: usize, start: usize, end: usize) -> Result<NodeId> {
        self.push(Op::Slice {
            input: a,
            axis,
            start,
            end,
        })
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.push(Op::Concat(xs.to_vec(), axis))
    }

    /// Repeats `a` `n` times along a new leading axis.
    pub fn tile(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        self.push(Op::Tile(a, n))
    }

    /// Repeats `a` `k` times along a new trailing axis.
    pub fn expand_last(&mut self, a: NodeId, k: usize) -> Result<NodeId> {
        self.push(Op::ExpandLast(a, k))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Sum(a))
    }

    /// Reduces the last axis.
    pub fn sum_last(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::SumLast(a))
    }

    /// Squared Frobenius norm.
    pub fn frob_sq(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::FrobSq(a))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(a))
    }

    /// Normalizes the last axis to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::LayerNorm(a))
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Unary(a, Unary::Gelu))
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Unary(a, Unary::Sqrt))
    }

    pub fn rsqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.push(Op::Unary(a, Unary::Rsqrt))
    }

    /// `x w + b` for `x: [n,d]`, `w: [d,k]`, `b: [k]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let n = self.value(x).shape.first().copied().unwrap_or(0);
        let xw = self.matmul(x, w)?;
        let bias = self.tile(b, n)?;
        self.add(xw, bias)
    }

    /// Re-runs the recorded operations up to `root`, substituting the given
    /// named inputs. Unlisted inputs keep the value they were bound with.
    pub fn evaluate(&self, root: NodeId, inputs: &HashMap<String, Tensor>) -> Result<Tensor> {
        for name in inputs.keys() {
            if !self.names.contains_key(name) {
                return Err(TensorError::UnknownInput(name.clone()));
            }
        }
        let mut values: Vec<Tensor> = Vec::with_capacity(root.0 + 1);
        for (index, node) in self.nodes[..=root.0].iter().enumerate() {
            let value = match &node.op {
                Op::Leaf { name: Some(name) } => match inputs.get(name) {
                    Some(t) => {
                        if !t.is_finite() {
                            return Err(TensorError::NonFiniteInput { name: name.clone() });
                        }
                        t.clone()
                    }
                    None => node.value.clone(),
                },
                Op::Leaf { name: None } => node.value.clone(),
                op => {
                    let ins: Vec<&Tensor> = op.inputs().iter().map(|i| &values[i.0]).collect();
                    let v = kernels::forward(op, &ins, index)?;
                    if !v.is_finite() {
                        return Err(TensorError::NonFinite {
                            node: index,
                            op: op.kind(),
                        });
                    }
                    v
                }
            };
            values.push(value);
        }
        Ok(values.pop().expect("root exists"))
    }

    /// Reverse sweep from a scalar root. Every trainable leaf gets an entry,
    /// zero-filled when it does not influence the root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let root_value = &self.nodes[root.0].value;
        if root_value.numel() != 1 {
            return Err(TensorError::NotScalar(root_value.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(root_value.shape.clone(), 1.0));

        for index in (0..=root.0).rev() {
            let node = &self.nodes[index];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf { .. } = node.op {
                continue;
            }
            let Some(g) = grads[index].take() else { continue };
            let input_ids = node.op.inputs();
            let ins: Vec<&Tensor> = input_ids.iter().map(|i| &self.nodes[i.0].value).collect();
            let input_grads = kernels::backward(&node.op, &ins, &node.value, &g);
            for (id, ig) in input_ids.iter().zip(input_grads) {
                if !self.nodes[id.0].needs_grad {
                    continue;
                }
                match &mut grads[id.0] {
                    Some(acc) => acc.data.iter_mut().zip(&ig.data).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
            // Keep leaf gradients; interior ones are dropped after use.
        }

        let mut named = HashMap::new();
        let mut by_node = HashMap::new();
        for (index, node) in self.nodes.iter().enumerate() {
            if let Op::Leaf { name } = &node.op {
                if !node.value.requires_grad {
                    continue;
                }
                let g = grads
                    .get_mut(index)
                    .and_then(Option::take)
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape.clone()));
                if let Some(name) = name {
                    named.insert(name.clone(), g.clone());
                }
                by_node.insert(index, g);
            }
        }
        Ok(Gradients { named, by_node })
    }
}

#[cfg(test)]
mod tests;
