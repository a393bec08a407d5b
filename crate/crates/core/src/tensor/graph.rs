//! Tape-style reverse-mode autodiff.
//!
//! Nodes are appended in creation order, which is a topological order, so the
//! backward pass is a single reverse sweep. Gradients of view nodes (slices,
//! transposes, reshapes) are themselves views into the parent's gradient
//! buffer: a matmul against a sliced weight accumulates straight into the
//! matching window of the parameter's dense gradient.

use super::counters;
use super::dense::Tensor;
use super::element::Element;
use super::param::{ParamId, Parameter, Region};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op<T: Element> {
    Leaf,
    Param,
    Slice { src: Var, axis: usize, start: usize, width: usize },
    Transpose { src: Var },
    Reshape { src: Var },
    Linear { x: Var, w: Var, b: Option<Var>, scale: Option<Vec<T>> },
    MatMul { a: Var, b: Var, alpha: T },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: T },
    ScaleAxis { x: Var, axis: usize, factors: Vec<T> },
    MaskMul { x: Var, mask: Vec<T> },
    Relu { x: Var },
    Softmax { x: Var },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<T> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Conv2d { x: Var, k: Var, stride: usize, pad: usize },
    Gather { src: Var, picks: Vec<Option<Vec<usize>>> },
    Sum { x: Var },
    Mean { x: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
}

impl<T: Element> Op<T> {
    pub(crate) fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param => vec![],
            Op::Slice { src, .. } | Op::Transpose { src } | Op::Reshape { src } => vec![*src],
            Op::Gather { src, .. } => vec![*src],
            Op::Linear { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Scale { x, .. }
            | Op::ScaleAxis { x, .. }
            | Op::MaskMul { x, .. }
            | Op::Relu { x }
            | Op::Softmax { x }
            | Op::Sum { x }
            | Op::Mean { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::BatchNorm { x, gamma, beta, .. } | Op::LayerNorm { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::Conv2d { x, k, .. } => vec![*x, *k],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }

    fn is_view(&self) -> bool {
        matches!(self, Op::Slice { .. } | Op::Transpose { .. } | Op::Reshape { .. })
    }

    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Slice { .. } => "slice",
            Op::Transpose { .. } => "transpose",
            Op::Reshape { .. } => "reshape",
            Op::Linear { .. } => "linear",
            Op::MatMul { .. } => "matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::ScaleAxis { .. } => "scale_axis",
            Op::MaskMul { .. } => "mask_mul",
            Op::Relu { .. } => "relu",
            Op::Softmax { .. } => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::BatchNorm { .. } => "batch_norm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv2d { .. } => "conv2d",
            Op::Gather { .. } => "gather",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Concat { .. } => "concat",
        }
    }
}

/// Where a view node sits inside a parameter, in parameter coordinates.
#[derive(Clone, Debug)]
pub(crate) struct ParamView {
    pub param: ParamId,
    pub region: Region,
    /// `axes[i]` is the parameter axis backing node axis `i`.
    pub axes: Vec<usize>,
}

pub(crate) struct Node<T: Element> {
    pub op: Op<T>,
    pub value: Option<Tensor<T>>,
    pub shape: Vec<usize>,
    pub requires_grad: bool,
    pub act_bytes: usize,
    pub origin: Option<ParamView>,
}

pub struct Graph<T: Element = f64> {
    pub(crate) nodes: Vec<Node<T>>,
    pub(crate) grads: Vec<Option<Tensor<T>>>,
    touched: Vec<(ParamId, Region)>,
    backward_done: bool,
}

impl<T: Element> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new(), touched: Vec::new(), backward_done: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input (no gradient).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            op: Op::Leaf,
            value: Some(t),
            shape,
            requires_grad,
            act_bytes: 0,
            origin: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to a parameter: its gradient buffer is the parameter's
    /// dense gradient, so backward accumulates directly into it.
    pub fn param(&mut self, p: &Parameter<T>) -> Var {
        let shape = p.value.shape().to_vec();
        self.nodes.push(Node {
            op: Op::Param,
            value: Some(p.value.clone()),
            origin: Some(ParamView {
                param: p.id,
                region: Region::full(&shape),
                axes: (0..shape.len()).collect(),
            }),
            shape,
            requires_grad: true,
            act_bytes: 0,
        });
        self.grads.push(Some(p.grad.clone()));
        Var(self.nodes.len() - 1)
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.nodes[v.0]
            .value
            .as_ref()
            .unwrap_or_else(|| panic!("value of node {} was released by backward", v.0))
    }

    pub(crate) fn val(&self, v: Var) -> Tensor<T> {
        self.value(v).clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if any flowed to it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    /// Parameter regions consumed by ops in this graph, in recording order.
    pub fn touched_regions(&self) -> &[(ParamId, Region)] {
        &self.touched
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// Appends a computed node. `act_bytes` is charged to the activation
    /// gauge until the node is released during backward.
    pub(crate) fn push(&mut self, op: Op<T>, value: Tensor<T>, act_bytes: usize) -> Var {
        let inputs = op.inputs();
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let origin = if op.is_view() { self.view_origin(&op) } else { None };
        match &op {
            Op::Gather { src, picks } => {
                if let Some(o) = &self.nodes[src.0].origin {
                    let mut region = o.region.clone();
                    for (axis, pick) in picks.iter().enumerate() {
                        if let Some(idx) = pick {
                            let pa = o.axes[axis];
                            region.axes[pa] = region.axes[pa].pick(idx);
                        }
                    }
                    self.touched.push((o.param, region));
                }
            }
            Op::Reshape { src } => {
                // origin is dropped across reshapes, so charge the whole window now
                if let Some(o) = &self.nodes[src.0].origin {
                    self.touched.push((o.param, o.region.clone()));
                }
            }
            op if !op.is_view() => {
                for v in &inputs {
                    if let Some(o) = &self.nodes[v.0].origin {
                        self.touched.push((o.param, o.region.clone()));
                    }
                }
            }
            _ => {}
        }
        if act_bytes > 0 {
            counters::alloc_activation(act_bytes);
        }
        let shape = value.shape().to_vec();
        self.nodes.push(Node { op, value: Some(value), shape, requires_grad, act_bytes, origin });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn view_origin(&self, op: &Op<T>) -> Option<ParamView> {
        match op {
            Op::Slice { src, axis, start, width } => {
                let o = self.nodes[src.0].origin.as_ref()?;
                let mut region = o.region.clone();
                let pa = o.axes[*axis];
                region.axes[pa] = region.axes[pa].narrow(*start, *width);
                Some(ParamView { param: o.param, region, axes: o.axes.clone() })
            }
            Op::Transpose { src } => {
                let o = self.nodes[src.0].origin.as_ref()?;
                let mut axes = o.axes.clone();
                axes.swap(0, 1);
                Some(ParamView { param: o.param, region: o.region.clone(), axes })
            }
            _ => None,
        }
    }

    // ---- view ops -------------------------------------------------------

    /// Zero-copy slice of `width` entries along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, width: usize) -> Result<Var> {
        let view = self.value(x).slice_view(axis, start, width)?;
        Ok(self.push(Op::Slice { src: x, axis, start, width }, view, 0))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let view = self.value(x).transpose()?;
        Ok(self.push(Op::Transpose { src: x }, view, 0))
    }

    /// Reshape; zero-copy for contiguous inputs, otherwise copies.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(x);
        if shape.iter().product::<usize>() != src.numel() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", src.shape())));
        }
        let (value, bytes) = if src.is_contiguous() {
            (src.reshape(shape)?, 0)
        } else {
            let c = src.deep_copy();
            let b = c.nbytes();
            (c.reshape(shape)?, b)
        };
        Ok(self.push(Op::Reshape { src: x }, value, bytes))
    }

    // ---- backward -------------------------------------------------------

    /// Gradient buffer of node `i`, allocated on first use. View nodes get a
    /// view into their parent's buffer.
    pub(crate) fn grad_buffer(&mut self, v: Var) -> Tensor<T> {
        if let Some(g) = &self.grads[v.0] {
            return g.clone();
        }
        let shape = self.nodes[v.0].shape.clone();
        let buf = match self.nodes[v.0].op {
            Op::Slice { src, axis, start, width } if self.nodes[src.0].requires_grad => {
                self.grad_buffer(src)
                    .slice_view(axis, start, width)
                    .expect("slice of parent gradient is in bounds")
            }
            Op::Transpose { src } if self.nodes[src.0].requires_grad => {
                self.grad_buffer(src).transpose().expect("2-D gradient")
            }
            Op::Reshape { src } if self.nodes[src.0].requires_grad => {
                let parent = self.grad_buffer(src);
                parent.reshape(&shape).unwrap_or_else(|_| Tensor::zeros(&shape))
            }
            _ => Tensor::zeros(&shape),
        };
        self.grads[v.0] = Some(buf.clone());
        buf
    }

    /// Whether `v`'s gradient buffer aliases its parent's.
    fn grad_is_view(&self, v: Var) -> bool {
        match self.nodes[v.0].op {
            Op::Slice { src, .. } | Op::Transpose { src } => {
                self.grads[v.0].is_some() && self.grads[src.0].is_some()
            }
            Op::Reshape { src } => match (&self.grads[v.0], &self.grads[src.0]) {
                (Some(g), Some(p)) => g.shares_storage(p),
                _ => false,
            },
            _ => false,
        }
    }

    /// Runs the backward sweep from a single-element `loss`.
    ///
    /// Each node is visited once, in reverse creation order. Intermediate
    /// values are released after their node has been processed.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Usage("backward already ran on this graph".into()));
        }
        if self.nodes[loss.0].shape.iter().product::<usize>() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.backward_done = true;
        if self.nodes[loss.0].requires_grad {
            self.grad_buffer(loss).fill(T::one());
        }
        for i in (0..=loss.0).rev() {
            let v = Var(i);
            if self.nodes[i].requires_grad && self.grads[i].is_some() && !self.grad_is_view(v) {
                let gy = self.grads[i].clone().unwrap();
                let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
                let out = self.backward_op(v, &op, &gy);
                self.nodes[i].op = op;
                out?;
            }
            self.release(i);
        }
        Ok(())
    }

    fn release(&mut self, i: usize) {
        let node = &mut self.nodes[i];
        if matches!(node.op, Op::Leaf | Op::Param) {
            return;
        }
        if node.value.take().is_some() && node.act_bytes > 0 {
            counters::release_activation(node.act_bytes);
        }
    }

    pub(crate) fn backward_op(&mut self, v: Var, op: &Op<T>, gy: &Tensor<T>) -> Result<()> {
        match op {
            Op::Leaf | Op::Param => Ok(()),
            Op::Slice { src, axis, start, width } => {
                // only reached when the parent gradient was not a view
                if self.nodes[src.0].requires_grad {
                    let g = self.grad_buffer(*src).slice_view(*axis, *start, *width)?;
                    gy.with_logical(|d| g.add_logical(d));
                }
                Ok(())
            }
            Op::Transpose { src } => {
                if self.nodes[src.0].requires_grad {
                    let g = self.grad_buffer(*src).transpose()?;
                    gy.with_logical(|d| g.add_logical(d));
                }
                Ok(())
            }
            Op::Reshape { src } => {
                if self.nodes[src.0].requires_grad {
                    let g = self.grad_buffer(*src);
                    gy.with_logical(|d| g.add_logical(d));
                }
                Ok(())
            }
            _ => self.backward_compute(v, op, gy),
        }
    }
}

impl<T: Element> Drop for Graph<T> {
    fn drop(&mut self) {
        for node in &mut self.nodes {
            if node.value.take().is_some() && node.act_bytes > 0 {
                counters::release_activation(node.act_bytes);
            }
        }
    }
}
