//! A small layer graph with reverse-mode automatic differentiation.
//!
//! Nodes are appended in topological order (an op's inputs must already
//! exist), forward evaluates a requested subgraph, and backward walks the
//! recorded order in reverse. Parameters carry a gradient buffer and a
//! frozen flag; gradients of frozen parameters are skipped and never
//! applied. All kernels reduce in a fixed association order, so results are
//! deterministic for a given seed regardless of thread count.

mod kernels;
pub mod init;
pub mod optim;

pub use kernels::Conv2dGeom;
pub use optim::{Optimizer, OptimizerConfig, OptimizerKind};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Input,
    Param { frozen: bool },
    Computed,
}

#[derive(Debug, Clone)]
pub enum Op<T> {
    Leaf,
    Conv2d { stride: usize, padding: usize },
    Dense,
    MaxPool2d { window: usize, stride: usize },
    Relu,
    Flatten,
    BatchNorm2d { momentum: T, eps: T },
    Softmax,
    SoftmaxCrossEntropy,
    MeanSquaredError,
    WeightedSum { weights: Vec<T> },
}

#[derive(Debug)]
pub struct OpNode<T> {
    pub name: String,
    pub op: Op<T>,
    pub inputs: Vec<NodeId>,
    pub kind: NodeKind,
}

#[derive(Debug)]
enum Aux<T> {
    None,
    MaxPool { argmax: Vec<usize> },
    CrossEntropy { labels: Vec<usize>, probs: Vec<T> },
    Mse { target: Vec<T> },
    BatchNorm(Box<BnState<T>>),
}

#[derive(Debug)]
struct BnState<T> {
    running_mean: Vec<T>,
    running_var: Vec<T>,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    frozen: bool,
    batch_mode: bool,
}

#[derive(Debug)]
pub struct Graph<T: Scalar> {
    ops: Vec<OpNode<T>>,
    values: Vec<Tensor<T>>,
    grads: Vec<Tensor<T>>,
    auxes: Vec<Aux<T>>,
    needs_grad: Vec<bool>,
    computed: Vec<bool>,
    training: bool,
    has_forwarded: bool,
    needs_grad_dirty: bool,
    scratch_col: Vec<T>,
    scratch_dcol: Vec<T>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            ops: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            auxes: Vec::new(),
            needs_grad: Vec::new(),
            computed: Vec::new(),
            training: true,
            has_forwarded: false,
            needs_grad_dirty: true,
            scratch_col: Vec::new(),
            scratch_dcol: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &OpNode<T> {
        &self.ops[id.0]
    }

    pub fn nodes(&self) -> &[OpNode<T>] {
        &self.ops
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.values[id.0]
    }

    /// Direct access to a leaf's storage (binding inputs, loading weights,
    /// finite-difference probes). Computed values get overwritten by forward.
    pub fn value_mut(&mut self, id: NodeId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: NodeId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        self.values[id.0].data()[0]
    }

    pub fn set_training(&mut self, training: bool) {
        self.training = training;
    }

    pub fn training(&self) -> bool {
        self.training
    }

    fn push(&mut self, node: OpNode<T>, value: Tensor<T>, aux: Aux<T>) -> NodeId {
        let id = NodeId(self.ops.len());
        self.ops.push(node);
        self.values.push(value);
        self.grads.push(Tensor::default());
        self.auxes.push(aux);
        self.needs_grad.push(false);
        self.computed.push(false);
        self.needs_grad_dirty = true;
        id
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(
            OpNode {
                name: name.to_string(),
                op: Op::Leaf,
                inputs: Vec::new(),
                kind: NodeKind::Input,
            },
            Tensor::zeros(shape),
            Aux::None,
        )
    }

    pub fn param(&mut self, name: &str, init: Tensor<T>) -> NodeId {
        self.push(
            OpNode {
                name: name.to_string(),
                op: Op::Leaf,
                inputs: Vec::new(),
                kind: NodeKind::Param { frozen: false },
            },
            init,
            Aux::None,
        )
    }

    fn add_computed(
        &mut self,
        name: &str,
        op: Op<T>,
        inputs: Vec<NodeId>,
        aux: Aux<T>,
    ) -> Result<NodeId> {
        let next = self.ops.len();
        for id in &inputs {
            assert!(id.0 < next, "op inputs must precede the op");
        }
        let shapes: Vec<&[usize]> = inputs.iter().map(|id| self.values[id.0].shape()).collect();
        let out_shape = infer_shape(&op, &shapes)?;
        Ok(self.push(
            OpNode {
                name: name.to_string(),
                op,
                inputs,
                kind: NodeKind::Computed,
            },
            Tensor::zeros(&out_shape),
            aux,
        ))
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: NodeId,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId> {
        self.add_computed(
            "",
            Op::Conv2d { stride, padding },
            vec![x, weight, bias],
            Aux::None,
        )
    }

    pub fn dense(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        self.add_computed("", Op::Dense, vec![x, weight, bias], Aux::None)
    }

    pub fn maxpool2d(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId> {
        self.add_computed(
            "",
            Op::MaxPool2d { window, stride },
            vec![x],
            Aux::MaxPool { argmax: Vec::new() },
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.add_computed("", Op::Relu, vec![x], Aux::None)
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        self.add_computed("", Op::Flatten, vec![x], Aux::None)
    }

    pub fn batchnorm2d(
        &mut self,
        name: &str,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        momentum: f64,
        eps: f64,
    ) -> Result<NodeId> {
        let channels = {
            let shape = self.values[x.0].shape();
            if shape.len() != 4 {
                return Err(Error::ShapeMismatch(format!(
                    "batch norm expects a rank-4 input, got {shape:?}"
                )));
            }
            shape[1]
        };
        self.add_computed(
            name,
            Op::BatchNorm2d {
                momentum: T::from_f64(momentum),
                eps: T::from_f64(eps),
            },
            vec![x, gamma, beta],
            Aux::BatchNorm(Box::new(BnState {
                running_mean: vec![T::zero(); channels],
                running_var: vec![T::one(); channels],
                xhat: Vec::new(),
                inv_std: Vec::new(),
                frozen: false,
                batch_mode: false,
            })),
        )
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.add_computed("", Op::Softmax, vec![x], Aux::None)
    }

    pub fn softmax_cross_entropy(&mut self, logits: NodeId) -> Result<NodeId> {
        self.add_computed(
            "",
            Op::SoftmaxCrossEntropy,
            vec![logits],
            Aux::CrossEntropy {
                labels: Vec::new(),
                probs: Vec::new(),
            },
        )
    }

    pub fn mse_loss(&mut self, pred: NodeId) -> Result<NodeId> {
        self.add_computed(
            "",
            Op::MeanSquaredError,
            vec![pred],
            Aux::Mse { target: Vec::new() },
        )
    }

    pub fn weighted_sum(&mut self, inputs: &[NodeId], weights: &[f64]) -> Result<NodeId> {
        if inputs.len() != weights.len() {
            return Err(Error::ShapeMismatch(format!(
                "weighted sum of {} terms got {} weights",
                inputs.len(),
                weights.len()
            )));
        }
        self.add_computed(
            "",
            Op::WeightedSum {
                weights: weights.iter().map(|&w| T::from_f64(w)).collect(),
            },
            inputs.to_vec(),
            Aux::None,
        )
    }

    pub fn bind_input(&mut self, id: NodeId, value: Tensor<T>) -> Result<()> {
        if self.ops[id.0].kind != NodeKind::Input {
            return Err(Error::Train(format!(
                "node '{}' is not an input",
                self.ops[id.0].name
            )));
        }
        let old = self.values[id.0].shape();
        if value.rank() != old.len() || value.shape()[1..] != old[1..] {
            return Err(Error::ShapeMismatch(format!(
                "input '{}' expects {:?} with a free batch dim, got {:?}",
                self.ops[id.0].name,
                old,
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn set_labels(&mut self, ce_node: NodeId, labels: &[usize]) -> Result<()> {
        match &mut self.auxes[ce_node.0] {
            Aux::CrossEntropy { labels: slot, .. } => {
                slot.clear();
                slot.extend_from_slice(labels);
                Ok(())
            }
            _ => Err(Error::Train(
                "set_labels target is not a cross-entropy node".into(),
            )),
        }
    }

    pub fn set_mse_target(&mut self, mse_node: NodeId, target: &[T]) -> Result<()> {
        match &mut self.auxes[mse_node.0] {
            Aux::Mse { target: slot } => {
                slot.clear();
                slot.extend_from_slice(target);
                Ok(())
            }
            _ => Err(Error::Train("set_mse_target target is not an MSE node".into())),
        }
    }

    pub fn set_weighted_sum_weights(&mut self, node: NodeId, weights: &[f64]) -> Result<()> {
        match &mut self.ops[node.0].op {
            Op::WeightedSum { weights: slot } => {
                if slot.len() != weights.len() {
                    return Err(Error::ShapeMismatch(format!(
                        "weighted sum has {} terms, got {} weights",
                        slot.len(),
                        weights.len()
                    )));
                }
                slot.clear();
                slot.extend(weights.iter().map(|&w| T::from_f64(w)));
                Ok(())
            }
            _ => Err(Error::Train("node is not a weighted sum".into())),
        }
    }

    pub fn is_frozen(&self, id: NodeId) -> bool {
        matches!(self.ops[id.0].kind, NodeKind::Param { frozen: true })
    }

    pub fn set_frozen(&mut self, id: NodeId, frozen: bool) -> Result<()> {
        match &mut self.ops[id.0].kind {
            NodeKind::Param { frozen: slot } => {
                *slot = frozen;
                self.needs_grad_dirty = true;
                Ok(())
            }
            _ => Err(Error::Train(format!(
                "node '{}' is not a parameter",
                self.ops[id.0].name
            ))),
        }
    }

    /// Frozen batch-norm layers normalize with running statistics even in
    /// training mode and stop updating them, so a frozen trunk computes a
    /// fixed function.
    pub fn set_bn_frozen(&mut self, id: NodeId, frozen: bool) -> Result<()> {
        match &mut self.auxes[id.0] {
            Aux::BatchNorm(state) => {
                state.frozen = frozen;
                Ok(())
            }
            _ => Err(Error::Train("node is not a batch-norm layer".into())),
        }
    }

    pub fn bn_buffers(&self, id: NodeId) -> Option<(&[T], &[T])> {
        match &self.auxes[id.0] {
            Aux::BatchNorm(state) => Some((&state.running_mean, &state.running_var)),
            _ => None,
        }
    }

    pub fn set_bn_buffers(&mut self, id: NodeId, mean: &[T], var: &[T]) -> Result<()> {
        match &mut self.auxes[id.0] {
            Aux::BatchNorm(state) => {
                if mean.len() != state.running_mean.len() || var.len() != state.running_var.len() {
                    return Err(Error::ShapeMismatch("batch-norm buffer size".into()));
                }
                state.running_mean.copy_from_slice(mean);
                state.running_var.copy_from_slice(var);
                Ok(())
            }
            _ => Err(Error::Train("node is not a batch-norm layer".into())),
        }
    }

    pub fn param_ids(&self) -> Vec<NodeId> {
        self.ops
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.kind, NodeKind::Param { .. }))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    fn refresh_needs_grad(&mut self) {
        for i in 0..self.ops.len() {
            self.needs_grad[i] = match self.ops[i].kind {
                NodeKind::Param { frozen } => !frozen,
                NodeKind::Input => false,
                NodeKind::Computed => self.ops[i].inputs.iter().any(|j| self.needs_grad[j.0]),
            };
        }
        self.needs_grad_dirty = false;
    }

    /// Pure shape pass: leaf shapes come from `bindings` (falling back to
    /// current values) and computed shapes are inferred. Nothing runs.
    pub fn infer_shapes(&self, bindings: &[(NodeId, Vec<usize>)]) -> Result<Vec<Vec<usize>>> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.ops.len());
        for (i, node) in self.ops.iter().enumerate() {
            let shape = match node.kind {
                NodeKind::Computed => {
                    let ins: Vec<&[usize]> =
                        node.inputs.iter().map(|j| shapes[j.0].as_slice()).collect();
                    infer_shape(&node.op, &ins)?
                }
                _ => bindings
                    .iter()
                    .find(|(id, _)| id.0 == i)
                    .map(|(_, s)| s.clone())
                    .unwrap_or_else(|| self.values[i].shape().to_vec()),
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Evaluate every node (tests and small graphs).
    pub fn forward(&mut self) -> Result<()> {
        let all: Vec<NodeId> = (0..self.ops.len()).map(NodeId).collect();
        self.forward_to(&all)
    }

    /// Evaluate only the ancestors of `targets`, in recorded order.
    pub fn forward_to(&mut self, targets: &[NodeId]) -> Result<()> {
        let n = self.ops.len();
        let mut reach = vec![false; n];
        let mut stack: Vec<usize> = targets.iter().map(|id| id.0).collect();
        while let Some(i) = stack.pop() {
            if reach[i] {
                continue;
            }
            reach[i] = true;
            stack.extend(self.ops[i].inputs.iter().map(|id| id.0));
        }

        let training = self.training;
        let Graph {
            ops,
            values,
            auxes,
            scratch_col,
            ..
        } = self;

        for i in 0..n {
            if !reach[i] || ops[i].kind != NodeKind::Computed {
                continue;
            }
            let (before, rest) = values.split_at_mut(i);
            let out = &mut rest[0];
            let in_shapes: Vec<&[usize]> =
                ops[i].inputs.iter().map(|j| before[j.0].shape()).collect();
            let out_shape = infer_shape(&ops[i].op, &in_shapes)?;
            if out.shape() != out_shape.as_slice() {
                out.reset(&out_shape);
            }
            forward_node(&ops[i], before, out, &mut auxes[i], training, scratch_col)?;
        }

        self.computed = reach;
        self.has_forwarded = true;
        Ok(())
    }

    /// Reverse pass from a scalar loss. Populates gradients for every
    /// reachable node that leads to a non-frozen parameter.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if !self.has_forwarded {
            return Err(Error::BackwardBeforeForward);
        }
        if !self.computed[loss.0] {
            return Err(Error::Train(
                "loss node was not computed by the last forward".into(),
            ));
        }
        if self.values[loss.0].len() != 1 {
            return Err(Error::ShapeMismatch(format!(
                "loss must be scalar, got {:?}",
                self.values[loss.0].shape()
            )));
        }
        if self.needs_grad_dirty {
            self.refresh_needs_grad();
        }

        let n = self.ops.len();
        for i in 0..n {
            let zero_it = match self.ops[i].kind {
                NodeKind::Param { frozen } => !frozen,
                _ => self.computed[i] && self.needs_grad[i],
            };
            if zero_it {
                let shape = self.values[i].shape().to_vec();
                if self.grads[i].shape() != shape.as_slice() {
                    self.grads[i].reset(&shape);
                } else {
                    self.grads[i].fill(T::zero());
                }
            }
        }

        if !self.needs_grad[loss.0] {
            // Nothing trainable upstream of the loss; gradients stay zero.
            return Ok(());
        }
        self.grads[loss.0].data_mut()[0] = T::one();

        let Graph {
            ops,
            values,
            grads,
            auxes,
            needs_grad,
            computed,
            scratch_col,
            scratch_dcol,
            ..
        } = self;

        for i in (0..n).rev() {
            if !computed[i] || !needs_grad[i] || ops[i].kind != NodeKind::Computed {
                continue;
            }
            let dout = std::mem::take(&mut grads[i]);
            backward_node(
                &ops[i],
                i,
                values,
                grads,
                &auxes[i],
                needs_grad,
                &dout,
                scratch_col,
                scratch_dcol,
            );
            grads[i] = dout;
        }
        Ok(())
    }
}

/// Output shape of `op` given input shapes; errors are the build-time and
/// bind-time shape diagnostics.
pub fn infer_shape<T: Scalar>(op: &Op<T>, inputs: &[&[usize]]) -> Result<Vec<usize>> {
    let fail = |msg: String| Err(Error::ShapeMismatch(msg));
    match op {
        Op::Leaf => Ok(inputs.first().map(|s| s.to_vec()).unwrap_or_default()),
        Op::Conv2d { stride, padding } => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            if x.len() != 4 || w.len() != 4 {
                return fail(format!("conv2d expects rank-4 input/kernel, got {x:?} and {w:?}"));
            }
            if *stride == 0 {
                return fail("conv2d stride must be >= 1".into());
            }
            let (batch, cin, h, wd) = (x[0], x[1], x[2], x[3]);
            let (cout, kcin, kh, kw) = (w[0], w[1], w[2], w[3]);
            if kcin != cin {
                return fail(format!("conv2d kernel channels {kcin} != input channels {cin}"));
            }
            if b.len() != 1 || b[0] != cout {
                return fail(format!("conv2d bias shape {b:?} != [{cout}]"));
            }
            if h + 2 * padding < kh || wd + 2 * padding < kw {
                return fail(format!(
                    "conv2d window {kh}x{kw} exceeds padded input {}x{}",
                    h + 2 * padding,
                    wd + 2 * padding
                ));
            }
            let oh = (h + 2 * padding - kh) / stride + 1;
            let ow = (wd + 2 * padding - kw) / stride + 1;
            Ok(vec![batch, cout, oh, ow])
        }
        Op::Dense => {
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            if x.len() != 2 || w.len() != 2 {
                return fail(format!("dense expects rank-2 input/weight, got {x:?} and {w:?}"));
            }
            if x[1] != w[0] {
                return fail(format!("dense inner dims {} != {}", x[1], w[0]));
            }
            if b.len() != 1 || b[0] != w[1] {
                return fail(format!("dense bias shape {b:?} != [{}]", w[1]));
            }
            Ok(vec![x[0], w[1]])
        }
        Op::MaxPool2d { window, stride } => {
            let x = inputs[0];
            if x.len() != 4 {
                return fail(format!("max pool expects rank-4 input, got {x:?}"));
            }
            if *stride == 0 || *window == 0 {
                return fail("max pool window/stride must be >= 1".into());
            }
            if *window > x[2] || *window > x[3] {
                return fail(format!(
                    "pool window {window} exceeds spatial dims {}x{}",
                    x[2], x[3]
                ));
            }
            Ok(vec![
                x[0],
                x[1],
                (x[2] - window) / stride + 1,
                (x[3] - window) / stride + 1,
            ])
        }
        Op::Relu => Ok(inputs[0].to_vec()),
        Op::Flatten => {
            let x = inputs[0];
            if x.len() < 2 {
                return fail(format!("flatten expects rank >= 2, got {x:?}"));
            }
            Ok(vec![x[0], x[1..].iter().product()])
        }
        Op::BatchNorm2d { .. } => {
            let (x, g, b) = (inputs[0], inputs[1], inputs[2]);
            if x.len() != 4 {
                return fail(format!("batch norm expects rank-4 input, got {x:?}"));
            }
            if g != [x[1]] || b != [x[1]] {
                return fail(format!(
                    "batch norm gamma/beta shapes {g:?}/{b:?} != [{}]",
                    x[1]
                ));
            }
            Ok(x.to_vec())
        }
        Op::Softmax | Op::SoftmaxCrossEntropy => {
            let x = inputs[0];
            if x.len() != 2 {
                return fail(format!("softmax expects rank-2 logits, got {x:?}"));
            }
            if matches!(op, Op::Softmax) {
                Ok(x.to_vec())
            } else {
                Ok(vec![1])
            }
        }
        Op::MeanSquaredError => Ok(vec![1]),
        Op::WeightedSum { weights } => {
            if inputs.len() != weights.len() {
                return fail(format!(
                    "weighted sum of {} terms has {} weights",
                    inputs.len(),
                    weights.len()
                ));
            }
            for s in inputs {
                if s.iter().product::<usize>() != 1 {
                    return fail(format!("weighted sum terms must be scalar, got {s:?}"));
                }
            }
            Ok(vec![1])
        }
    }
}

fn conv_geom(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Conv2dGeom {
    let oh = (x[2] + 2 * padding - w[2]) / stride + 1;
    let ow = (x[3] + 2 * padding - w[3]) / stride + 1;
    Conv2dGeom {
        cin: x[1],
        h: x[2],
        w: x[3],
        cout: w[0],
        kh: w[2],
        kw: w[3],
        stride,
        padding,
        oh,
        ow,
    }
}

fn forward_node<T: Scalar>(
    node: &OpNode<T>,
    before: &[Tensor<T>],
    out: &mut Tensor<T>,
    aux: &mut Aux<T>,
    training: bool,
    col: &mut Vec<T>,
) -> Result<()> {
    let input = |k: usize| &before[node.inputs[k].0];
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { stride, padding } => {
            let (x, w, b) = (input(0), input(1), input(2));
            let g = conv_geom(x.shape(), w.shape(), *stride, *padding);
            kernels::conv2d_forward(
                x.data(),
                w.data(),
                b.data(),
                x.shape()[0],
                &g,
                out.data_mut(),
                col,
            );
        }
        Op::Dense => {
            let (x, w, b) = (input(0), input(1), input(2));
            let (batch, n, m) = (x.shape()[0], w.shape()[0], w.shape()[1]);
            kernels::dense_forward(x.data(), w.data(), b.data(), batch, n, m, out.data_mut());
        }
        Op::MaxPool2d { window, stride } => {
            let x = input(0);
            let s = x.shape();
            let Aux::MaxPool { argmax } = aux else {
                unreachable!("max pool carries argmax aux")
            };
            kernels::maxpool2d_forward(
                x.data(),
                s[0],
                s[1],
                s[2],
                s[3],
                *window,
                *stride,
                out.data_mut(),
                argmax,
            );
        }
        Op::Relu => {
            let x = input(0);
            for (o, &v) in out.data_mut().iter_mut().zip(x.data()) {
                *o = if v > T::zero() { v } else { T::zero() };
            }
        }
        Op::Flatten => {
            out.data_mut().copy_from_slice(input(0).data());
        }
        Op::BatchNorm2d { momentum, eps } => {
            let (x, gamma, beta) = (input(0), input(1), input(2));
            let Aux::BatchNorm(state) = aux else {
                unreachable!("batch norm carries its state")
            };
            bn_forward(x, gamma, beta, out, state, *momentum, *eps, training);
        }
        Op::Softmax => {
            let x = input(0);
            let s = x.shape();
            kernels::softmax_rows(x.data(), s[0], s[1], out.data_mut());
        }
        Op::SoftmaxCrossEntropy => {
            let x = input(0);
            let (rows, cols) = (x.shape()[0], x.shape()[1]);
            let Aux::CrossEntropy { labels, probs } = aux else {
                unreachable!("cross entropy carries labels")
            };
            if labels.len() != rows {
                return Err(Error::ShapeMismatch(format!(
                    "cross entropy has {} labels for batch {rows}",
                    labels.len()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
                return Err(Error::LabelRange {
                    label: bad,
                    limit: cols,
                });
            }
            probs.clear();
            probs.resize(rows * cols, T::zero());
            let loss =
                kernels::softmax_cross_entropy_forward(x.data(), labels, rows, cols, probs);
            out.data_mut()[0] = loss;
        }
        Op::MeanSquaredError => {
            let pred = input(0);
            let Aux::Mse { target } = aux else {
                unreachable!("mse carries its target")
            };
            if target.len() != pred.len() {
                return Err(Error::ShapeMismatch(format!(
                    "mse target has {} elements for prediction of {}",
                    target.len(),
                    pred.len()
                )));
            }
            let batch = T::from_f64(pred.shape()[0] as f64);
            let mut acc = T::zero();
            for (&p, &t) in pred.data().iter().zip(target.iter()) {
                let d = p - t;
                acc += d * d;
            }
            out.data_mut()[0] = acc / batch;
        }
        Op::WeightedSum { weights } => {
            let mut acc = T::zero();
            for (k, w) in weights.iter().enumerate() {
                acc += *w * input(k).data()[0];
            }
            out.data_mut()[0] = acc;
        }
    }
    Ok(())
}

/// Mutable grad slots for up to three distinct inputs, `None` where the
/// input does not need a gradient.
fn grad_slots<'a, T: Scalar>(
    grads: &'a mut [Tensor<T>],
    inputs: &[NodeId],
    needs: &[bool],
) -> [Option<&'a mut Tensor<T>>; 3] {
    let mut wanted: Vec<(usize, usize)> = Vec::with_capacity(3);
    for (slot, id) in inputs.iter().enumerate() {
        if needs[id.0] {
            wanted.push((slot, id.0));
        }
    }
    let mut out: [Option<&'a mut Tensor<T>>; 3] = [None, None, None];
    match wanted.len() {
        0 => {}
        1 => {
            let [a] = grads.get_disjoint_mut([wanted[0].1]).expect("distinct");
            out[wanted[0].0] = Some(a);
        }
        2 => {
            let [a, b] = grads
                .get_disjoint_mut([wanted[0].1, wanted[1].1])
                .expect("distinct");
            out[wanted[0].0] = Some(a);
            out[wanted[1].0] = Some(b);
        }
        3 => {
            let [a, b, c] = grads
                .get_disjoint_mut([wanted[0].1, wanted[1].1, wanted[2].1])
                .expect("distinct");
            out[wanted[0].0] = Some(a);
            out[wanted[1].0] = Some(b);
            out[wanted[2].0] = Some(c);
        }
        _ => unreachable!("ops have at most three inputs"),
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn backward_node<T: Scalar>(
    node: &OpNode<T>,
    idx: usize,
    values: &[Tensor<T>],
    grads: &mut [Tensor<T>],
    aux: &Aux<T>,
    needs: &[bool],
    dout: &Tensor<T>,
    col: &mut Vec<T>,
    dcol: &mut Vec<T>,
) {
    let val = |k: usize| &values[node.inputs[k].0];
    match &node.op {
        Op::Leaf => {}
        Op::Conv2d { stride, padding } => {
            let (x, w) = (val(0), val(1));
            let g = conv_geom(x.shape(), w.shape(), *stride, *padding);
            let [dx, dw, db] = grad_slots(grads, &node.inputs, needs);
            kernels::conv2d_backward(
                x.data(),
                w.data(),
                dout.data(),
                x.shape()[0],
                &g,
                dx.map(|t| t.data_mut()),
                dw.map(|t| t.data_mut()),
                db.map(|t| t.data_mut()),
                col,
                dcol,
            );
        }
        Op::Dense => {
            let (x, w) = (val(0), val(1));
            let (batch, n, m) = (x.shape()[0], w.shape()[0], w.shape()[1]);
            let [dx, dw, db] = grad_slots(grads, &node.inputs, needs);
            kernels::dense_backward(
                x.data(),
                w.data(),
                dout.data(),
                batch,
                n,
                m,
                dx.map(|t| t.data_mut()),
                dw.map(|t| t.data_mut()),
                db.map(|t| t.data_mut()),
            );
        }
        Op::MaxPool2d { .. } => {
            let Aux::MaxPool { argmax } = aux else {
                unreachable!()
            };
            if needs[node.inputs[0].0] {
                kernels::maxpool2d_backward(
                    dout.data(),
                    argmax,
                    grads[node.inputs[0].0].data_mut(),
                );
            }
        }
        Op::Relu => {
            if needs[node.inputs[0].0] {
                let x = val(0);
                let dx = grads[node.inputs[0].0].data_mut();
                for ((d, &v), &g) in dx.iter_mut().zip(x.data()).zip(dout.data()) {
                    if v > T::zero() {
                        *d += g;
                    }
                }
            }
        }
        Op::Flatten => {
            if needs[node.inputs[0].0] {
                let dx = grads[node.inputs[0].0].data_mut();
                for (d, &g) in dx.iter_mut().zip(dout.data()) {
                    *d += g;
                }
            }
        }
        Op::BatchNorm2d { .. } => {
            let Aux::BatchNorm(state) = aux else {
                unreachable!()
            };
            let x = val(0);
            let gamma = val(1);
            let [dx, dgamma, dbeta] = grad_slots(grads, &node.inputs, needs);
            bn_backward(x, gamma, state, dout, dx, dgamma, dbeta);
        }
        Op::Softmax => {
            if needs[node.inputs[0].0] {
                let y = &values[idx];
                let s = y.shape();
                kernels::softmax_backward(
                    y.data(),
                    dout.data(),
                    s[0],
                    s[1],
                    grads[node.inputs[0].0].data_mut(),
                );
            }
        }
        Op::SoftmaxCrossEntropy => {
            let Aux::CrossEntropy { labels, probs } = aux else {
                unreachable!()
            };
            if needs[node.inputs[0].0] {
                let x = val(0);
                let (rows, cols) = (x.shape()[0], x.shape()[1]);
                kernels::softmax_cross_entropy_backward(
                    probs,
                    labels,
                    rows,
                    cols,
                    dout.data()[0],
                    grads[node.inputs[0].0].data_mut(),
                );
            }
        }
        Op::MeanSquaredError => {
            let Aux::Mse { target } = aux else {
                unreachable!()
            };
            if needs[node.inputs[0].0] {
                let pred = val(0);
                let scale = dout.data()[0] * T::from_f64(2.0 / pred.shape()[0] as f64);
                let dx = grads[node.inputs[0].0].data_mut();
                for ((d, &p), &t) in dx.iter_mut().zip(pred.data()).zip(target.iter()) {
                    *d += scale * (p - t);
                }
            }
        }
        Op::WeightedSum { weights } => {
            let g = dout.data()[0];
            for (k, id) in node.inputs.iter().enumerate() {
                if needs[id.0] {
                    grads[id.0].data_mut()[0] += weights[k] * g;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn bn_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    out: &mut Tensor<T>,
    state: &mut BnState<T>,
    momentum: T,
    eps: T,
    training: bool,
) {
    let s = x.shape();
    let (batch, channels, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let n = batch * plane;
    let nf = T::from_f64(n as f64);
    state.xhat.clear();
    state.xhat.resize(x.len(), T::zero());
    state.inv_std.clear();
    state.inv_std.resize(channels, T::zero());
    let use_batch_stats = training && !state.frozen;
    state.batch_mode = use_batch_stats;

    for c in 0..channels {
        let (mean, inv_std) = if use_batch_stats {
            let mut sum = T::zero();
            for b in 0..batch {
                let base = (b * channels + c) * plane;
                for &v in &x.data()[base..base + plane] {
                    sum += v;
                }
            }
            let mean = sum / nf;
            let mut var_acc = T::zero();
            for b in 0..batch {
                let base = (b * channels + c) * plane;
                for &v in &x.data()[base..base + plane] {
                    let d = v - mean;
                    var_acc += d * d;
                }
            }
            let var = var_acc / nf;
            let one = T::one();
            state.running_mean[c] = (one - momentum) * state.running_mean[c] + momentum * mean;
            let unbiased = if n > 1 {
                var * nf / T::from_f64((n - 1) as f64)
            } else {
                var
            };
            state.running_var[c] = (one - momentum) * state.running_var[c] + momentum * unbiased;
            (mean, (var + eps).sqrt().recip())
        } else {
            (
                state.running_mean[c],
                (state.running_var[c] + eps).sqrt().recip(),
            )
        };
        state.inv_std[c] = inv_std;
        let g = gamma.data()[c];
        let b0 = beta.data()[c];
        for b in 0..batch {
            let base = (b * channels + c) * plane;
            for k in base..base + plane {
                let xh = (x.data()[k] - mean) * inv_std;
                state.xhat[k] = xh;
                out.data_mut()[k] = g * xh + b0;
            }
        }
    }
}

fn bn_backward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    state: &BnState<T>,
    dout: &Tensor<T>,
    mut dx: Option<&mut Tensor<T>>,
    mut dgamma: Option<&mut Tensor<T>>,
    mut dbeta: Option<&mut Tensor<T>>,
) {
    let s = x.shape();
    let (batch, channels, h, w) = (s[0], s[1], s[2], s[3]);
    let plane = h * w;
    let n = batch * plane;
    let nf = T::from_f64(n as f64);

    for c in 0..channels {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for b in 0..batch {
            let base = (b * channels + c) * plane;
            for k in base..base + plane {
                sum_dy += dout.data()[k];
                sum_dy_xhat += dout.data()[k] * state.xhat[k];
            }
        }
        if let Some(dg) = dgamma.as_deref_mut() {
            dg.data_mut()[c] += sum_dy_xhat;
        }
        if let Some(db) = dbeta.as_deref_mut() {
            db.data_mut()[c] += sum_dy;
        }
        if let Some(dx) = dx.as_deref_mut() {
            let g = gamma.data()[c];
            let inv_std = state.inv_std[c];
            if state.batch_mode {
                let scale = g * inv_std / nf;
                for b in 0..batch {
                    let base = (b * channels + c) * plane;
                    for k in base..base + plane {
                        let term = nf * dout.data()[k] - sum_dy - state.xhat[k] * sum_dy_xhat;
                        dx.data_mut()[k] += scale * term;
                    }
                }
            } else {
                let scale = g * inv_std;
                for b in 0..batch {
                    let base = (b * channels + c) * plane;
                    for k in base..base + plane {
                        dx.data_mut()[k] += scale * dout.data()[k];
                    }
                }
            }
        }
    }
}

/// Mean over the batch of -log softmax(logits)[label] as a pure function,
/// shared by the graph op and standalone loss computations.
pub fn softmax_cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::ShapeMismatch(format!(
            "cross entropy expects rank-2 logits, got {s:?}"
        )));
    }
    let (rows, cols) = (s[0], s[1]);
    if labels.len() != rows {
        return Err(Error::ShapeMismatch(format!(
            "cross entropy has {} labels for batch {rows}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
        return Err(Error::LabelRange {
            label: bad,
            limit: cols,
        });
    }
    let mut probs = vec![T::zero(); rows * cols];
    Ok(kernels::softmax_cross_entropy_forward(
        logits.data(),
        labels,
        rows,
        cols,
        &mut probs,
    ))
}
