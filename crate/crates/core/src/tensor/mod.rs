//! Dense f64 tensors on a reverse-mode differentiation tape.
//!
//! A [`Graph`] owns every tensor created during one forward pass. Operations
//! append nodes and record the backward rule; [`Graph::backward`] walks the
//! tape in reverse, accumulating gradients into `requires_grad` leaves.
//! Gradient accumulation follows tape order, so identical inputs and seeds
//! reproduce bit-identical gradients.

pub mod elementwise;
pub mod linalg;
pub mod nn;
pub mod shape;
pub mod shaping;

use crate::error::{CoreError, Result};
use alloc::vec;
use alloc::vec::Vec;

/// Handle to a tensor on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorId(pub(crate) u32);

impl TensorId {
    fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Add(TensorId, TensorId),
    Sub(TensorId, TensorId),
    Mul(TensorId, TensorId),
    Div(TensorId, TensorId),
    AddScalar(TensorId),
    MulScalar(TensorId, f64),
    Abs(TensorId),
    Exp(TensorId),
    Relu(TensorId),
    Gelu {
        input: TensorId,
        /// tanh of the inner polynomial, cached for the backward pass
        /// (empty when the input needs no gradient).
        tanh_inner: Vec<f64>,
    },
    AcosClamped(TensorId),
    MatMul(TensorId, TensorId),
    Bmm(TensorId, TensorId),
    Conv2d {
        input: TensorId,
        kernel: TensorId,
        bias: Option<TensorId>,
        stride: usize,
        padding: usize,
    },
    AdaptiveAvgPool2d {
        input: TensorId,
    },
    NearestUpsample {
        input: TensorId,
    },
    Softmax {
        input: TensorId,
        axis: usize,
    },
    LogSoftmax {
        input: TensorId,
        axis: usize,
    },
    SumAll(TensorId),
    MeanAll(TensorId),
    SumAxis {
        input: TensorId,
        axis: usize,
    },
    Reshape(TensorId),
    Permute {
        input: TensorId,
        dims: Vec<usize>,
    },
    Narrow {
        input: TensorId,
        axis: usize,
        start: usize,
    },
    Concat {
        inputs: Vec<TensorId>,
        axis: usize,
    },
    Embedding {
        table: TensorId,
        ids: Vec<u32>,
    },
    SelectRows {
        input: TensorId,
        positions: Vec<usize>,
    },
    LayerNorm {
        input: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    },
    L2Normalize {
        input: TensorId,
        axis: usize,
        eps: f64,
    },
    CrossEntropySpatial {
        logits: TensorId,
        targets: Vec<u32>,
        ignore_id: u32,
        valid_count: usize,
        /// Softmax probabilities cached at forward time (empty when the
        /// input needs no gradient).
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    /// Accumulated gradient; populated for `requires_grad` leaves only.
    pub grad: Option<Vec<f64>>,
    pub requires_grad: bool,
    pub op: Op,
}

/// Reverse-mode differentiation tape.
#[derive(Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Create a leaf tensor. `requires_grad` leaves receive gradients from
    /// [`Graph::backward`].
    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> TensorId {
        assert_eq!(
            data.len(),
            shape::numel(shape),
            "leaf data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(data, shape.to_vec(), requires_grad, Op::Leaf)
    }

    /// Gradient-free leaf holding fixed data (targets, masks, inputs).
    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> TensorId {
        self.leaf(data, shape, false)
    }

    /// Gradient-free scalar.
    pub fn scalar(&mut self, value: f64) -> TensorId {
        self.leaf(vec![value], &[1], false)
    }

    pub(crate) fn push(
        &mut self,
        data: Vec<f64>,
        shape: Vec<usize>,
        requires_grad: bool,
        op: Op,
    ) -> TensorId {
        let id = TensorId(self.nodes.len() as u32);
        self.nodes.push(Node {
            shape,
            data,
            grad: None,
            requires_grad,
            op,
        });
        id
    }

    pub fn data(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.index()].data
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.index()].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.index()].data.len()
    }

    /// Scalar value of a one-element tensor.
    pub fn value(&self, id: TensorId) -> f64 {
        debug_assert_eq!(self.numel(id), 1);
        self.nodes[id.index()].data[0]
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.index()].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.index()].requires_grad
    }

    pub fn zero_grad(&mut self, id: TensorId) {
        self.nodes[id.index()].grad = None;
    }

    pub(crate) fn flows(&self, id: TensorId) -> bool {
        self.nodes[id.index()].requires_grad
    }

    /// Output of a binary op requires grad if either input does.
    pub(crate) fn either_flows(&self, a: TensorId, b: TensorId) -> bool {
        self.flows(a) || self.flows(b)
    }

    /// Propagate `d loss / d leaf` into every `requires_grad` leaf reachable
    /// from `loss`. Repeated calls accumulate into leaf gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(CoreError::BadArgument {
                op: "backward",
                message: alloc::format!(
                    "loss must be scalar, got shape {:?}",
                    self.shape(loss)
                ),
            });
        }
        let n = loss.index() + 1;
        let mut flow: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
        flow.resize_with(n, || None);
        flow[loss.index()] = Some(vec![1.0]);

        for i in (0..n).rev() {
            if !self.nodes[i].requires_grad {
                flow[i] = None;
                continue;
            }
            let Some(grad) = flow[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match node.grad.as_mut() {
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(grad.iter()) {
                            *a += g;
                        }
                    }
                    None => node.grad = Some(grad),
                }
                continue;
            }
            Self::backprop_node(&self.nodes, i, grad, &mut flow);
        }
        Ok(())
    }

    fn backprop_node(nodes: &[Node], i: usize, grad: Vec<f64>, flow: &mut [Option<Vec<f64>>]) {
        // Ops only read node data/shapes and write into `flow`.
        let mut ctx = BackCtx {
            nodes,
            flow,
            out: i,
            grad: &grad,
        };
        match &nodes[i].op {
            Op::Leaf => unreachable!("leaves handled by backward()"),
            Op::Add(a, b) => elementwise::back_add(&mut ctx, *a, *b),
            Op::Sub(a, b) => elementwise::back_sub(&mut ctx, *a, *b),
            Op::Mul(a, b) => elementwise::back_mul(&mut ctx, *a, *b),
            Op::Div(a, b) => elementwise::back_div(&mut ctx, *a, *b),
            Op::AddScalar(a) => elementwise::back_add_scalar(&mut ctx, *a),
            Op::MulScalar(a, c) => elementwise::back_mul_scalar(&mut ctx, *a, *c),
            Op::Abs(a) => elementwise::back_abs(&mut ctx, *a),
            Op::Exp(a) => elementwise::back_exp(&mut ctx, *a),
            Op::Relu(a) => elementwise::back_relu(&mut ctx, *a),
            Op::Gelu { input, tanh_inner } => {
                elementwise::back_gelu(&mut ctx, *input, tanh_inner)
            }
            Op::AcosClamped(a) => elementwise::back_acos_clamped(&mut ctx, *a),
            Op::MatMul(a, b) => linalg::back_matmul(&mut ctx, *a, *b),
            Op::Bmm(a, b) => linalg::back_bmm(&mut ctx, *a, *b),
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                padding,
            } => nn::back_conv2d(&mut ctx, *input, *kernel, *bias, *stride, *padding),
            Op::AdaptiveAvgPool2d { input } => nn::back_adaptive_avg_pool2d(&mut ctx, *input),
            Op::NearestUpsample { input } => nn::back_nearest_upsample(&mut ctx, *input),
            Op::Softmax { input, axis } => nn::back_softmax(&mut ctx, *input, *axis),
            Op::LogSoftmax { input, axis } => nn::back_log_softmax(&mut ctx, *input, *axis),
            Op::SumAll(a) => elementwise::back_sum_all(&mut ctx, *a),
            Op::MeanAll(a) => elementwise::back_mean_all(&mut ctx, *a),
            Op::SumAxis { input, axis } => elementwise::back_sum_axis(&mut ctx, *input, *axis),
            Op::Reshape(a) => shaping::back_reshape(&mut ctx, *a),
            Op::Permute { input, dims } => shaping::back_permute(&mut ctx, *input, dims),
            Op::Narrow { input, axis, start } => {
                shaping::back_narrow(&mut ctx, *input, *axis, *start)
            }
            Op::Concat { inputs, axis } => shaping::back_concat(&mut ctx, inputs, *axis),
            Op::Embedding { table, ids } => nn::back_embedding(&mut ctx, *table, ids),
            Op::SelectRows { input, positions } => {
                nn::back_select_rows(&mut ctx, *input, positions)
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                eps,
            } => nn::back_layer_norm(&mut ctx, *input, *gamma, *beta, *eps),
            Op::L2Normalize { input, axis, eps } => {
                nn::back_l2_normalize(&mut ctx, *input, *axis, *eps)
            }
            Op::CrossEntropySpatial {
                logits,
                targets,
                ignore_id,
                valid_count,
                probs,
            } => nn::back_cross_entropy_spatial(
                &mut ctx,
                *logits,
                targets,
                *ignore_id,
                *valid_count,
                probs,
            ),
        }
    }
}

/// View of the tape handed to op backward rules.
pub(crate) struct BackCtx<'a> {
    nodes: &'a [Node],
    flow: &'a mut [Option<Vec<f64>>],
    /// Index of the node being differentiated.
    out: usize,
    /// Upstream gradient for that node.
    grad: &'a [f64],
}

impl<'a> BackCtx<'a> {
    pub fn grad(&self) -> &'a [f64] {
        self.grad
    }

    pub fn data(&self, id: TensorId) -> &'a [f64] {
        &self.nodes[id.index()].data
    }

    pub fn out_data(&self) -> &'a [f64] {
        &self.nodes[self.out].data
    }

    pub fn shape(&self, id: TensorId) -> &'a [usize] {
        &self.nodes[id.index()].shape
    }

    pub fn out_shape(&self) -> &'a [usize] {
        &self.nodes[self.out].shape
    }

    pub fn wants(&self, id: TensorId) -> bool {
        self.nodes[id.index()].requires_grad
    }

    /// Accumulate `src` into the flowing gradient of `id` (moving when the
    /// slot is empty). No-op when `id` does not require grad.
    pub fn add_grad(&mut self, id: TensorId, src: Vec<f64>) {
        if !self.wants(id) {
            return;
        }
        match &mut self.flow[id.index()] {
            Some(acc) => {
                for (a, s) in acc.iter_mut().zip(src.iter()) {
                    *a += s;
                }
            }
            slot @ None => *slot = Some(src),
        }
    }

}
