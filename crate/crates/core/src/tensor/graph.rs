//! Computation tape.
//!
//! Every operation appends a node holding its forward value and the data its
//! backward rule needs. Nodes are appended in evaluation order, so the tape is
//! topologically sorted by construction and a single reverse sweep visits each
//! node exactly once.

use super::{norm, ops, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Matmul(Var, Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: Var,
        index: Vec<usize>,
    },
    SumAll(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    VarAxis {
        x: Var,
        axis: usize,
    },
    LeakyRelu {
        x: Var,
        slope: f64,
    },
    Tanh(Var),
    RowNorm(Var),
    LayerNorm(norm::LayerNormSaved),
    GroupNorm(norm::GroupNormSaved),
    BatchRenorm(norm::BatchRenormSaved),
    TransportCost {
        x: Var,
        y: Var,
        plan: Vec<f64>,
    },
    Chamfer {
        x: Var,
        y: Var,
        nn_xy: Vec<usize>,
        nn_yx: Vec<usize>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Matmul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::Narrow { .. } => "narrow",
            Op::GatherRows { .. } => "gather_rows",
            Op::SumAll(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::MaxAxis { .. } => "max_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::VarAxis { .. } => "var_axis",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Tanh(..) => "tanh",
            Op::RowNorm(..) => "row_norm",
            Op::LayerNorm(..) => "layer_norm",
            Op::GroupNorm(..) => "group_norm",
            Op::BatchRenorm(..) => "batch_renorm",
            Op::TransportCost { .. } => "transport_cost",
            Op::Chamfer { .. } => "chamfer",
        }
    }
}

pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// A recorded forward computation.
#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
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

    /// Adds a leaf; gradients are tracked when `t.requires_grad` is set.
    pub fn input(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.input(t)
    }

    pub fn param(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = true;
        self.input(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub(crate) fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// First node (in evaluation order) holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str, Vec<usize>)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (i, n.op.name(), n.value.shape().to_vec()))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            let mut sink = GradSink {
                graph: self,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => ops::add_backward(&mut sink, &node.value, &gout, *a, *b, 1.0),
                Op::Sub(a, b) => ops::add_backward(&mut sink, &node.value, &gout, *a, *b, -1.0),
                Op::Mul(a, b) => ops::mul_backward(&mut sink, &node.value, &gout, *a, *b),
                Op::Div(a, b) => ops::div_backward(&mut sink, &node.value, &gout, *a, *b),
                Op::Scale(x, s) => sink.add(*x, gout.iter().map(|g| g * s)),
                Op::Matmul(a, b) => ops::matmul_backward(&mut sink, &gout, *a, *b),
                Op::Reshape(x) => sink.add(*x, gout.iter().copied()),
                Op::Concat { inputs, axis } => {
                    ops::concat_backward(&mut sink, &node.value, &gout, inputs, *axis)
                }
                Op::Narrow { x, axis, start } => {
                    ops::narrow_backward(&mut sink, &node.value, &gout, *x, *axis, *start)
                }
                Op::GatherRows { x, index } => ops::gather_backward(&mut sink, &gout, *x, index),
                Op::SumAll(x) => {
                    let n = self.nodes[x.0].value.len();
                    sink.add(*x, std::iter::repeat_n(gout[0], n))
                }
                Op::SumAxis { x, axis } => ops::sum_axis_backward(&mut sink, &gout, *x, *axis, 1.0),
                Op::MeanAxis { x, axis } => {
                    let len = self.nodes[x.0].value.shape()[*axis] as f64;
                    ops::sum_axis_backward(&mut sink, &gout, *x, *axis, 1.0 / len)
                }
                Op::VarAxis { x, axis } => ops::var_axis_backward(&mut sink, &gout, *x, *axis),
                Op::MaxAxis { x, argmax } => ops::max_axis_backward(&mut sink, &gout, *x, argmax),
                Op::LeakyRelu { x, slope } => {
                    ops::leaky_relu_backward(&mut sink, &gout, *x, *slope)
                }
                Op::Tanh(x) => {
                    let y = node.value.data();
                    sink.add(*x, gout.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)))
                }
                Op::RowNorm(x) => ops::row_norm_backward(&mut sink, &node.value, &gout, *x),
                Op::LayerNorm(s) => norm::layer_norm_backward(&mut sink, &gout, s),
                Op::GroupNorm(s) => norm::group_norm_backward(&mut sink, &gout, s),
                Op::BatchRenorm(s) => norm::batch_renorm_backward(&mut sink, &gout, s),
                Op::TransportCost { x, y, plan } => {
                    ops::transport_cost_backward(&mut sink, gout[0], *x, *y, plan)
                }
                Op::Chamfer { x, y, nn_xy, nn_yx } => {
                    ops::chamfer_backward(&mut sink, gout[0], *x, *y, nn_xy, nn_yx)
                }
            }
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                grads[i] = Some(gout);
            }
        }
        let out = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|d| Tensor::new(n.value.shape().to_vec(), d).expect("grad shape")))
            .collect();
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        Ok(Gradients { grads: out, shapes })
    }
}

/// Accumulates upstream gradients into parent slots during the reverse sweep.
pub(crate) struct GradSink<'a> {
    pub(crate) graph: &'a Graph,
    grads: &'a mut Vec<Option<Vec<f64>>>,
}

impl<'a> GradSink<'a> {
    pub(crate) fn wants(&self, v: Var) -> bool {
        self.graph.nodes[v.0].requires_grad
    }

    pub(crate) fn value(&self, v: Var) -> &'a Tensor {
        &self.graph.nodes[v.0].value
    }

    /// Mutable gradient buffer of `v`, zero-initialised on first use.
    pub(crate) fn slot(&mut self, v: Var) -> &mut Vec<f64> {
        let n = self.graph.nodes[v.0].value.len();
        self.grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    pub(crate) fn add(&mut self, v: Var, g: impl Iterator<Item = f64>) {
        if !self.wants(v) {
            return;
        }
        let slot = self.slot(v);
        for (s, x) in slot.iter_mut().zip(g) {
            *s += x;
        }
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, zeros when the loss does not depend on it.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}
