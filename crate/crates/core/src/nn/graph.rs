//! A small reverse-mode tape covering the operations this pipeline needs.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the node
//! list is a valid topological order for backpropagation.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::{ops, ParameterStore, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Marks an output unit of [`Graph::select`] that reads no input (stays zero).
pub const NO_SOURCE: u32 = u32::MAX;

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv {
        x: Var,
        k: Var,
        b: Var,
        mask: Option<Rc<Vec<bool>>>,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Select {
        x: Var,
        index: Rc<Vec<u32>>,
        width: usize,
    },
    MaskCells {
        x: Var,
        mask: Rc<Vec<bool>>,
    },
    Bce {
        pred: Var,
        target: Tensor,
        mask: Rc<Vec<bool>>,
    },
    SoftmaxCe {
        logits: Var,
        labels: Rc<Vec<usize>>,
        mask: Rc<Vec<bool>>,
    },
    WeightedSum {
        x: Var,
        weights: Tensor,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::Linear { .. } => "linear",
            Op::Conv { .. } => "conv",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Add(..) => "add",
            Op::Select { .. } => "select",
            Op::MaskCells { .. } => "mask",
            Op::Bce { .. } => "bce",
            Op::SoftmaxCe { .. } => "softmax_ce",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Input | Op::Param(_) => vec![],
            Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Conv { x, k, b, .. } => vec![*x, *k, *b],
            Op::Relu(x) | Op::Sigmoid(x) => vec![*x],
            Op::Add(a, b) => vec![*a, *b],
            Op::Select { x, .. } | Op::MaskCells { x, .. } | Op::WeightedSum { x, .. } => vec![*x],
            Op::Bce { pred, .. } => vec![*pred],
            Op::SoftmaxCe { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// One step of a recorded computation, exposed for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub id: usize,
    pub kind: &'static str,
    pub inputs: Vec<usize>,
    pub param: Option<String>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::State(format!("variable {} is not on this graph", v.0)))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf for a named parameter. Repeated requests return the same node.
    pub fn param(&mut self, store: &ParameterStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.push(value, Op::Param(name.to_string()));
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(y, Op::Linear { x, w, b }))
    }

    pub fn conv(&mut self, x: Var, k: Var, b: Var, mask: Option<Rc<Vec<bool>>>) -> Result<Var> {
        let y = ops::conv2d_masked(
            self.value(x),
            self.value(k),
            self.value(b),
            mask.as_deref().map(|m| m.as_slice()),
        )?;
        Ok(self.push(y, Op::Conv { x, k, b, mask }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut y = self.value(a).clone();
        y.add_assign(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    /// Gathers `width`-sized units: output unit `k` copies input unit `index[k]`,
    /// or stays zero when `index[k] == NO_SOURCE`.
    pub fn select(
        &mut self,
        x: Var,
        index: Rc<Vec<u32>>,
        width: usize,
        shape: &[usize],
    ) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if width == 0 || index.len() * width != numel {
            return Err(Error::shape(format!(
                "select of {} units of width {} cannot fill {:?}",
                index.len(),
                width,
                shape
            )));
        }
        let src = self.value(x).data();
        let units = src.len() / width;
        let mut out = Tensor::zeros(shape);
        for (k, chunk) in out.data_mut().chunks_mut(width).enumerate() {
            let s = index[k];
            if s == NO_SOURCE {
                continue;
            }
            let s = s as usize;
            if s >= units {
                return Err(Error::Index(format!("select source {s} out of {units}")));
            }
            chunk.copy_from_slice(&src[s * width..(s + 1) * width]);
        }
        Ok(self.push(out, Op::Select { x, index, width }))
    }

    /// Zeroes every cell (trailing-dimension row) whose mask entry is false.
    pub fn mask_cells(&mut self, x: Var, mask: Rc<Vec<bool>>) -> Result<Var> {
        let mut y = self.value(x).clone();
        let width = y.last_dim();
        if mask.len() * width != y.numel() {
            return Err(Error::shape("cell mask does not match tensor"));
        }
        for (cell, chunk) in y.data_mut().chunks_mut(width).enumerate() {
            if !mask[cell] {
                chunk.fill(0.0);
            }
        }
        Ok(self.push(y, Op::MaskCells { x, mask }))
    }

    pub fn bce(&mut self, pred: Var, target: Tensor, mask: Rc<Vec<bool>>) -> Result<Var> {
        let loss = ops::bce_loss(self.value(pred), &target, &mask)?;
        Ok(self.push(Tensor::scalar(loss), Op::Bce { pred, target, mask }))
    }

    pub fn softmax_ce(
        &mut self,
        logits: Var,
        labels: Rc<Vec<usize>>,
        mask: Rc<Vec<bool>>,
    ) -> Result<Var> {
        let loss = ops::ce_loss(self.value(logits), &labels, &mask)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                labels,
                mask,
            },
        ))
    }

    /// `sum(x * weights)`; turns any tensor into a scalar objective.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor) -> Result<Var> {
        weights.expect_shape(self.value(x).shape())?;
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights.data())
            .map(|(a, b)| a * b)
            .sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }))
    }

    pub fn trace(&self) -> Vec<TraceEntry> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(id, n)| TraceEntry {
                id,
                kind: n.op.kind(),
                inputs: n.op.inputs().into_iter().map(Var::id).collect(),
                param: match &n.op {
                    Op::Param(name) => Some(name.clone()),
                    _ => None,
                },
            })
            .collect()
    }

    /// Backpropagates `seed * d(loss)` and adds the result into the gradient
    /// buffers of `store`. Gradients accumulate across calls until
    /// [`ParameterStore::zero_grad`].
    pub fn backward(&self, loss: Var, seed: f64, store: &mut ParameterStore) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::State(
                "backward called before any forward pass".into(),
            ));
        }
        let root = self.node(loss)?;
        if root.value.numel() != 1 {
            return Err(Error::State(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }

        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(root.value.shape(), seed));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let mut send = |v: Var, t: Tensor| -> Result<()> {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot => {
                        *slot = Some(t);
                        Ok(())
                    }
                }
            };
            match &node.op {
                Op::Input => {}
                Op::Param(name) => store.accumulate_grad(name, 1.0, &g)?,
                Op::Linear { x, w, b } => {
                    let (gx, gw, gb) = ops::linear_backward(self.value(*x), self.value(*w), &g)?;
                    send(*x, gx)?;
                    send(*w, gw)?;
                    send(*b, gb)?;
                }
                Op::Conv { x, k, b, mask } => {
                    let (gx, gk, gb) = ops::conv2d_masked_backward(
                        self.value(*x),
                        self.value(*k),
                        mask.as_deref().map(|m| m.as_slice()),
                        &g,
                    )?;
                    send(*x, gx)?;
                    send(*k, gk)?;
                    send(*b, gb)?;
                }
                Op::Relu(x) => {
                    let mut gx = g;
                    for (gv, &xv) in gx.data_mut().iter_mut().zip(self.value(*x).data()) {
                        if xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    send(*x, gx)?;
                }
                Op::Sigmoid(x) => {
                    let mut gx = g;
                    for (gv, &y) in gx.data_mut().iter_mut().zip(node.value.data()) {
                        *gv *= y * (1.0 - y);
                    }
                    send(*x, gx)?;
                }
                Op::Add(a, b) => {
                    send(*a, g.clone())?;
                    send(*b, g)?;
                }
                Op::Select { x, index, width } => {
                    let mut gx = Tensor::zeros(self.value(*x).shape());
                    let gxd = gx.data_mut();
                    for (k, chunk) in g.data().chunks(*width).enumerate() {
                        let s = index[k];
                        if s == NO_SOURCE {
                            continue;
                        }
                        let s = s as usize;
                        for (acc, &gv) in gxd[s * width..(s + 1) * width].iter_mut().zip(chunk) {
                            *acc += gv;
                        }
                    }
                    send(*x, gx)?;
                }
                Op::MaskCells { x, mask } => {
                    let mut gx = g;
                    let width = gx.last_dim();
                    for (cell, chunk) in gx.data_mut().chunks_mut(width).enumerate() {
                        if !mask[cell] {
                            chunk.fill(0.0);
                        }
                    }
                    send(*x, gx)?;
                }
                Op::Bce { pred, target, mask } => {
                    let mut gp = ops::bce_loss_backward(self.value(*pred), target, mask)?;
                    let s = g.data()[0];
                    gp.data_mut().iter_mut().for_each(|v| *v *= s);
                    send(*pred, gp)?;
                }
                Op::SoftmaxCe {
                    logits,
                    labels,
                    mask,
                } => {
                    let mut gl = ops::ce_loss_backward(self.value(*logits), labels, mask)?;
                    let s = g.data()[0];
                    gl.data_mut().iter_mut().for_each(|v| *v *= s);
                    send(*logits, gl)?;
                }
                Op::WeightedSum { x, weights } => {
                    let s = g.data()[0];
                    send(*x, weights.map(|w| w * s))?;
                }
            }
        }
        Ok(())
    }
}
