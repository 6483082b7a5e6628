//! Reverse-mode differentiation over a per-batch recording.
//!
//! A [`Tape`] is built fresh for every mini-batch: the forward pass pushes
//! nodes, the loss is assembled from them, and a single call to
//! [`Tape::backward`] accumulates parameter gradients into the [`Mlp`].

use super::kernels;
use super::mlp::Mlp;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::losses::{self, SoftTargets};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum ParamKind {
    Weight,
    Bias,
}

#[derive(Debug)]
enum Op {
    Input,
    Param { layer: usize, kind: ParamKind },
    Linear { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    Softmax { x: NodeId, temperature: f64 },
    TargetCe { probs: NodeId, targets: SoftTargets },
    PriorKl { probs: NodeId },
    SquaredError { x: NodeId, target: Vec<f64> },
    WeightedSum(Vec<(f64, NodeId)>),
}

#[derive(Debug)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> NodeId {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op, needs_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.node(id).value
    }

    pub fn dims(&self, id: NodeId) -> (usize, usize) {
        let n = self.node(id);
        (n.rows, n.cols)
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.node(id).value[0]
    }

    /// Copies a node's value out as a matrix tensor.
    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = self.node(id);
        Tensor::matrix(n.rows, n.cols, n.value.clone()).expect("node shape is consistent")
    }

    /// Records a constant input; no gradient flows into it.
    pub fn input(&mut self, t: &Tensor) -> Result<NodeId> {
        let (r, c) = t.dims2()?;
        Ok(self.push(r, c, t.data().to_vec(), Op::Input, false))
    }

    /// A constant scalar, useful for losses that do not depend on parameters.
    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.push(1, 1, vec![v], Op::Input, false)
    }

    pub(crate) fn param(&mut self, layer: usize, kind: ParamKind, t: &Tensor) -> NodeId {
        let (r, c) = match t.shape() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            _ => unreachable!("parameters are rank 1 or 2"),
        };
        self.push(r, c, t.data().to_vec(), Op::Param { layer, kind }, true)
    }

    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (rows, inputs) = self.dims(x);
        let (outputs, w_in) = self.dims(w);
        if w_in != inputs {
            return Err(Error::shape("linear", format!("input width {w_in}"), format!("batch width {inputs}")));
        }
        if self.node(b).value.len() != outputs {
            return Err(Error::shape("linear", outputs, self.node(b).value.len()));
        }
        let value = kernels::linear(self.value(x), rows, inputs, self.value(w), self.value(b));
        let needs = self.node(x).needs_grad || self.node(w).needs_grad || self.node(b).needs_grad;
        Ok(self.push(rows, outputs, value, Op::Linear { x, w, b }, needs))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let (r, c) = self.dims(x);
        let value = kernels::relu(self.value(x));
        let needs = self.node(x).needs_grad;
        self.push(r, c, value, Op::Relu(x), needs)
    }

    pub fn softmax(&mut self, x: NodeId, temperature: f64) -> Result<NodeId> {
        let (r, c) = self.dims(x);
        let value = kernels::softmax_rows(self.value(x), c, temperature)?;
        let needs = self.node(x).needs_grad;
        Ok(self.push(r, c, value, Op::Softmax { x, temperature }, needs))
    }

    /// Batch mean of the soft-target cross-entropy against probability node `probs`.
    pub fn target_ce(&mut self, probs: NodeId, targets: SoftTargets) -> Result<NodeId> {
        let (r, c) = self.dims(probs);
        let per_sample = targets.per_sample(self.value(probs), r, c)?;
        let value = losses::batch_mean(&per_sample);
        let needs = self.node(probs).needs_grad;
        Ok(self.push(1, 1, vec![value], Op::TargetCe { probs, targets }, needs))
    }

    /// KL(uniform ‖ mean row of `probs`).
    pub fn prior_kl(&mut self, probs: NodeId) -> Result<NodeId> {
        let (r, c) = self.dims(probs);
        let mean = column_mean(self.value(probs), r, c);
        let value = losses::class_prior_regularizer(&mean)?;
        let needs = self.node(probs).needs_grad;
        Ok(self.push(1, 1, vec![value], Op::PriorKl { probs }, needs))
    }

    /// Sum of squared differences between `x` and a constant target.
    pub fn squared_error(&mut self, x: NodeId, target: &[f64]) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.len() != target.len() {
            return Err(Error::shape("squared_error", xv.len(), target.len()));
        }
        let value: f64 = xv.iter().zip(target).map(|(a, t)| (a - t) * (a - t)).sum();
        let needs = self.node(x).needs_grad;
        Ok(self.push(1, 1, vec![value], Op::SquaredError { x, target: target.to_vec() }, needs))
    }

    /// `Σ coef · node` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(f64, NodeId)]) -> Result<NodeId> {
        let mut value = 0.0;
        let mut needs = false;
        for &(coef, id) in terms {
            let n = self.node(id);
            if n.value.len() != 1 {
                return Err(Error::shape("weighted_sum", "scalar nodes", format!("{}×{}", n.rows, n.cols)));
            }
            value += coef * n.value[0];
            needs |= n.needs_grad;
        }
        Ok(self.push(1, 1, vec![value], Op::WeightedSum(terms.to_vec()), needs))
    }

    /// Propagates d(loss)/d(node) back through the recording and accumulates
    /// parameter gradients into `model`. Every model parameter ends up with a
    /// gradient buffer, zero if the loss does not depend on it.
    pub fn backward(&mut self, loss: NodeId, model: &mut Mlp) -> Result<()> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.node(loss).value.len() != 1 {
            let (r, c) = self.dims(loss);
            return Err(Error::shape("backward", "scalar loss", format!("{r}×{c}")));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param { layer, kind } => {
                    model.accumulate_param_grad(*layer, *kind, &g)?;
                }
                Op::Linear { x, w, b } => {
                    let (rows, inputs) = self.dims(*x);
                    let outputs = node.cols;
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    if self.node(*x).needs_grad {
                        let mut dx = vec![0.0; rows * inputs];
                        for (gr, dxr) in g.chunks_exact(outputs).zip(dx.chunks_exact_mut(inputs)) {
                            for (go, wr) in gr.iter().zip(wv.chunks_exact(inputs)) {
                                if *go != 0.0 {
                                    dxr.iter_mut().zip(wr).for_each(|(d, w)| *d += go * w);
                                }
                            }
                        }
                        add_into(&mut grads[x.0], dx);
                    }
                    if self.node(*w).needs_grad {
                        let mut dw = vec![0.0; outputs * inputs];
                        for (gr, xr) in g.chunks_exact(outputs).zip(xv.chunks_exact(inputs)) {
                            for (go, dwr) in gr.iter().zip(dw.chunks_exact_mut(inputs)) {
                                if *go != 0.0 {
                                    dwr.iter_mut().zip(xr).for_each(|(d, x)| *d += go * x);
                                }
                            }
                        }
                        add_into(&mut grads[w.0], dw);
                    }
                    if self.node(*b).needs_grad {
                        let mut db = vec![0.0; outputs];
                        for gr in g.chunks_exact(outputs) {
                            db.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                        }
                        add_into(&mut grads[b.0], db);
                    }
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let dx = g.iter().zip(xv).map(|(gv, &xv)| if xv > 0.0 { *gv } else { 0.0 }).collect();
                    add_into(&mut grads[x.0], dx);
                }
                Op::Softmax { x, temperature } => {
                    let cols = node.cols;
                    let mut dx = Vec::with_capacity(g.len());
                    for (pr, gr) in node.value.chunks_exact(cols).zip(g.chunks_exact(cols)) {
                        let dot: f64 = pr.iter().zip(gr).map(|(p, g)| p * g).sum();
                        dx.extend(pr.iter().zip(gr).map(|(p, g)| p * (g - dot) / temperature));
                    }
                    add_into(&mut grads[x.0], dx);
                }
                Op::TargetCe { probs, targets } => {
                    let (r, c) = self.dims(*probs);
                    let dp = targets.grad_wrt_probs(self.value(*probs), r, c, g[0]);
                    add_into(&mut grads[probs.0], dp);
                }
                Op::PriorKl { probs } => {
                    let (r, c) = self.dims(*probs);
                    let mean = column_mean(self.value(*probs), r, c);
                    let prior = 1.0 / c as f64;
                    let col_grad: Vec<f64> = mean
                        .iter()
                        .map(|&m| if m > losses::LOG_FLOOR { -g[0] * prior / m / r as f64 } else { 0.0 })
                        .collect();
                    let dp = (0..r).flat_map(|_| col_grad.iter().copied()).collect();
                    add_into(&mut grads[probs.0], dp);
                }
                Op::SquaredError { x, target } => {
                    let xv = self.value(*x);
                    let dx = xv.iter().zip(target).map(|(a, t)| 2.0 * (a - t) * g[0]).collect();
                    add_into(&mut grads[x.0], dx);
                }
                Op::WeightedSum(terms) => {
                    for &(coef, id) in terms {
                        add_into(&mut grads[id.0], vec![coef * g[0]]);
                    }
                }
            }
        }
        model.ensure_grads();
        Ok(())
    }
}

fn add_into(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, v)| *a += v),
        None => *slot = Some(g),
    }
}

pub(crate) fn column_mean(values: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut mean = vec![0.0; cols];
    for row in values.chunks_exact(cols) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    mean
}
