//! Reverse-mode differentiation over a fixed op set.
//!
//! A [`DiffGraph`] is an append-only tape of 2-D tensor nodes. Every
//! computation in this crate composes from the ops in [`OpKind`]; the
//! surface is deliberately small so that each backward rule is covered by
//! the finite-difference oracle in [`DiffGraph::grad_check`].
//!
//! Output shapes per op (no broadcasting):
//!
//! | op                  | inputs            | output |
//! |---------------------|-------------------|--------|
//! | `MatMul`            | n x m, m x p      | n x p  |
//! | `Add`/`Sub`/`Mul`   | n x m, n x m      | n x m  |
//! | `Relu`/`Sigmoid`/`Exp`/`Log`/`Neg`/`Scale`/`StopGradient` | n x m | n x m |
//! | `RowSum`            | n x m             | n x 1  |
//! | `MeanAll`           | n x m             | 1 x 1  |
//! | `LogSumExpRows`     | n x m             | n x 1  |
//! | `L2NormalizeRows`   | n x m             | n x m  |
//! | `Transpose`         | n x m             | m x n  |
//!
//! `StopGradient` is the identity forward and blocks gradient flow exactly.
//! `Relu`'s subgradient at 0 is 0. Rows fed to `L2NormalizeRows` with norm
//! <= 1e-30 map to zero rows with zero gradient.

use crate::error::{Error, Result};
use crate::tensor::{stable_sigmoid, Tensor};

/// Norm threshold under which a row is treated as zero by `L2NormalizeRows`.
pub const NORMALIZE_TINY: f64 = 1e-30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    MatMul,
    Add,
    Sub,
    /// Elementwise product.
    Mul,
    Relu,
    Sigmoid,
    Exp,
    Log,
    Neg,
    /// Multiply every entry by the attached constant.
    Scale(f64),
    RowSum,
    MeanAll,
    LogSumExpRows,
    L2NormalizeRows,
    StopGradient,
    Transpose,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Neg => "neg",
            OpKind::Scale(_) => "scale",
            OpKind::RowSum => "row_sum",
            OpKind::MeanAll => "mean_all",
            OpKind::LogSumExpRows => "logsumexp_rows",
            OpKind::L2NormalizeRows => "l2_normalize_rows",
            OpKind::StopGradient => "stop_gradient",
            OpKind::Transpose => "transpose",
        }
    }

    fn arity(&self) -> usize {
        match self {
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone)]
enum NodeOp {
    Leaf,
    Op { kind: OpKind, inputs: Vec<NodeId> },
}

#[derive(Debug, Clone)]
struct Node {
    op: NodeOp,
    value: Tensor,
}

/// Append-only computation tape. Nodes are topologically ordered by
/// construction: an op's inputs always precede it.
#[derive(Debug, Clone, Default)]
pub struct DiffGraph {
    nodes: Vec<Node>,
    params: Vec<NodeId>,
}

/// Per-node gradients produced by [`DiffGraph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the output with respect to the node's value, if the node
    /// participated in the backward sweep.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }
}

impl DiffGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Insert a non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(NodeOp::Leaf, value)
    }

    /// Insert a trainable leaf; its gradient is reported by `backward` and
    /// perturbed by `grad_check`.
    pub fn param(&mut self, value: Tensor) -> NodeId {
        let id = self.push(NodeOp::Leaf, value);
        self.params.push(id);
        id
    }

    pub fn params(&self) -> &[NodeId] {
        &self.params
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Overwrite a leaf's value in place (used by the trainer to rebind
    /// updated parameters without rebuilding constants).
    pub fn set_leaf(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        match self.nodes[id.0].op {
            NodeOp::Leaf => {
                if self.nodes[id.0].value.shape() != value.shape() {
                    return Err(Error::shape("set_leaf", "shape change not allowed"));
                }
                self.nodes[id.0].value = value;
                Ok(())
            }
            _ => Err(Error::Contract("set_leaf target is not a leaf".into())),
        }
    }

    fn push(&mut self, op: NodeOp, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    /// Append an op node; validates shapes and computes the output eagerly.
    pub fn apply(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId> {
        if inputs.len() != kind.arity() {
            return Err(Error::Contract(format!(
                "{} expects {} input(s), got {}",
                kind.name(),
                kind.arity(),
                inputs.len()
            )));
        }
        for &id in inputs {
            if id.0 >= self.nodes.len() {
                return Err(Error::Contract(format!(
                    "unknown node id {} in {}",
                    id.0,
                    kind.name()
                )));
            }
        }
        let vals: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i.0].value).collect();
        let out = eval_op(kind, &vals)?;
        Ok(self.push(
            NodeOp::Op {
                kind,
                inputs: inputs.to_vec(),
            },
            out,
        ))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Mul, &[a, b])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Relu, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Sigmoid, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Exp, &[a])
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Log, &[a])
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Neg, &[a])
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.apply(OpKind::Scale(c), &[a])
    }

    pub fn row_sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::RowSum, &[a])
    }

    pub fn mean_all(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::MeanAll, &[a])
    }

    pub fn logsumexp_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::LogSumExpRows, &[a])
    }

    pub fn l2_normalize_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::L2NormalizeRows, &[a])
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::StopGradient, &[a])
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.apply(OpKind::Transpose, &[a])
    }

    /// Reverse sweep from a scalar output. Returns gradients for every node
    /// reached by nonzero flow; `stop_gradient` propagates exact zeros into
    /// its input (by not propagating at all).
    pub fn backward(&self, output: NodeId) -> Result<Gradients> {
        let out = &self.nodes[output.0];
        if out.value.shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward requires a 1x1 output node, got {}x{}",
                out.value.rows(),
                out.value.cols()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(Tensor::ones(1, 1));

        for idx in (0..=output.0).rev() {
            let upstream = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[idx];
            if let NodeOp::Op { kind, inputs } = &node.op {
                let contribs = backward_op(
                    *kind,
                    &upstream,
                    &node.value,
                    &inputs
                        .iter()
                        .map(|&i| &self.nodes[i.0].value)
                        .collect::<Vec<_>>(),
                )?;
                for (&input, contrib) in inputs.iter().zip(contribs) {
                    let Some(contrib) = contrib else { continue };
                    match &mut grads[input.0] {
                        Some(acc) => *acc = acc.add(&contrib)?,
                        slot @ None => *slot = Some(contrib),
                    }
                }
            }
            grads[idx] = Some(upstream);
        }
        Ok(Gradients { grads })
    }

    /// Central finite-difference check of `backward` over every parameter
    /// coordinate. Returns the max relative error
    /// `|analytic - numeric| / max(1, |numeric|)`.
    ///
    /// The perturbed evaluations pin every `stop_gradient` node at its base
    /// value, so the oracle differentiates the same surrogate function that
    /// `backward` does (a plain difference would disagree wherever gradient
    /// flow is deliberately cut). Coordinates whose perturbation flips a
    /// `relu` activation or an `L2NormalizeRows` zero-row guard are skipped:
    /// those are documented non-differentiable points.
    pub fn grad_check(&self, output: NodeId, eps: f64) -> Result<f64> {
        if !(1e-8..=1e-4).contains(&eps) {
            return Err(Error::Contract(format!(
                "grad_check eps {eps} outside [1e-8, 1e-4]"
            )));
        }
        if self.nodes[output.0].value.shape() != (1, 1) {
            return Err(Error::Contract("grad_check output must be 1x1".into()));
        }
        let analytic = self.backward(output)?;
        let base = self.forward_state(output)?;
        let mut max_rel = 0.0_f64;

        for &pid in &self.params {
            let p = &self.nodes[pid.0].value;
            let zero = Tensor::zeros(p.rows(), p.cols());
            let a_grad = analytic.get(pid).unwrap_or(&zero).clone();
            for coord in 0..p.len() {
                let f_plus = self.eval_perturbed(output, &base, pid, coord, eps)?;
                let f_minus = self.eval_perturbed(output, &base, pid, coord, -eps)?;
                let (Some(fp), Some(fm)) = (f_plus, f_minus) else {
                    continue; // crossed a kink; excluded coordinate
                };
                if !fp.is_finite() || !fm.is_finite() {
                    return Err(Error::NonFinite("grad_check objective".into()));
                }
                let numeric = (fp - fm) / (2.0 * eps);
                let rel = (a_grad.data()[coord] - numeric).abs() / numeric.abs().max(1.0);
                max_rel = max_rel.max(rel);
            }
        }
        Ok(max_rel)
    }

    /// Snapshot of all node values up to `output`, in evaluation order.
    fn forward_state(&self, output: NodeId) -> Result<Vec<Tensor>> {
        Ok(self.nodes[..=output.0]
            .iter()
            .map(|n| n.value.clone())
            .collect())
    }

    /// Re-evaluate the tape with one parameter coordinate shifted by
    /// `delta`. Returns `None` if a branch (relu sign, normalize guard)
    /// changed relative to the base evaluation.
    fn eval_perturbed(
        &self,
        output: NodeId,
        base: &[Tensor],
        pid: NodeId,
        coord: usize,
        delta: f64,
    ) -> Result<Option<f64>> {
        let mut values: Vec<Tensor> = base.to_vec();
        values[pid.0].data_mut()[coord] += delta;
        for idx in 0..=output.0 {
            let node = &self.nodes[idx];
            match &node.op {
                NodeOp::Leaf => {}
                NodeOp::Op { kind, inputs } => {
                    if *kind == OpKind::StopGradient {
                        // Pinned at the base value: the oracle must see the
                        // same constant that backward treats as gradient-free.
                        values[idx] = base[idx].clone();
                        continue;
                    }
                    if branch_flipped(*kind, &values[inputs[0].0], &base[inputs[0].0]) {
                        return Ok(None);
                    }
                    let ins: Vec<&Tensor> = inputs.iter().map(|&i| &values[i.0]).collect();
                    values[idx] = eval_op(*kind, &ins)?;
                }
            }
        }
        Ok(Some(values[output.0].scalar()?))
    }
}

fn branch_flipped(kind: OpKind, perturbed_in: &Tensor, base_in: &Tensor) -> bool {
    match kind {
        OpKind::Relu => perturbed_in
            .data()
            .iter()
            .zip(base_in.data())
            .any(|(&a, &b)| (a > 0.0) != (b > 0.0)),
        OpKind::L2NormalizeRows => (0..perturbed_in.rows()).any(|i| {
            (perturbed_in.row_norm(i) > NORMALIZE_TINY) != (base_in.row_norm(i) > NORMALIZE_TINY)
        }),
        _ => false,
    }
}

/// Forward kernel shared by `apply` and the finite-difference re-evaluation.
fn eval_op(kind: OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    let a = inputs[0];
    match kind {
        OpKind::MatMul => a.matmul(inputs[1]),
        OpKind::Add => a.add(inputs[1]).map_err(|_| shape2(kind, a, inputs[1])),
        OpKind::Sub => a.sub(inputs[1]).map_err(|_| shape2(kind, a, inputs[1])),
        OpKind::Mul => a
            .mul_elem(inputs[1])
            .map_err(|_| shape2(kind, a, inputs[1])),
        OpKind::Relu => Ok(a.map(|x| if x > 0.0 { x } else { 0.0 })),
        OpKind::Sigmoid => Ok(a.map(stable_sigmoid)),
        OpKind::Exp => Ok(a.map(f64::exp)),
        OpKind::Log => {
            if let Some(pos) = a.data().iter().position(|&x| x <= 0.0) {
                return Err(Error::domain(
                    "log",
                    format!(
                        "non-positive entry {} at ({}, {})",
                        a.data()[pos],
                        pos / a.cols(),
                        pos % a.cols()
                    ),
                ));
            }
            Ok(a.map(f64::ln))
        }
        OpKind::Neg => Ok(a.map(|x| -x)),
        OpKind::Scale(c) => Ok(a.scale(c)),
        OpKind::RowSum => Ok(a.row_sums()),
        OpKind::MeanAll => Ok(Tensor::from_vec(1, 1, vec![a.mean_all()])),
        OpKind::LogSumExpRows => Ok(a.logsumexp_rows()),
        OpKind::L2NormalizeRows => Ok(a.l2_normalize_rows(NORMALIZE_TINY)),
        OpKind::StopGradient => Ok(a.clone()),
        OpKind::Transpose => Ok(a.transpose()),
    }
}

fn shape2(kind: OpKind, a: &Tensor, b: &Tensor) -> Error {
    Error::shape(
        kind.name(),
        format!("{:?} vs {:?}", a.shape(), b.shape()),
    )
}

/// Per-op vector-Jacobian products. Returns one optional contribution per
/// input (in input order); `None` means exact zero flow.
fn backward_op(
    kind: OpKind,
    upstream: &Tensor,
    out_value: &Tensor,
    inputs: &[&Tensor],
) -> Result<Vec<Option<Tensor>>> {
    let a = inputs[0];
    match kind {
        OpKind::MatMul => {
            let b = inputs[1];
            let da = upstream.matmul(&b.transpose())?;
            let db = a.transpose().matmul(upstream)?;
            Ok(vec![Some(da), Some(db)])
        }
        OpKind::Add => Ok(vec![Some(upstream.clone()), Some(upstream.clone())]),
        OpKind::Sub => Ok(vec![
            Some(upstream.clone()),
            Some(upstream.map(|x| -x)),
        ]),
        OpKind::Mul => {
            let b = inputs[1];
            Ok(vec![
                Some(upstream.mul_elem(b)?),
                Some(upstream.mul_elem(a)?),
            ])
        }
        OpKind::Relu => Ok(vec![Some(
            upstream.zip_map(a, |g, x| if x > 0.0 { g } else { 0.0 })?,
        )]),
        OpKind::Sigmoid => Ok(vec![Some(
            upstream.zip_map(out_value, |g, y| g * y * (1.0 - y))?,
        )]),
        OpKind::Exp => Ok(vec![Some(upstream.mul_elem(out_value)?)]),
        OpKind::Log => Ok(vec![Some(upstream.zip_map(a, |g, x| g / x)?)]),
        OpKind::Neg => Ok(vec![Some(upstream.map(|x| -x))]),
        OpKind::Scale(c) => Ok(vec![Some(upstream.scale(c))]),
        OpKind::RowSum => {
            let mut da = Tensor::zeros(a.rows(), a.cols());
            for i in 0..a.rows() {
                let g = upstream.get(i, 0);
                for x in da.row_mut(i) {
                    *x = g;
                }
            }
            Ok(vec![Some(da)])
        }
        OpKind::MeanAll => {
            let g = upstream.get(0, 0) / a.len() as f64;
            Ok(vec![Some(Tensor::filled(a.rows(), a.cols(), g))])
        }
        OpKind::LogSumExpRows => {
            // d/dx_ij = softmax(row_i)_j * upstream_i
            let mut da = Tensor::zeros(a.rows(), a.cols());
            for i in 0..a.rows() {
                let lse = out_value.get(i, 0);
                let g = upstream.get(i, 0);
                for (j, &x) in a.row(i).iter().enumerate() {
                    da.set(i, j, g * (x - lse).exp());
                }
            }
            Ok(vec![Some(da)])
        }
        OpKind::L2NormalizeRows => {
            // y = x / |x|; dx = (g - y (y . g)) / |x|; zero rows stay zero.
            let mut da = Tensor::zeros(a.rows(), a.cols());
            for i in 0..a.rows() {
                let norm = a.row_norm(i);
                if norm <= NORMALIZE_TINY {
                    continue;
                }
                let y = out_value.row(i);
                let g = upstream.row(i);
                let dot: f64 = y.iter().zip(g).map(|(yi, gi)| yi * gi).sum();
                for (j, (&yj, &gj)) in y.iter().zip(g).enumerate() {
                    da.set(i, j, (gj - yj * dot) / norm);
                }
            }
            Ok(vec![Some(da)])
        }
        OpKind::StopGradient => Ok(vec![None]),
        OpKind::Transpose => Ok(vec![Some(upstream.transpose())]),
    }
}
