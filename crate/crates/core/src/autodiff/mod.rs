//! Reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive executed during a forward pass together
//! with the values its adjoint needs. [`Tape::backward`] walks the nodes in
//! strict reverse order exactly once, so node ids double as a topological
//! order and two backward passes over one tape produce identical bits.

mod gradcheck;
pub(crate) mod kernels;

use std::collections::{BTreeMap, HashMap};

pub use gradcheck::{
    finite_difference, grad_check, relative_error, CheckOptions, GradCheckReport, ParamCheck,
};

use crate::layers::ConvGeometry;
use crate::tensor::{contract, contract_adjoints, linear_combine, Elementwise, Operand, Tensor};
use crate::{Error, Real, Result};
use kernels::{ConvPlan, NormLayout, SubsamplePlan};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a trainable parameter within its owning model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Batch statistics produced by a training-mode normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<Real>,
    /// Biased variance.
    pub var: Vec<Real>,
    /// Number of values reduced per statistic.
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf { param: Option<ParamId> },
    Contract { u: Var, w: Var, r: usize },
    Sum(Vec<Var>),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, Real),
    Relu(Var),
    Reshape(Var),
    Gather { x: Var, index: Vec<usize> },
    TensorConv { x: Var, w: Var, plan: Box<ConvPlan> },
    Subsample { x: Var, plan: Box<SubsamplePlan> },
    ChannelBias { x: Var, b: Var },
    PRelu { x: Var, slope: Var },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        layout: NormLayout,
        xhat: Tensor,
        inv_std: Vec<Real>,
        batch_stats: bool,
    },
    SumAll(Var),
    MeanAll(Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of the leaves that asked for them.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: BTreeMap<ParamId, Tensor>,
    leaves: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Gradient of a non-parameter leaf created with `requires_grad`.
    pub fn wrt(&self, leaf: Var) -> Option<&Tensor> {
        self.leaves.get(&leaf)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn grad_flag(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input or constant. Its gradient is reported only if `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf { param: None }, requires_grad)
    }

    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push(value, Op::Leaf { param: Some(id) }, true)
    }

    pub fn contract(&mut self, u: Var, w: Var, r: usize) -> Result<Var> {
        let value = contract(self.value(u), self.value(w), r)?;
        let rg = self.grad_flag(u) || self.grad_flag(w);
        Ok(self.push(value, Op::Contract { u, w, r }, rg))
    }

    pub fn linear_combine(&mut self, terms: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = terms.iter().map(|&t| self.value(t).clone()).collect();
        let value = linear_combine(&values)?;
        let rg = terms.iter().any(|&t| self.grad_flag(t));
        Ok(self.push(value, Op::Sum(terms.to_vec()), rg))
    }

    fn binary(&mut self, a: Var, b: Var, op: Elementwise<'_>, record: Op) -> Result<Var> {
        let value = self.value(a).elementwise(op)?;
        let rg = self.grad_flag(a) || self.grad_flag(b);
        Ok(self.push(value, record, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bv = self.value(b).clone();
        self.binary(a, b, Elementwise::Add(Operand::Tensor(&bv)), Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let bv = self.value(b).clone();
        self.binary(a, b, Elementwise::Sub(Operand::Tensor(&bv)), Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let bv = self.value(b).clone();
        self.binary(a, b, Elementwise::Mul(Operand::Tensor(&bv)), Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let bv = self.value(b).clone();
        self.binary(a, b, Elementwise::Div(Operand::Tensor(&bv)), Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, s: Real) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.grad_flag(a);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self
            .value(a)
            .elementwise(Elementwise::MaxWithZero)
            .expect("unary op");
        let rg = self.grad_flag(a);
        self.push(value, Op::Relu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(dims)?;
        let rg = self.grad_flag(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// `out[i] = x[index[i]]`, reshaped to `dims`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, dims: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::OutOfBounds(format!(
                "gather index {bad} into {} elements",
                src.len()
            )));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(crate::Shape::new(dims.to_vec())?, data)?;
        let rg = self.grad_flag(x);
        Ok(self.push(value, Op::Gather { x, index }, rg))
    }

    /// Windowed tensor convolution. `x` is `[N, C, H, W, cell..]`, `w` is
    /// `[O, C, k, k, wcell..]`; each output cell sums the contractions of the
    /// window cells with their neuron tensors.
    pub fn tensor_conv(&mut self, x: Var, w: Var, geom: ConvGeometry, r: usize) -> Result<Var> {
        let plan = ConvPlan::new(self.value(x).dims(), self.value(w).dims(), geom, r)?;
        let value = kernels::conv_forward(&plan, self.value(x), self.value(w));
        let rg = self.grad_flag(x) || self.grad_flag(w);
        Ok(self.push(
            value,
            Op::TensorConv {
                x,
                w,
                plan: Box::new(plan),
            },
            rg,
        ))
    }

    /// Pick the centre cell of every window of `geom` (no weights).
    pub fn subsample(&mut self, x: Var, geom: ConvGeometry) -> Result<Var> {
        let plan = SubsamplePlan::new(self.value(x).dims(), geom)?;
        let value = plan.forward(self.value(x));
        let rg = self.grad_flag(x);
        Ok(self.push(
            value,
            Op::Subsample {
                x,
                plan: Box::new(plan),
            },
            rg,
        ))
    }

    /// Add `b[c]` to every entry of channel `c` of a `[N, C, ..]` tensor.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let value = kernels::channel_bias_forward(self.value(x), self.value(b))?;
        let rg = self.grad_flag(x) || self.grad_flag(b);
        Ok(self.push(value, Op::ChannelBias { x, b }, rg))
    }

    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let value = kernels::prelu_forward(self.value(x), self.value(slope))?;
        let rg = self.grad_flag(x) || self.grad_flag(slope);
        Ok(self.push(value, Op::PRelu { x, slope }, rg))
    }

    /// Training-mode normalization over (batch, H, W) per (channel, cell
    /// component). Returns the output and the batch statistics used.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: Real,
    ) -> Result<(Var, BatchStats)> {
        let layout = NormLayout::new(self.value(x).dims(), self.value(gamma).len())?;
        if layout.n < 2 {
            return Err(Error::BatchTooSmall);
        }
        self.expect_affine(gamma, beta)?;
        let (mean, var) = layout.moments(self.value(x).data());
        let out = kernels::norm_forward(
            layout,
            self.value(x),
            self.value(gamma),
            self.value(beta),
            &mean,
            &var,
            eps,
        );
        let rg = self.grad_flag(x) || self.grad_flag(gamma) || self.grad_flag(beta);
        let v = self.push(
            out.y,
            Op::Norm {
                x,
                gamma,
                beta,
                layout,
                xhat: out.xhat,
                inv_std: out.inv_std,
                batch_stats: true,
            },
            rg,
        );
        Ok((
            v,
            BatchStats {
                mean,
                var,
                count: layout.count(),
            },
        ))
    }

    /// Inference-mode normalization with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[Real],
        var: &[Real],
        eps: Real,
    ) -> Result<Var> {
        let layout = NormLayout::new(self.value(x).dims(), self.value(gamma).len())?;
        self.expect_affine(gamma, beta)?;
        if mean.len() != self.value(gamma).len() || var.len() != mean.len() {
            return Err(Error::ShapeMismatch(
                "running statistics do not match the affine parameters".into(),
            ));
        }
        let out = kernels::norm_forward(
            layout,
            self.value(x),
            self.value(gamma),
            self.value(beta),
            mean,
            var,
            eps,
        );
        let rg = self.grad_flag(x) || self.grad_flag(gamma) || self.grad_flag(beta);
        Ok(self.push(
            out.y,
            Op::Norm {
                x,
                gamma,
                beta,
                layout,
                xhat: out.xhat,
                inv_std: out.inv_std,
                batch_stats: false,
            },
            rg,
        ))
    }

    fn expect_affine(&self, gamma: Var, beta: Var) -> Result<()> {
        if self.value(gamma).shape() != self.value(beta).shape() {
            return Err(Error::ShapeMismatch(format!(
                "gamma {} vs beta {}",
                self.value(gamma).shape(),
                self.value(beta).shape()
            )));
        }
        Ok(())
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.grad_flag(a);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let value = Tensor::scalar(v.sum() / v.len() as Real);
        let rg = self.grad_flag(a);
        self.push(value, Op::MeanAll(a), rg)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`; logits are `[N, C]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = kernels::softmax_cross_entropy(self.value(logits), labels)?;
        let rg = self.grad_flag(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Signs of every rectifier input on the tape, in recording order. Two
    /// forward passes with equal signatures traverse the same linear pieces.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::PRelu { x, .. } | Op::Relu(x) = node.op {
                sig.extend(self.value(x).data().iter().map(|&v| v > 0.0));
            }
        }
        sig
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.backward_with_seed(loss, 1.0)
    }

    /// Backward pass with upstream gradient `seed` at the (rank-0) loss.
    pub fn backward_with_seed(&self, loss: Var, seed: Real) -> Result<Gradients> {
        let loss_value = self.value(loss);
        if loss_value.rank() != 0 {
            return Err(Error::NotScalarLoss(loss_value.dims().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(seed));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf { .. } = node.op {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            self.propagate(&node.op, &node.value, &g, &mut adj)?;
        }

        let mut grads = Gradients::default();
        for (id, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Leaf { param } = node.op {
                if !node.requires_grad {
                    continue;
                }
                let g = adj[id]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.shape()));
                match param {
                    Some(p) => match grads.params.get_mut(&p) {
                        Some(existing) => existing.add_assign(&g),
                        None => {
                            grads.params.insert(p, g);
                        }
                    },
                    None => {
                        grads.leaves.insert(Var(id), g);
                    }
                }
            }
        }
        Ok(grads)
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.grad_flag(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        match op {
            Op::Leaf { .. } => {}
            Op::Contract { u, w, r } => {
                let (du, dw) = contract_adjoints(
                    self.value(*u),
                    self.value(*w),
                    g,
                    *r,
                    self.grad_flag(*u),
                    self.grad_flag(*w),
                )?;
                if let Some(du) = du {
                    self.accumulate(adj, *u, du);
                }
                if let Some(dw) = dw {
                    self.accumulate(adj, *w, dw);
                }
            }
            Op::Sum(terms) => {
                for &t in terms {
                    self.accumulate(adj, t, g.clone());
                }
            }
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(adj, *a, zip_map(g, bv, |g, b| g * b));
                self.accumulate(adj, *b, zip_map(g, av, |g, a| g * a));
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                self.accumulate(adj, *a, zip_map(g, bv, |g, b| g / b));
                // d(a/b)/db = -(a/b)/b
                let db = zip_map(&zip_map(g, out, |g, q| -g * q), bv, |t, b| t / b);
                self.accumulate(adj, *b, db);
            }
            Op::Scale(a, s) => self.accumulate(adj, *a, g.scale(*s)),
            Op::Relu(a) => {
                let av = self.value(*a);
                self.accumulate(adj, *a, zip_map(g, av, |g, x| if x > 0.0 { g } else { 0.0 }));
            }
            Op::Reshape(a) => {
                let shape = self.value(*a).shape().clone();
                self.accumulate(adj, *a, g.clone().with_shape(shape));
            }
            Op::Gather { x, index } => {
                let xv = self.value(*x);
                let mut dx = vec![0.0; xv.len()];
                for (&i, &gv) in index.iter().zip(g.data()) {
                    dx[i] += gv;
                }
                self.accumulate(adj, *x, Tensor::from_parts(xv.shape().clone(), dx));
            }
            Op::TensorConv { x, w, plan } => {
                let (dx, dw) = kernels::conv_backward(
                    plan,
                    self.value(*x),
                    self.value(*w),
                    g,
                    self.grad_flag(*x),
                    self.grad_flag(*w),
                );
                if let Some(dx) = dx {
                    self.accumulate(adj, *x, dx);
                }
                if let Some(dw) = dw {
                    self.accumulate(adj, *w, dw);
                }
            }
            Op::Subsample { x, plan } => {
                if self.grad_flag(*x) {
                    let dx = plan.backward(self.value(*x).shape(), g);
                    self.accumulate(adj, *x, dx);
                }
            }
            Op::ChannelBias { x, b } => {
                self.accumulate(adj, *x, g.clone());
                if self.grad_flag(*b) {
                    let db = kernels::channel_bias_backward(self.value(*x).dims(), self.value(*b), g);
                    self.accumulate(adj, *b, db);
                }
            }
            Op::PRelu { x, slope } => {
                let (dx, da) = kernels::prelu_backward(self.value(*x), self.value(*slope), g);
                self.accumulate(adj, *x, dx);
                self.accumulate(adj, *slope, da);
            }
            Op::Norm {
                x,
                gamma,
                beta,
                layout,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (dx, dgamma, dbeta) =
                    kernels::norm_backward(*layout, xhat, self.value(*gamma), inv_std, g, *batch_stats);
                self.accumulate(adj, *x, dx);
                self.accumulate(adj, *gamma, dgamma);
                self.accumulate(adj, *beta, dbeta);
            }
            Op::SumAll(a) => {
                let shape = self.value(*a).shape().clone();
                self.accumulate(adj, *a, Tensor::full(&shape, g.item()));
            }
            Op::MeanAll(a) => {
                let v = self.value(*a);
                let fill = g.item() / v.len() as Real;
                let shape = v.shape().clone();
                self.accumulate(adj, *a, Tensor::full(&shape, fill));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = probs.dims()[1];
                let scale = g.item() / labels.len() as Real;
                let mut d = probs.data().to_vec();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                self.accumulate(adj, *logits, Tensor::from_parts(probs.shape().clone(), d));
            }
        }
        Ok(())
    }
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(Real, Real) -> Real) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().clone(), data)
}

#[cfg(test)]
mod tests;
