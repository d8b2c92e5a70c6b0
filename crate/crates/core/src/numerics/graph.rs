use std::collections::HashMap;

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Identity of a trainable parameter across graphs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Matmul(Var, Var),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    GroupNorm {
        input: Var,
        rstd: Vec<f64>,
    },
    Silu(Var),
    Upsample2(Var),
    AvgPool2(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    StopGradient,
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of tensor operations recorded in topological order.
///
/// Nodes are appended as ops are applied, so every node's inputs precede it
/// and the graph is acyclic by construction. Gradients only flow through
/// nodes that (transitively) depend on a parameter or a gradient-tracking
/// input, and never through [`Graph::stop_gradient`].
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    stop_values: Vec<Tensor>,
    replay_stops: Option<Vec<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose `k`-th stop-gradient node outputs `frozen[k]` instead of
    /// its input. Used to differentiate numerically through the severed
    /// surrogate of a loss containing stop-gradients.
    pub fn with_frozen_stops(frozen: Vec<Tensor>) -> Self {
        Graph {
            replay_stops: Some(frozen),
            ..Self::default()
        }
    }

    /// Values produced by stop-gradient nodes, in creation order.
    pub fn stop_values(&self) -> &[Tensor] {
        &self.stop_values
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// A constant leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Binds a parameter; repeated binds of the same id return the same node
    /// so that gradients from every use accumulate in one place.
    pub fn param(&mut self, id: ParamId, value: &Tensor) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        self.params.insert(id, v);
        v
    }

    /// Makes `v` the node returned for parameter `id` from now on, e.g. to
    /// differentiate with respect to one parameter tensor through a model.
    pub fn bind_param(&mut self, id: ParamId, v: Var) -> Result<()> {
        if let Some(&old) = self.params.get(&id) {
            if old != v {
                return Err(Error::contract(format!("parameter {} is already bound", id.0)));
            }
        }
        self.params.insert(id, v);
        Ok(())
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.params.iter().map(|(&k, &v)| (k, v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::broadcast_binary("add", self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::broadcast_binary("sub", self.value(a), self.value(b), |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::broadcast_binary("mul", self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).scale(s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    /// Cross-correlation with zero padding. `input` is `(C,H,W)` or
    /// `(N,C,H,W)`; `kernel` is `(C_out,C_in,k,k)` with odd `k`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(kernel), stride, padding)?;
        let rank3 = self.value(input).rank() == 3;
        let out = kernels::conv2d(self.value(input), self.value(kernel), &geom, rank3);
        let rg = self.rg(input) || self.rg(kernel);
        Ok(self.push(out, Op::Conv2d { input, kernel, geom }, rg))
    }

    /// Group normalization without affine terms.
    pub fn group_norm(&mut self, input: Var, groups: usize, eps: f64) -> Result<Var> {
        let out = kernels::group_norm(self.value(input), groups, eps)?;
        let rg = self.rg(input);
        Ok(self.push(out.y, Op::GroupNorm { input, rstd: out.rstd }, rg))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * kernels::sigmoid(x));
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let out = kernels::upsample2(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Upsample2(a), rg))
    }

    pub fn avg_pool2(&mut self, a: Var) -> Result<Var> {
        let out = kernels::avg_pool2(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::AvgPool2(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let parts: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let out = kernels::concat(&parts, axis)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Forward identity; contributes nothing to the gradient of any ancestor.
    pub fn stop_gradient(&mut self, a: Var) -> Result<Var> {
        let k = self.stop_values.len();
        let value = match &self.replay_stops {
            Some(frozen) => {
                let v = frozen.get(k).ok_or_else(|| {
                    Error::contract(format!("replay has no frozen value for stop-gradient #{k}"))
                })?;
                if v.shape() != self.shape(a) {
                    return Err(Error::shape(
                        "stop_gradient",
                        format!("frozen {:?} vs live {:?}", v.shape(), self.shape(a)),
                    ));
                }
                v.clone()
            }
            None => self.value(a).clone(),
        };
        self.stop_values.push(value.clone());
        Ok(self.push(value, Op::StopGradient, false))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mse", format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let n = va.len() as f64;
        let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), rg))
    }

    /// Reverse-mode accumulation from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if self.rg(loss) {
            grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, t: Tensor| {
            if !self.rg(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf | Op::StopGradient => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    acc(*a, kernels::reduce_to_shape(g, self.shape(*a)));
                }
                if self.rg(*b) {
                    acc(*b, kernels::reduce_to_shape(g, self.shape(*b)));
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    acc(*a, kernels::reduce_to_shape(g, self.shape(*a)));
                }
                if self.rg(*b) {
                    acc(*b, kernels::reduce_to_shape(&g.scale(-1.0), self.shape(*b)));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, kernels::mul_backward(g, self.value(*b), self.shape(*a)));
                }
                if self.rg(*b) {
                    acc(*b, kernels::mul_backward(g, self.value(*a), self.shape(*b)));
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s)),
            Op::Sum(a) => acc(*a, Tensor::full(self.shape(*a), g.item())),
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                acc(*a, Tensor::full(self.shape(*a), g.item() / n));
            }
            Op::Matmul(a, b) => {
                let (ga, gb) = kernels::matmul_backward(self.value(*a), self.value(*b), g);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Conv2d { input, kernel, geom } => {
                let (gi, gk) = kernels::conv2d_backward(
                    self.value(*input),
                    self.value(*kernel),
                    g,
                    geom,
                    self.rg(*input),
                    self.rg(*kernel),
                );
                if let Some(gi) = gi {
                    acc(*input, gi);
                }
                if let Some(gk) = gk {
                    acc(*kernel, gk);
                }
            }
            Op::GroupNorm { input, rstd } => {
                acc(*input, kernels::group_norm_backward(&node.value, rstd, g));
            }
            Op::Silu(a) => {
                let x = self.value(*a);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| {
                        let s = kernels::sigmoid(x);
                        gv * s * (1.0 + x * (1.0 - s))
                    })
                    .collect();
                acc(*a, Tensor::new(x.shape().to_vec(), data).unwrap());
            }
            Op::Upsample2(a) => acc(*a, kernels::upsample2_backward(g, self.shape(*a))),
            Op::AvgPool2(a) => acc(*a, kernels::avg_pool2_backward(g, self.shape(*a))),
            Op::Concat { inputs, axis } => {
                let shapes: Vec<Vec<usize>> =
                    inputs.iter().map(|&v| self.shape(v).to_vec()).collect();
                for (&v, t) in inputs.iter().zip(kernels::concat_backward(g, &shapes, *axis)) {
                    acc(v, t);
                }
            }
            Op::Reshape(a) => acc(*a, g.clone().reshape(self.shape(*a)).unwrap()),
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let k = 2.0 * g.item() / va.len() as f64;
                let diff: Vec<f64> = va
                    .data()
                    .iter()
                    .zip(vb.data())
                    .map(|(x, y)| k * (x - y))
                    .collect();
                let d = Tensor::new(va.shape().to_vec(), diff).unwrap();
                if self.rg(*b) {
                    acc(*b, d.scale(-1.0));
                }
                acc(*a, d);
            }
        }
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<ParamId, Var>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` is unreachable.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`; zeros when `v` is unreachable.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(graph.shape(v)))
    }

    /// Gradient of a bound parameter, or `None` if it was not bound or not
    /// reachable from the loss.
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id).and_then(|&v| self.get(v))
    }

    /// Dense gradient list for a parameter list, zero-filled for parameters
    /// the loss does not depend on.
    pub fn for_params(&self, params: &[Tensor]) -> Vec<Tensor> {
        params
            .iter()
            .enumerate()
            .map(|(i, p)| {
                self.param(ParamId(i))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(p.shape()))
            })
            .collect()
    }
}
