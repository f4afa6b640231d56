use std::collections::HashMap;

use super::kernels::{self, BatchNormSaved};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Named trainable tensors, in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter path {name}")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(Tensor::cast).collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradient buffers matching a [`ParamStore`]. Backward passes add into it.
#[derive(Clone, Debug)]
pub struct GradStore<T> {
    grads: Vec<Tensor<T>>,
}

impl<T: Scalar> GradStore<T> {
    pub fn zeros_like(params: &ParamStore<T>) -> Self {
        Self {
            grads: params.values.iter().map(|v| Tensor::zeros(v.shape())).collect(),
        }
    }

    pub fn reset(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(T::zero());
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().all(Tensor::all_finite)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    fn accumulate(&mut self, id: ParamId, g: &Tensor<T>) {
        for (a, &b) in self.grads[id.0].data_mut().iter_mut().zip(g.data()) {
            *a += b;
        }
    }
}

/// Running batch-norm statistics. `None` until populated.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    channels: usize,
    stats: Option<(Vec<T>, Vec<T>)>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn uninitialized(channels: usize) -> Self {
        Self {
            channels,
            stats: None,
        }
    }

    /// Zero mean, unit variance.
    pub fn standard(channels: usize) -> Self {
        Self::from_parts(vec![T::zero(); channels], vec![T::one(); channels])
    }

    pub fn from_parts(mean: Vec<T>, var: Vec<T>) -> Self {
        Self {
            channels: mean.len(),
            stats: Some((mean, var)),
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn mean(&self) -> Option<&[T]> {
        self.stats.as_ref().map(|(m, _)| m.as_slice())
    }

    pub fn var(&self) -> Option<&[T]> {
        self.stats.as_ref().map(|(_, v)| v.as_slice())
    }

    /// Exponential update with unbiased batch variance.
    fn update(&mut self, batch_mean: &[T], batch_var_biased: &[T], count: usize, momentum: T) {
        let correction = if count > 1 {
            T::from_f64(count as f64 / (count as f64 - 1.0))
        } else {
            T::one()
        };
        let (mean, var) = self
            .stats
            .get_or_insert_with(|| (vec![T::zero(); batch_mean.len()], vec![T::one(); batch_mean.len()]));
        for c in 0..batch_mean.len() {
            mean[c] = (T::one() - momentum) * mean[c] + momentum * batch_mean[c];
            var[c] = (T::one() - momentum) * var[c] + momentum * batch_var_biased[c] * correction;
        }
    }

    pub fn cast<U: Scalar>(&self) -> RunningStats<U> {
        let conv = |v: &Vec<T>| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
        RunningStats {
            channels: self.channels,
            stats: self.stats.as_ref().map(|(m, v)| (conv(m), conv(v))),
        }
    }
}

pub enum BatchNormMode<'a, T> {
    /// Normalize with batch statistics; optionally fold them into running
    /// statistics with the given momentum.
    Train {
        running: Option<&'a mut RunningStats<T>>,
        momentum: T,
    },
    /// Normalize with running statistics.
    Eval { running: &'a RunningStats<T> },
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Conv {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        groups: usize,
        pad: usize,
    },
    BatchNormTrain {
        input: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved<T>,
    },
    BatchNormEval {
        input: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        inv_std: Vec<T>,
    },
    Relu(Var),
    Exp(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Concat(Vec<Var>),
    Slice {
        input: Var,
        start: usize,
    },
    Sum(Var),
    GaussianNll {
        means: Var,
        log_vars: Var,
        targets: Tensor<T>,
        mask: Vec<bool>,
        count: usize,
        clamp: T,
    },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation record: the ordered list of executed operations.
///
/// Nodes are appended in execution order, so every node's inputs precede it
/// and a reverse sweep is a valid topological order for backpropagation.
pub struct Graph<'p, T: Scalar> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.get(*id),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant (non-differentiable) input.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        groups: usize,
        pad: usize,
    ) -> Result<Var> {
        let out = kernels::conv2d_forward(
            self.value(input),
            self.value(weight),
            bias.map(|b| self.value(b)),
            groups,
            pad,
        )?;
        let mut deps = vec![input, weight];
        deps.extend(bias);
        let rg = self.rg(&deps);
        Ok(self.push(
            out,
            Op::Conv {
                input,
                weight,
                bias,
                groups,
                pad,
            },
            rg,
        ))
    }

    pub fn batch_norm(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
        eps: T,
    ) -> Result<Var> {
        let rg = self.rg(&[input, gamma, beta]);
        match mode {
            BatchNormMode::Train { running, momentum } => {
                let x = self.value(input);
                let (b, _, h, w) = x.dims4()?;
                let (y, saved) =
                    kernels::batch_norm_train_forward(x, self.value(gamma), self.value(beta), eps)?;
                if let Some(r) = running {
                    if r.channels() != saved.mean.len() {
                        return Err(Error::Shape(format!(
                            "running statistics track {} channels, input has {}",
                            r.channels(),
                            saved.mean.len()
                        )));
                    }
                    r.update(&saved.mean, &saved.var, b * h * w, momentum);
                }
                Ok(self.push(
                    y,
                    Op::BatchNormTrain {
                        input,
                        gamma,
                        beta,
                        saved,
                    },
                    rg,
                ))
            }
            BatchNormMode::Eval { running } => {
                let (Some(mean), Some(var)) = (running.mean(), running.var()) else {
                    return Err(Error::InvalidInput(
                        "eval-mode batch norm with uninitialized running statistics".into(),
                    ));
                };
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mean = mean.to_vec();
                let y = kernels::channel_affine_forward(
                    self.value(input),
                    self.value(gamma),
                    self.value(beta),
                    &mean,
                    &inv_std,
                )?;
                Ok(self.push(
                    y,
                    Op::BatchNormEval {
                        input,
                        gamma,
                        beta,
                        mean,
                        inv_std,
                    },
                    rg,
                ))
            }
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[x]);
        self.push(y, Op::Relu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let y = self.value(x).map(T::exp);
        let rg = self.rg(&[x]);
        self.push(y, Op::Exp(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        let rg = self.rg(&[x]);
        self.push(y, Op::Sigmoid(x), rg)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Shape(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let y = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Add(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let y = Tensor::new(self.value(a).shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(y, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Var {
        let y = self.value(x).map(|v| v * factor);
        let rg = self.rg(&[x]);
        self.push(y, Op::Scale(x, factor), rg)
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = Tensor::concat_channels(&tensors)?;
        let rg = self.rg(parts);
        Ok(self.push(y, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let y = self.value(x).slice_channels(start, len)?;
        let rg = self.rg(&[x]);
        Ok(self.push(y, Op::Slice { input: x, start }, rg))
    }

    /// Sum of all elements, as a 0-D tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(y, Op::Sum(x), rg)
    }

    /// Mean over masked `(pixel, variable)` terms of `s + exp(−s)·(μ − y)²`
    /// with `s` clamped to `[−clamp, clamp]`.
    ///
    /// `means`, `log_vars` and `targets` are `[B, V, H, W]`; `mask` is
    /// `[B, H, W]` and broadcasts over the variable axis.
    pub fn gaussian_nll(
        &mut self,
        means: Var,
        log_vars: Var,
        targets: Tensor<T>,
        mask: Vec<bool>,
        clamp: T,
    ) -> Result<Var> {
        self.same_shape(means, log_vars, "gaussian_nll")?;
        let (b, c, h, w) = self.value(means).dims4()?;
        if targets.shape() != self.value(means).shape() {
            return Err(Error::Shape(format!(
                "targets {:?} vs predictions {:?}",
                targets.shape(),
                self.value(means).shape()
            )));
        }
        if mask.len() != b * h * w {
            return Err(Error::Shape(format!(
                "mask has {} cells, expected {}",
                mask.len(),
                b * h * w
            )));
        }
        let masked = mask.iter().filter(|&&m| m).count();
        if masked == 0 {
            return Err(Error::Empty("loss mask selects no pixels".into()));
        }
        let count = masked * c;
        let (mu, s) = (self.value(means).data(), self.value(log_vars).data());
        let plane = h * w;
        let mut total = T::zero();
        for bi in 0..b {
            for ci in 0..c {
                for p in 0..plane {
                    if !mask[bi * plane + p] {
                        continue;
                    }
                    let i = (bi * c + ci) * plane + p;
                    let sc = s[i].max(-clamp).min(clamp);
                    let d = mu[i] - targets.data()[i];
                    total += sc + (-sc).exp() * d * d;
                }
            }
        }
        let value = Tensor::scalar(total / T::from_f64(count as f64));
        let rg = self.rg(&[means, log_vars]);
        Ok(self.push(
            value,
            Op::GaussianNll {
                means,
                log_vars,
                targets,
                mask,
                count,
                clamp,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`, adding parameter gradients into
    /// `grads`. Calling it repeatedly without resetting `grads` accumulates.
    pub fn backward(&self, loss: Var, grads: &mut GradStore<T>) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::NotDifferentiable(
                "loss does not depend on any parameter".into(),
            ));
        }
        if grads.len() != self.params.len() {
            return Err(Error::Shape(format!(
                "gradient store has {} entries, parameter store {}",
                grads.len(),
                self.params.len()
            )));
        }
        let mut node_grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        node_grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(dy) = node_grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let send = |v: Var, g: Tensor<T>, ng: &mut Vec<Option<Tensor<T>>>| {
                if !self.nodes[v.0].requires_grad {
                    return;
                }
                match &mut ng[v.0] {
                    Some(acc) => {
                        for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += b;
                        }
                    }
                    slot @ None => *slot = Some(g),
                }
            };
            match &node.op {
                Op::Leaf => {
                    if let Value::Param(id) = node.value {
                        grads.accumulate(id, &dy);
                    }
                }
                Op::Conv {
                    input,
                    weight,
                    bias,
                    groups,
                    pad,
                } => {
                    let g = kernels::conv2d_backward(
                        self.value(*input),
                        self.value(*weight),
                        &dy,
                        *groups,
                        *pad,
                        self.requires_grad(*input),
                    )?;
                    if let Some(gi) = g.input {
                        send(*input, gi, &mut node_grads);
                    }
                    send(*weight, g.weight, &mut node_grads);
                    if let Some(b) = bias {
                        send(*b, g.bias, &mut node_grads);
                    }
                }
                Op::BatchNormTrain {
                    input,
                    gamma,
                    beta,
                    saved,
                } => {
                    let (dx, dg, db) =
                        kernels::batch_norm_train_backward(&dy, self.value(*gamma), saved)?;
                    send(*input, dx, &mut node_grads);
                    send(*gamma, dg, &mut node_grads);
                    send(*beta, db, &mut node_grads);
                }
                Op::BatchNormEval {
                    input,
                    gamma,
                    beta,
                    mean,
                    inv_std,
                } => {
                    let (dx, dg, db) = kernels::channel_affine_backward(
                        self.value(*input),
                        &dy,
                        self.value(*gamma),
                        mean,
                        inv_std,
                    )?;
                    send(*input, dx, &mut node_grads);
                    send(*gamma, dg, &mut node_grads);
                    send(*beta, db, &mut node_grads);
                }
                Op::Relu(x) => {
                    let xv = self.value(*x);
                    let data = dy
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect();
                    send(*x, Tensor::new(dy.shape().to_vec(), data)?, &mut node_grads);
                }
                Op::Exp(x) | Op::Sigmoid(x) => {
                    let y = self.value(Var(idx)).data();
                    let is_exp = matches!(node.op, Op::Exp(_));
                    let data = dy
                        .data()
                        .iter()
                        .zip(y)
                        .map(|(&g, &yv)| {
                            if is_exp {
                                g * yv
                            } else {
                                g * yv * (T::one() - yv)
                            }
                        })
                        .collect();
                    send(*x, Tensor::new(dy.shape().to_vec(), data)?, &mut node_grads);
                }
                Op::Add(a, b) => {
                    send(*a, dy.clone(), &mut node_grads);
                    send(*b, dy, &mut node_grads);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = dy.data().iter().zip(bv.data()).map(|(&g, &v)| g * v).collect();
                    let db = dy.data().iter().zip(av.data()).map(|(&g, &v)| g * v).collect();
                    send(*a, Tensor::new(dy.shape().to_vec(), da)?, &mut node_grads);
                    send(*b, Tensor::new(dy.shape().to_vec(), db)?, &mut node_grads);
                }
                Op::Scale(x, f) => {
                    let f = *f;
                    send(*x, dy.map(|g| g * f), &mut node_grads);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let c = self.value(p).shape()[1];
                        send(p, dy.slice_channels(start, c)?, &mut node_grads);
                        start += c;
                    }
                }
                Op::Slice { input, start } => {
                    let xs = self.value(*input).shape();
                    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let len = dy.shape()[1];
                    let plane = h * w;
                    let mut g = Tensor::zeros(xs);
                    for bi in 0..b {
                        let dst = (bi * c + start) * plane;
                        let src = bi * len * plane;
                        g.data_mut()[dst..dst + len * plane]
                            .copy_from_slice(&dy.data()[src..src + len * plane]);
                    }
                    send(*input, g, &mut node_grads);
                }
                Op::Sum(x) => {
                    let g = dy.data()[0];
                    send(*x, Tensor::full(self.value(*x).shape(), g), &mut node_grads);
                }
                Op::GaussianNll {
                    means,
                    log_vars,
                    targets,
                    mask,
                    count,
                    clamp,
                } => {
                    let upstream = dy.data()[0] / T::from_f64(*count as f64);
                    let mu = self.value(*means);
                    let s = self.value(*log_vars);
                    let (b, c, h, w) = mu.dims4()?;
                    let plane = h * w;
                    let two = T::from_f64(2.0);
                    let mut dmu = Tensor::zeros(mu.shape());
                    let mut ds = Tensor::zeros(s.shape());
                    for bi in 0..b {
                        for ci in 0..c {
                            for p in 0..plane {
                                if !mask[bi * plane + p] {
                                    continue;
                                }
                                let i = (bi * c + ci) * plane + p;
                                let sv = s.data()[i];
                                let sc = sv.max(-*clamp).min(*clamp);
                                let inv_var = (-sc).exp();
                                let d = mu.data()[i] - targets.data()[i];
                                dmu.data_mut()[i] = upstream * two * inv_var * d;
                                if sv >= -*clamp && sv <= *clamp {
                                    ds.data_mut()[i] = upstream * (T::one() - inv_var * d * d);
                                }
                            }
                        }
                    }
                    send(*means, dmu, &mut node_grads);
                    send(*log_vars, ds, &mut node_grads);
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}
