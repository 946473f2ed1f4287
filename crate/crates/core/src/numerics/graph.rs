//! Define-by-run reverse-mode autodiff.
//!
//! Every operation appends a node to the tape; node indices are therefore a
//! topological order and `backward` is a single reverse sweep. `detach`
//! produces a constant copy, which is how stop-gradient boundaries are drawn.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{contract, invalid_shape, Error, Result};
use crate::numerics::params::{ParamGrads, ParamId, ParamStore};
use crate::numerics::tensor::{axis_split, Broadcast, MatmulPlan, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Add(Var, Var, Broadcast),
    Sub(Var, Var, Broadcast),
    Mul(Var, Var, Broadcast),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var, MatmulPlan),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        xhat: Tensor,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Silu(Var),
    Tanh(Var),
    Sum(Var),
    Mean(Var),
    Gather(Var, Rc<[usize]>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<(usize, ParamId), Var>,
    scope: usize,
    grad_enabled: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            scope: 0,
            grad_enabled: true,
        }
    }

    /// A tape whose parameters are bound as constants.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Parameters bound after this call get fresh leaves, distinct from those
    /// bound under other scopes. Used to attribute gradients to a call site.
    pub fn set_param_scope(&mut self, scope: usize) {
        self.scope = scope;
    }

    pub fn param_scope(&self) -> usize {
        self.scope
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Stop-gradient: same value, no upstream gradient.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&(self.scope, id)) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, self.grad_enabled);
        self.params.insert((self.scope, id), v);
        v
    }

    /// The leaf bound for `id` under `scope`, if any.
    pub fn param_var(&self, id: ParamId, scope: usize) -> Option<Var> {
        self.params.get(&(scope, id)).copied()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = Broadcast::new(self.shape(a), self.shape(b), "add")?;
        let value = self.value(a).add(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b, plan), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = Broadcast::new(self.shape(a), self.shape(b), "sub")?;
        let value = self.value(a).sub(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b, plan), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = Broadcast::new(self.shape(a), self.shape(b), "mul")?;
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b, plan), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let rg = self.needs(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|v| v + s);
        let rg = self.needs(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let mut out = vec![0.0; plan.out_len()];
        plan.forward(self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::new(&plan.out_shape, out)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b, plan), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Permute(a, inverse), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let refs: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat(&refs, axis)?;
        let rg = self.needs(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec(), axis), rg))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(a).narrow(axis, start, len)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Narrow { x: a, axis, start }, rg))
    }

    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        if axis >= self.shape(a).len() || sizes.iter().sum::<usize>() != self.shape(a)[axis] {
            return Err(invalid_shape(format!(
                "split sizes {sizes:?} along axis {axis} of {:?}",
                self.shape(a)
            )));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.narrow(a, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.value(a).softmax(axis)?;
        let rg = self.needs(&[a]);
        Ok(self.push(value, Op::Softmax(a, axis), rg))
    }

    /// Normalizes over the last axis; `gain` and `bias` (if given) have the
    /// extent of that axis.
    pub fn layer_norm(&mut self, x: Var, gain: Option<Var>, bias: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().expect("non-empty shape");
        for p in [gain, bias].into_iter().flatten() {
            if self.shape(p) != [c] {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let xv = self.value(x).data();
        let rows = xv.len() / c;
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (o, v) in xhat[r * c..(r + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        let xhat = Tensor::new(&shape, xhat)?;
        let mut out = xhat.clone();
        if let Some(gv) = gain {
            let g = self.value(gv).data().to_vec();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v *= g[i % c];
            }
        }
        if let Some(bv) = bias {
            let b = self.value(bv).data().to_vec();
            for (i, v) in out.data_mut().iter_mut().enumerate() {
                *v += b[i % c];
            }
        }
        let mut deps = vec![x];
        deps.extend(gain);
        deps.extend(bias);
        let rg = self.needs(&deps);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(gelu);
        let rg = self.needs(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.needs(&[a]);
        self.push(value, Op::Silu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let rg = self.needs(&[a]);
        self.push(value, Op::Tanh(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let rg = self.needs(&[a]);
        self.push(value, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).mean());
        let rg = self.needs(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// `out.flat[i] = src.flat[indices[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, src: Var, indices: Rc<[usize]>, shape: &[usize]) -> Result<Var> {
        let sv = self.value(src).data();
        if let Some(&bad) = indices.iter().find(|&&i| i >= sv.len()) {
            return Err(invalid_shape(format!(
                "gather index {bad} out of range for {} elements",
                sv.len()
            )));
        }
        let data = indices.iter().map(|&i| sv[i]).collect();
        let value = Tensor::new(shape, data)?;
        let rg = self.needs(&[src]);
        Ok(self.push(value, Op::Gather(src, indices), rg))
    }

    /// `x @ w + b` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::ones(lv.shape())?);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        grads.truncate(loss.0 + 1);
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let zeros_for = |v: Var| Tensor::zeros(self.shape(v));
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b, plan) | Op::Sub(a, b, plan) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let (mut ga, mut gb) = (zeros_for(*a)?, zeros_for(*b)?);
                {
                    let (gad, gbd, gd) = (ga.data_mut(), gb.data_mut(), g.data());
                    plan.for_each(|i, l, r| {
                        gad[l] += gd[i];
                        gbd[r] += sign * gd[i];
                    });
                }
                if wants(*a) {
                    accumulate(grads, *a, ga);
                }
                if wants(*b) {
                    accumulate(grads, *b, gb);
                }
            }
            Op::Mul(a, b, plan) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (mut ga, mut gb) = (zeros_for(*a)?, zeros_for(*b)?);
                {
                    let (gad, gbd, gd) = (ga.data_mut(), gb.data_mut(), g.data());
                    plan.for_each(|i, l, r| {
                        gad[l] += gd[i] * bv[r];
                        gbd[r] += gd[i] * av[l];
                    });
                }
                if wants(*a) {
                    accumulate(grads, *a, ga);
                }
                if wants(*b) {
                    accumulate(grads, *b, gb);
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.scale(*s)),
            Op::AddScalar(a) => accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b, plan) => {
                let mut ga = wants(*a).then(|| zeros_for(*a)).transpose()?;
                let mut gb = wants(*b).then(|| zeros_for(*b)).transpose()?;
                plan.backward(
                    self.value(*a).data(),
                    self.value(*b).data(),
                    g.data(),
                    ga.as_mut().map(|t| t.data_mut()),
                    gb.as_mut().map(|t| t.data_mut()),
                );
                if let Some(ga) = ga {
                    accumulate(grads, *a, ga);
                }
                if let Some(gb) = gb {
                    accumulate(grads, *b, gb);
                }
            }
            Op::Reshape(a) => accumulate(grads, *a, g.reshape(self.shape(*a))?),
            Op::Permute(a, inverse) => accumulate(grads, *a, g.permute(inverse)?),
            Op::Concat(parts, axis) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if wants(p) {
                        accumulate(grads, p, g.narrow(*axis, start, len)?);
                    }
                    start += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let mut gx = zeros_for(*x)?;
                let (outer, n_src, inner) = axis_split(self.shape(*x), *axis);
                let len = g.shape()[*axis];
                let gd = g.data();
                let gxd = gx.data_mut();
                for o in 0..outer {
                    let dst = o * n_src * inner + start * inner;
                    let src = o * len * inner;
                    for k in 0..len * inner {
                        gxd[dst + k] += gd[src + k];
                    }
                }
                accumulate(grads, *x, gx);
            }
            Op::Softmax(a, axis) => {
                let y = node.value.data();
                let gd = g.data();
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        let dot: f64 = (0..n).map(|k| gd[at(k)] * y[at(k)]).sum();
                        for k in 0..n {
                            gx[at(k)] = y[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                accumulate(grads, *a, Tensor::new(node.value.shape(), gx)?);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let c = *xhat.shape().last().expect("rank >= 1");
                let gd = g.data();
                let xh = xhat.data();
                if let Some(b) = bias.filter(|&b| wants(b)) {
                    let mut gb = vec![0.0; c];
                    for (i, v) in gd.iter().enumerate() {
                        gb[i % c] += v;
                    }
                    accumulate(grads, b, Tensor::new(&[c], gb)?);
                }
                if let Some(gn) = gain.filter(|&gn| wants(gn)) {
                    let mut gg = vec![0.0; c];
                    for (i, v) in gd.iter().enumerate() {
                        gg[i % c] += v * xh[i];
                    }
                    accumulate(grads, gn, Tensor::new(&[c], gg)?);
                }
                if wants(*x) {
                    let gain_v = gain.map(|gn| self.value(gn).data());
                    let mut gx = vec![0.0; gd.len()];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let span = r * c..(r + 1) * c;
                        let dxhat: Vec<f64> = span
                            .clone()
                            .map(|i| gd[i] * gain_v.map_or(1.0, |gv| gv[i % c]))
                            .collect();
                        let mean_d = dxhat.iter().sum::<f64>() / c as f64;
                        let mean_dx = dxhat
                            .iter()
                            .zip(&xh[span.clone()])
                            .map(|(d, x)| d * x)
                            .sum::<f64>()
                            / c as f64;
                        for (k, i) in span.enumerate() {
                            gx[i] = is * (dxhat[k] - mean_d - xh[i] * mean_dx);
                        }
                    }
                    accumulate(grads, *x, Tensor::new(xhat.shape(), gx)?);
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a);
                let gx = g.zip_map(xv, |gi, x| gi * gelu_grad(x))?;
                accumulate(grads, *a, gx);
            }
            Op::Silu(a) => {
                let xv = self.value(*a);
                let gx = g.zip_map(xv, |gi, x| {
                    let s = sigmoid(x);
                    gi * s * (1.0 + x * (1.0 - s))
                })?;
                accumulate(grads, *a, gx);
            }
            Op::Tanh(a) => {
                let gx = g.zip_map(&node.value, |gi, y| gi * (1.0 - y * y))?;
                accumulate(grads, *a, gx);
            }
            Op::Sum(a) => {
                let s = g.data()[0];
                accumulate(grads, *a, Tensor::full(self.shape(*a), s)?);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let s = g.data()[0] / n;
                accumulate(grads, *a, Tensor::full(self.shape(*a), s)?);
            }
            Op::Gather(src, indices) => {
                let mut gs = zeros_for(*src)?;
                let gsd = gs.data_mut();
                for (k, &i) in indices.iter().enumerate() {
                    gsd[i] += g.data()[k];
                }
                accumulate(grads, *src, gs);
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gradients of a scalar with respect to every leaf that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf; `None` if it received no contribution.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for a leaf, materializing zeros when it received none.
    pub fn wrt_or_zeros(&self, g: &Graph, v: Var) -> Result<Tensor> {
        match self.wrt(v) {
            Some(t) => Ok(t.clone()),
            None => Tensor::zeros(g.shape(v)),
        }
    }

    /// Sums gradients across all scopes each parameter was bound under.
    pub fn param_grads(&self, g: &Graph, store: &ParamStore) -> ParamGrads {
        let mut out = ParamGrads::zeros_like(store);
        let mut bound: Vec<(&(usize, ParamId), &Var)> = g.params.iter().collect();
        bound.sort();
        for ((_, id), v) in bound {
            if let Some(t) = self.wrt(*v) {
                out.accumulate(*id, t);
            }
        }
        out
    }
}
