//! A minimal reverse-mode tape.
//!
//! Values are computed eagerly as nodes are pushed; [`Graph::backward`] walks
//! the tape in reverse and accumulates gradients. Parameters are bound lazily
//! by name from a borrowed [`ParamSet`]. Ops with fused hand-written gradients
//! (RoI align, losses) plug in through [`CustomBackward`].

use std::borrow::Cow;
use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ops;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Backward rule for a fused op. Returns one optional gradient per input.
pub trait CustomBackward {
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad_out: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    ScaleBy {
        x: Var,
        s: Var,
    },
    Sigmoid(Var),
    Relu(Var),
    Resize {
        x: Var,
        in_h: usize,
        in_w: usize,
    },
    ChannelMean(Var),
    ChannelMax {
        x: Var,
        arg: Vec<usize>,
    },
    ConcatChannels(Var, Var),
    GateChannels {
        x: Var,
        gate: Var,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Reshape(Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
    Sum(Var),
    Custom {
        inputs: Vec<Var>,
        rule: Box<dyn CustomBackward>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

static NO_PARAMS: ParamSet = ParamSet::new();

pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    params: &'a ParamSet,
    bound: BTreeMap<String, Var>,
}

impl Graph<'static> {
    /// A tape with no parameter store; leaves come from [`Graph::input`].
    pub fn detached() -> Self {
        Graph::new(&NO_PARAMS)
    }
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamSet) -> Self {
        Self {
            nodes: Vec::new(),
            params,
            bound: BTreeMap::new(),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, what: &str) -> Result<Var> {
        value.check_finite(what)?;
        let requires_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Conv2d { x, w, b, .. } | Op::Linear { x, w, b } => vec![*x, *w, *b],
            Op::Add(a, b) | Op::Mul(a, b) | Op::ConcatChannels(a, b) => vec![*a, *b],
            Op::ScaleBy { x, s } => vec![*x, *s],
            Op::GateChannels { x, gate } => vec![*x, *gate],
            Op::Affine { x, .. }
            | Op::Sigmoid(x)
            | Op::Relu(x)
            | Op::Resize { x, .. }
            | Op::ChannelMean(x)
            | Op::ChannelMax { x, .. }
            | Op::Reshape(x)
            | Op::GatherRows { x, .. }
            | Op::NormalizeRows { x, .. }
            | Op::Sum(x) => vec![*x],
            Op::ConcatRows(xs) => xs.clone(),
            Op::WeightedSum(terms) => terms.iter().map(|(v, _)| *v).collect(),
            Op::Custom { inputs, .. } => inputs.clone(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant leaf (no gradient).
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        t.check_finite("input")?;
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Differentiable leaf owned by the tape (used by tests and grad checks).
    pub fn leaf(&mut self, t: Tensor) -> Result<Var> {
        let v = self.input(t)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// Binds parameter `name` from the store, once per tape.
    pub fn p(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.params.get(name)?;
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let y = ops::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        self.push(y, Op::Conv2d { x, w, b, stride, pad }, "conv2d")
    }

    /// Same-size 3×3 (or k×k, k odd) convolution using parameters `{name}.w/.b`.
    pub fn conv_named(&mut self, x: Var, name: &str, stride: usize) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        let k = self.value(w).shape()[0];
        self.conv2d(x, w, b, stride, (k - 1) / 2)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p + q)?;
        self.push(y, Op::Add(a, b), "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        self.push(y, Op::Mul(a, b), "mul")
    }

    /// `scale·x + offset` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, offset: f64) -> Result<Var> {
        let y = self.value(x).map(|v| scale * v + offset);
        self.push(y, Op::Affine { x, scale }, "affine")
    }

    /// `s·x` where `s` is a one-element variable.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::Shape("scale_by expects a scalar".into()));
        }
        let k = self.scalar(s);
        let y = self.value(x).scale(k);
        self.push(y, Op::ScaleBy { x, s }, "scale_by")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let y = ops::sigmoid(self.value(x));
        self.push(y, Op::Sigmoid(x), "sigmoid")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu(x), "relu")
    }

    pub fn resize(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (in_h, in_w, _) = self.value(x).dims3()?;
        let y = ops::bilinear_resize(self.value(x), out_h, out_w)?;
        self.push(y, Op::Resize { x, in_h, in_w }, "resize")
    }

    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let y = ops::channel_mean(self.value(x))?;
        self.push(y, Op::ChannelMean(x), "channel_mean")
    }

    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (y, arg) = ops::channel_max(self.value(x))?;
        self.push(y, Op::ChannelMax { x, arg }, "channel_max")
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        self.push(y, Op::ConcatChannels(a, b), "concat_channels")
    }

    /// `x ⊙ gate` with a one-channel gate broadcast over every channel of `x`.
    pub fn gate_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (h, w, c) = self.value(x).dims3()?;
        if self.value(gate).shape() != [h, w, 1] {
            return Err(Error::Shape(format!(
                "gate {:?} does not match {h}×{w}",
                self.value(gate).shape()
            )));
        }
        let g = self.value(gate).data();
        let mut y = self.value(x).clone();
        if c > 0 {
            for (px, &gv) in y.data_mut().chunks_exact_mut(c).zip(g) {
                px.iter_mut().for_each(|v| *v *= gv);
            }
        }
        self.push(y, Op::GateChannels { x, gate }, "gate_channels")
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w), self.value(b))?;
        self.push(y, Op::Linear { x, w, b }, "linear")
    }

    pub fn linear_named(&mut self, x: Var, name: &str) -> Result<Var> {
        let w = self.p(&format!("{name}.w"))?;
        let b = self.p(&format!("{name}.b"))?;
        self.linear(x, w, b)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).clone().reshape(shape)?;
        self.push(y, Op::Reshape(x), "reshape")
    }

    /// Selects rows of an `R×D` matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let (r, d) = self.value(x).dims2()?;
        let mut data = Vec::with_capacity(rows.len() * d);
        for &i in &rows {
            if i >= r {
                return Err(Error::Shape(format!("row {i} out of {r}")));
            }
            data.extend_from_slice(&self.value(x).data()[i * d..(i + 1) * d]);
        }
        let y = Tensor::new(vec![rows.len(), d], data)?;
        self.push(y, Op::GatherRows { x, rows }, "gather_rows")
    }

    /// Stacks `R_i×D` matrices vertically.
    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let d = match xs.first() {
            Some(&v) => self.value(v).dims2()?.1,
            None => return Err(Error::Shape("concat_rows of nothing".into())),
        };
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in xs {
            let (r, dv) = self.value(v).dims2()?;
            if dv != d {
                return Err(Error::Shape(format!("row width {dv} vs {d}")));
            }
            rows += r;
            data.extend_from_slice(self.value(v).data());
        }
        let y = Tensor::new(vec![rows, d], data)?;
        self.push(y, Op::ConcatRows(xs.to_vec()), "concat_rows")
    }

    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (y, norms) = ops::l2_normalize_rows(self.value(x))?;
        self.push(y, Op::NormalizeRows { x, norms }, "normalize_rows")
    }

    /// `Σ coef_i · s_i` over scalar variables.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, c) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::Shape("weighted_sum expects scalars".into()));
            }
            total += c * self.scalar(v);
        }
        self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), "weighted_sum")
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).sum();
        self.push(Tensor::scalar(total), Op::Sum(x), "sum")
    }

    pub fn custom(
        &mut self,
        inputs: &[Var],
        output: Tensor,
        rule: Box<dyn CustomBackward>,
        what: &str,
    ) -> Result<Var> {
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                rule,
            },
            what,
        )
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape("backward needs a scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let pushes = self.node_backward(node, &g)?;
            grads[idx] = Some(g);
            for (v, t) in pushes {
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn node_backward(&self, node: &Node<'a>, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, stride, pad } => {
                let cg = ops::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    *stride,
                    *pad,
                    g,
                    self.wants(*x),
                )?;
                if let Some(dx) = cg.input {
                    out.push((*x, dx));
                }
                out.push((*w, cg.kernel));
                out.push((*b, cg.bias));
            }
            Op::Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Op::Mul(a, b) => {
                out.push((*a, g.zip_map(self.value(*b), |p, q| p * q)?));
                out.push((*b, g.zip_map(self.value(*a), |p, q| p * q)?));
            }
            Op::Affine { x, scale } => out.push((*x, g.scale(*scale))),
            Op::ScaleBy { x, s } => {
                let k = self.scalar(*s);
                out.push((*x, g.scale(k)));
                let ds: f64 = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(p, q)| p * q)
                    .sum();
                out.push((*s, Tensor::scalar(ds)));
            }
            Op::Sigmoid(x) => {
                out.push((*x, g.zip_map(&node.value, |gv, y| gv * y * (1.0 - y))?));
            }
            Op::Relu(x) => {
                out.push((
                    *x,
                    g.zip_map(self.value(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?,
                ));
            }
            Op::Resize { x, in_h, in_w } => {
                out.push((*x, ops::bilinear_resize_backward(g, *in_h, *in_w)?));
            }
            Op::ChannelMean(x) => {
                let xv = self.value(*x);
                let (h, w, c) = xv.dims3()?;
                let mut dx = Vec::with_capacity(xv.len());
                for &gv in g.data() {
                    dx.extend(std::iter::repeat_n(gv / c as f64, c));
                }
                out.push((*x, Tensor::new(vec![h, w, c], dx)?));
            }
            Op::ChannelMax { x, arg } => {
                let xv = self.value(*x);
                let (h, w, c) = xv.dims3()?;
                let mut dx = vec![0.0; xv.len()];
                for (p, (&gv, &a)) in g.data().iter().zip(arg).enumerate() {
                    dx[p * c + a] = gv;
                }
                out.push((*x, Tensor::new(vec![h, w, c], dx)?));
            }
            Op::ConcatChannels(a, b) => {
                let ca = self.value(*a).dims3()?.2;
                let (_, _, ct) = g.dims3()?;
                out.push((*a, g.slice_channels(0, ca)?));
                out.push((*b, g.slice_channels(ca, ct)?));
            }
            Op::GateChannels { x, gate } => {
                let xv = self.value(*x);
                let gate_v = self.value(*gate);
                let (h, w, c) = xv.dims3()?;
                let mut dx = g.clone();
                let mut dgate = vec![0.0; h * w];
                if c > 0 {
                    for (p, px) in dx.data_mut().chunks_exact_mut(c).enumerate() {
                        let gv = gate_v.data()[p];
                        let xs = &xv.data()[p * c..(p + 1) * c];
                        dgate[p] = px.iter().zip(xs).map(|(a, b)| a * b).sum();
                        px.iter_mut().for_each(|v| *v *= gv);
                    }
                }
                out.push((*x, dx));
                out.push((*gate, Tensor::new(vec![h, w, 1], dgate)?));
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (r, fin) = xv.dims2()?;
                let fout = wv.dims2()?.1;
                if self.wants(*x) {
                    let dx = ops::matmul_nt(g.data(), wv.data(), r, fout, fin);
                    out.push((*x, Tensor::new(vec![r, fin], dx)?));
                }
                let dw = ops::matmul_tn(xv.data(), g.data(), r, fin, fout);
                out.push((*w, Tensor::new(vec![fin, fout], dw)?));
                let mut db = vec![0.0; fout];
                for row in g.data().chunks_exact(fout.max(1)) {
                    db.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                out.push((*b, Tensor::new(vec![fout], db)?));
            }
            Op::Reshape(x) => {
                out.push((*x, g.clone().reshape(self.value(*x).shape())?));
            }
            Op::GatherRows { x, rows } => {
                let xv = self.value(*x);
                let (r, d) = xv.dims2()?;
                let mut dx = vec![0.0; r * d];
                for (k, &i) in rows.iter().enumerate() {
                    let src = &g.data()[k * d..(k + 1) * d];
                    dx[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(a, b)| *a += b);
                }
                out.push((*x, Tensor::new(vec![r, d], dx)?));
            }
            Op::ConcatRows(xs) => {
                let d = g.dims2()?.1;
                let mut offset = 0;
                for &v in xs {
                    let r = self.value(v).dims2()?.0;
                    let part = g.data()[offset * d..(offset + r) * d].to_vec();
                    out.push((v, Tensor::new(vec![r, d], part)?));
                    offset += r;
                }
            }
            Op::NormalizeRows { x, norms } => {
                out.push((
                    *x,
                    ops::l2_normalize_rows_backward(self.value(*x), norms, g)?,
                ));
            }
            Op::WeightedSum(terms) => {
                let gv = g.data()[0];
                for &(v, c) in terms {
                    out.push((v, Tensor::scalar(gv * c)));
                }
            }
            Op::Sum(x) => {
                out.push((*x, Tensor::full(self.value(*x).shape(), g.data()[0])));
            }
            Op::Custom { inputs, rule } => {
                let ins: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
                let grads = rule.backward(&ins, &node.value, g)?;
                for (v, dg) in inputs.iter().zip(grads) {
                    if let Some(dg) = dg {
                        out.push((*v, dg));
                    }
                }
            }
        }
        Ok(out)
    }

    /// Names and handles of every parameter bound so far.
    pub fn bound_params(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.bound.iter()
    }
}

/// Gradients from one reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient for every tensor in `params`; unused parameters get zeros.
    pub fn for_params(&self, graph: &Graph<'_>, params: &ParamSet) -> ParamSet {
        params
            .iter()
            .map(|(name, t)| {
                let g = graph
                    .bound
                    .get(name)
                    .and_then(|v| self.get(*v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (name.clone(), g)
            })
            .collect()
    }
}
