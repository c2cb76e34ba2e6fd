//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Every op applied to a tracked input records a node that points at its
//! inputs; node ids grow monotonically, so sorting by id is a topological
//! order. Backward rules are written with the same differentiable tensor ops
//! as the forward pass. With `retain_graph` the rules run on tracked tensors,
//! which records the backward computation itself and makes the returned
//! gradients differentiable again (grad-of-grad). Without it the rules run on
//! detached values and nothing is recorded.
//!
//! The graph lives exactly as long as the tensors referencing it, so a fresh
//! set of leaves per training step gives a fresh tape.

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::rc::Rc;

use crate::array::{Array, PadMode};
use crate::error::{Error, Result};

/// Guard added to `x^2 + y^2` in the atan2 derivative.
pub const ATAN2_EPS: f64 = 1e-12;

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// A user-supplied op whose backward pass is first-order only. Recording a
/// graph-retaining gradient through it is an error.
pub trait CustomOp {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Array]) -> Result<Array>;
    fn backward(&self, inputs: &[&Array], output: &Array, grad: &Array) -> Result<Vec<Array>>;
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Atan2,
    Neg,
    Scale(f64),
    AddScalar,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Sqrt,
    Square,
    Abs,
    Sin,
    Cos,
    Acos { lo: f64, hi: f64 },
    Clamp { lo: f64, hi: f64 },
    Sum,
    SumAxis,
    BroadcastTo,
    SumTo,
    Reshape,
    MatMul,
    Transpose,
    Conv2d(PadMode),
    Conv2dWeightGrad(PadMode),
    FlipTranspose,
    Concat(usize),
    Slice { axis: usize, start: usize },
    Embed { axis: usize, start: usize },
    Pad([usize; 4], PadMode),
    Unpad([usize; 4], PadMode),
    Shift(isize, isize),
    AvgPool2,
    Upsample2,
    Custom(Rc<dyn CustomOp>),
}

impl Op {
    fn name(&self) -> String {
        let s = match self {
            Op::Custom(c) => return c.name().to_string(),
            Op::Leaf => "leaf",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Div => "div",
            Op::Atan2 => "atan2",
            Op::Neg => "neg",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::Relu => "relu",
            Op::LeakyRelu(_) => "leaky_relu",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::Sqrt => "sqrt",
            Op::Square => "square",
            Op::Abs => "abs",
            Op::Sin => "sin",
            Op::Cos => "cos",
            Op::Acos { .. } => "arccos",
            Op::Clamp { .. } => "clamp",
            Op::Sum => "sum",
            Op::SumAxis => "sum_axis",
            Op::BroadcastTo => "broadcast",
            Op::SumTo => "sum_to",
            Op::Reshape => "reshape",
            Op::MatMul => "matmul",
            Op::Transpose => "transpose",
            Op::Conv2d(_) => "conv2d",
            Op::Conv2dWeightGrad(_) => "conv2d_weight_grad",
            Op::FlipTranspose => "flip_transpose",
            Op::Concat(_) => "concat",
            Op::Slice { .. } => "slice",
            Op::Embed { .. } => "embed",
            Op::Pad(..) => "pad",
            Op::Unpad(..) => "unpad",
            Op::Shift(..) => "shift",
            Op::AvgPool2 => "avgpool2x2",
            Op::Upsample2 => "upsample2x",
        };
        s.to_string()
    }
}

struct Node {
    id: u64,
    op: Op,
    inputs: Vec<Tensor>,
    value: Rc<Array>,
}

#[derive(Clone)]
pub struct Tensor {
    value: Rc<Array>,
    node: Option<Rc<Node>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.value.shape())
            .field("node", &self.node.as_ref().map(|n| n.id))
            .finish()
    }
}

impl Tensor {
    /// Untracked value; contributes no gradient.
    pub fn constant(value: Array) -> Self {
        Self { value: Rc::new(value), node: None }
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Array::scalar(v))
    }

    /// A fresh differentiable leaf.
    pub fn leaf(value: Array) -> Self {
        let value = Rc::new(value);
        let node = Node { id: next_id(), op: Op::Leaf, inputs: Vec::new(), value: value.clone() };
        Self { value, node: Some(Rc::new(node)) }
    }

    pub fn value(&self) -> &Array {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn item(&self) -> f64 {
        self.value.item()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    pub fn detach(&self) -> Self {
        Self { value: self.value.clone(), node: None }
    }

    fn from_op(op: Op, inputs: &[&Tensor], value: Array) -> Self {
        let value = Rc::new(value);
        if inputs.iter().any(|t| t.node.is_some()) {
            let node = Node {
                id: next_id(),
                op,
                inputs: inputs.iter().map(|t| (*t).clone()).collect(),
                value: value.clone(),
            };
            Self { value, node: Some(Rc::new(node)) }
        } else {
            Self { value, node: None }
        }
    }

    // ---- elementwise binary (broadcasting) ----

    pub fn add(&self, o: &Tensor) -> Result<Tensor> {
        let v = self.value.zip(&o.value, "add", |a, b| a + b)?;
        Ok(Self::from_op(Op::Add, &[self, o], v))
    }

    pub fn sub(&self, o: &Tensor) -> Result<Tensor> {
        let v = self.value.zip(&o.value, "sub", |a, b| a - b)?;
        Ok(Self::from_op(Op::Sub, &[self, o], v))
    }

    pub fn mul(&self, o: &Tensor) -> Result<Tensor> {
        let v = self.value.zip(&o.value, "mul", |a, b| a * b)?;
        Ok(Self::from_op(Op::Mul, &[self, o], v))
    }

    pub fn div(&self, o: &Tensor) -> Result<Tensor> {
        let v = self.value.zip(&o.value, "div", |a, b| a / b)?;
        Ok(Self::from_op(Op::Div, &[self, o], v))
    }

    /// `atan2(self, x)`: `self` is the y (sine) argument.
    pub fn atan2(&self, x: &Tensor) -> Result<Tensor> {
        let v = self.value.zip(&x.value, "atan2", f64::atan2)?;
        Ok(Self::from_op(Op::Atan2, &[self, x], v))
    }

    pub fn mul_const(&self, c: &Array) -> Result<Tensor> {
        self.mul(&Tensor::constant(c.clone()))
    }

    // ---- elementwise unary ----

    fn unary(&self, op: Op, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value.map(f);
        Self::from_op(op, &[self], v)
    }

    pub fn neg(&self) -> Tensor {
        self.unary(Op::Neg, |a| -a)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(Op::Scale(c), |a| a * c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary(Op::AddScalar, move |a| a + c)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Op::Relu, |a| a.max(0.0))
    }

    pub fn leaky_relu(&self, slope: f64) -> Tensor {
        self.unary(Op::LeakyRelu(slope), |a| if a > 0.0 { a } else { slope * a })
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(Op::Sigmoid, |a| 1.0 / (1.0 + (-a).exp()))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(Op::Tanh, f64::tanh)
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Op::Exp, f64::exp)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(Op::Log, f64::ln)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(Op::Sqrt, f64::sqrt)
    }

    pub fn square(&self) -> Tensor {
        self.unary(Op::Square, |a| a * a)
    }

    pub fn abs(&self) -> Tensor {
        self.unary(Op::Abs, f64::abs)
    }

    pub fn sin(&self) -> Tensor {
        self.unary(Op::Sin, f64::sin)
    }

    pub fn cos(&self) -> Tensor {
        self.unary(Op::Cos, f64::cos)
    }

    /// `acos(clamp(x, -1, 1))` whose derivative is evaluated at
    /// `clamp(x, lo, hi)`: exact values at +-1 with finite gradients there.
    pub fn acos_clamped(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(Op::Acos { lo, hi }, |a| a.clamp(-1.0, 1.0).acos())
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.unary(Op::Clamp { lo, hi }, move |a| a.clamp(lo, hi))
    }

    // ---- reductions and shape ----

    pub fn sum(&self) -> Tensor {
        let v = Array::scalar(self.value.sum());
        Self::from_op(Op::Sum, &[self], v)
    }

    pub fn mean(&self) -> Tensor {
        let n = self.value.len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over `axis`, keeping it with size 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        let v = self.value.sum_axis(axis)?;
        Ok(Self::from_op(Op::SumAxis, &[self], v))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        let n = *self.shape().get(axis).unwrap_or(&1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / n))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let v = self.value.broadcast_to(shape)?;
        Ok(Self::from_op(Op::BroadcastTo, &[self], v))
    }

    pub fn sum_to(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let v = self.value.sum_to(shape)?;
        Ok(Self::from_op(Op::SumTo, &[self], v))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let v = self.value.reshaped(shape)?;
        Ok(Self::from_op(Op::Reshape, &[self], v))
    }

    pub fn matmul(&self, o: &Tensor) -> Result<Tensor> {
        let v = self.value.matmul(&o.value)?;
        Ok(Self::from_op(Op::MatMul, &[self, o], v))
    }

    /// Swap the two trailing axes.
    pub fn transpose(&self) -> Result<Tensor> {
        let v = self.value.transpose_last2()?;
        Ok(Self::from_op(Op::Transpose, &[self], v))
    }

    /// Stride-1 same-size convolution; `self: [n,ci,h,w]`, `w: [co,ci,k,k]`.
    pub fn conv2d(&self, w: &Tensor, mode: PadMode) -> Result<Tensor> {
        let v = self.value.conv2d(&w.value, mode)?;
        Ok(Self::from_op(Op::Conv2d(mode), &[self, w], v))
    }

    fn conv2d_weight_grad(&self, g: &Tensor, k: usize, mode: PadMode) -> Result<Tensor> {
        let v = self.value.conv2d_weight_grad(&g.value, k, mode)?;
        Ok(Self::from_op(Op::Conv2dWeightGrad(mode), &[self, g], v))
    }

    fn flip_transpose(&self) -> Result<Tensor> {
        let v = self.value.flip_transpose()?;
        Ok(Self::from_op(Op::FlipTranspose, &[self], v))
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let arrays: Vec<&Array> = parts.iter().map(|t| t.value()).collect();
        let v = Array::concat(&arrays, axis)?;
        Ok(Self::from_op(Op::Concat(axis), parts, v))
    }

    /// Concatenate along a new axis.
    pub fn stack(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let expanded = parts
            .iter()
            .map(|t| {
                let mut s = t.shape().to_vec();
                if axis > s.len() {
                    return Err(Error::Shape { op: "stack", detail: format!("axis {axis} for shape {s:?}") });
                }
                s.insert(axis, 1);
                t.reshape(&s)
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = expanded.iter().collect();
        Tensor::concat(&refs, axis)
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let v = self.value.slice(axis, start, len)?;
        Ok(Self::from_op(Op::Slice { axis, start }, &[self], v))
    }

    fn embed(&self, axis: usize, start: usize, full: usize) -> Result<Tensor> {
        let v = self.value.embed(axis, start, full)?;
        Ok(Self::from_op(Op::Embed { axis, start }, &[self], v))
    }

    /// Pad the two trailing axes by `(top, bottom, left, right)`.
    pub fn pad(&self, amounts: [usize; 4], mode: PadMode) -> Result<Tensor> {
        let v = self.value.pad(amounts, mode)?;
        Ok(Self::from_op(Op::Pad(amounts, mode), &[self], v))
    }

    fn unpad(&self, amounts: [usize; 4], mode: PadMode) -> Result<Tensor> {
        let v = self.value.unpad(amounts, mode)?;
        Ok(Self::from_op(Op::Unpad(amounts, mode), &[self], v))
    }

    /// Circular shift of the trailing two axes by `(dy, dx)`.
    pub fn shift(&self, dy: isize, dx: isize) -> Result<Tensor> {
        let v = self.value.shift(dy, dx)?;
        Ok(Self::from_op(Op::Shift(dy, dx), &[self], v))
    }

    pub fn avgpool2(&self) -> Result<Tensor> {
        let v = self.value.avgpool2()?;
        Ok(Self::from_op(Op::AvgPool2, &[self], v))
    }

    pub fn upsample2(&self) -> Result<Tensor> {
        let v = self.value.upsample2()?;
        Ok(Self::from_op(Op::Upsample2, &[self], v))
    }

    /// Mean over the two trailing axes of `[n, c, h, w]`, giving `[n, c]`.
    pub fn global_mean(&self) -> Result<Tensor> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(Error::Shape { op: "global_mean", detail: format!("expected rank 4, got {s:?}") });
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        self.reshape(&[n, c, hw])?.sum_axis(2)?.reshape(&[n, c]).map(|t| t.scale(1.0 / hw as f64))
    }

    pub fn custom(op: Rc<dyn CustomOp>, inputs: &[&Tensor]) -> Result<Tensor> {
        let arrays: Vec<&Array> = inputs.iter().map(|t| t.value()).collect();
        let v = op.forward(&arrays)?;
        Ok(Self::from_op(Op::Custom(op), inputs, v))
    }
}

fn mask(x: &Array, f: impl Fn(f64) -> bool) -> Array {
    x.map(|v| if f(v) { 1.0 } else { 0.0 })
}

/// Gradients of `op` w.r.t. each input flagged in `need`.
///
/// `ins` are tracked inputs in retain mode and detached values otherwise;
/// `out` is only used outside retain mode (inside it, outputs needed by a rule
/// are recomputed from the tracked inputs so they stay differentiable).
fn backward_rule(op: &Op, ins: &[Tensor], out: &Tensor, g: &Tensor, need: &[bool], retain: bool) -> Result<Vec<Option<Tensor>>> {
    let want = |i: usize| need.get(i).copied().unwrap_or(false);
    let one = |t: Result<Tensor>| -> Result<Vec<Option<Tensor>>> { Ok(vec![Some(t?)]) };
    let out_or = |f: &dyn Fn() -> Tensor| if retain { f() } else { out.clone() };
    match op {
        Op::Leaf => Ok(vec![]),
        Op::Add => Ok(vec![
            want(0).then(|| g.sum_to(ins[0].shape())).transpose()?,
            want(1).then(|| g.sum_to(ins[1].shape())).transpose()?,
        ]),
        Op::Sub => Ok(vec![
            want(0).then(|| g.sum_to(ins[0].shape())).transpose()?,
            want(1).then(|| g.neg().sum_to(ins[1].shape())).transpose()?,
        ]),
        Op::Mul => Ok(vec![
            want(0).then(|| g.mul(&ins[1])?.sum_to(ins[0].shape())).transpose()?,
            want(1).then(|| g.mul(&ins[0])?.sum_to(ins[1].shape())).transpose()?,
        ]),
        Op::Div => Ok(vec![
            want(0).then(|| g.div(&ins[1])?.sum_to(ins[0].shape())).transpose()?,
            want(1)
                .then(|| g.mul(&ins[0])?.div(&ins[1].square())?.neg().sum_to(ins[1].shape()))
                .transpose()?,
        ]),
        Op::Atan2 => {
            let (y, x) = (&ins[0], &ins[1]);
            let r = x.square().add(&y.square())?.add_scalar(ATAN2_EPS);
            Ok(vec![
                want(0).then(|| g.mul(x)?.div(&r)?.sum_to(y.shape())).transpose()?,
                want(1).then(|| g.mul(y)?.div(&r)?.neg().sum_to(x.shape())).transpose()?,
            ])
        }
        Op::Neg => one(Ok(g.neg())),
        Op::Scale(c) => one(Ok(g.scale(*c))),
        Op::AddScalar => one(Ok(g.clone())),
        Op::Relu => one(g.mul_const(&mask(ins[0].value(), |v| v > 0.0))),
        Op::LeakyRelu(s) => {
            let s = *s;
            one(g.mul_const(&ins[0].value().map(|v| if v > 0.0 { 1.0 } else { s })))
        }
        Op::Sigmoid => {
            let s = out_or(&|| ins[0].sigmoid());
            one(g.mul(&s)?.mul(&s.neg().add_scalar(1.0)))
        }
        Op::Tanh => {
            let t = out_or(&|| ins[0].tanh());
            one(g.mul(&t.square().neg().add_scalar(1.0)))
        }
        Op::Exp => {
            let e = out_or(&|| ins[0].exp());
            one(g.mul(&e))
        }
        Op::Log => one(g.div(&ins[0])),
        Op::Sqrt => {
            let s = out_or(&|| ins[0].sqrt());
            one(g.div(&s).map(|t| t.scale(0.5)))
        }
        Op::Square => one(g.mul(&ins[0]).map(|t| t.scale(2.0))),
        Op::Abs => one(g.mul_const(&ins[0].value().map(|v| if v > 0.0 { 1.0 } else if v < 0.0 { -1.0 } else { 0.0 }))),
        Op::Sin => one(g.mul(&ins[0].cos())),
        Op::Cos => one(g.mul(&ins[0].sin()).map(|t| t.neg())),
        Op::Acos { lo, hi } => {
            let d = ins[0].clamp(*lo, *hi).square().neg().add_scalar(1.0).sqrt();
            one(g.div(&d).map(|t| t.neg()))
        }
        Op::Clamp { lo, hi } => {
            let (lo, hi) = (*lo, *hi);
            one(g.mul_const(&mask(ins[0].value(), |v| v >= lo && v <= hi)))
        }
        Op::Sum | Op::SumAxis | Op::SumTo => one(g.broadcast_to(ins[0].shape())),
        Op::BroadcastTo => one(g.sum_to(ins[0].shape())),
        Op::Reshape => one(g.reshape(ins[0].shape())),
        Op::MatMul => Ok(vec![
            want(0).then(|| g.matmul(&ins[1].transpose()?)).transpose()?,
            want(1).then(|| ins[0].transpose()?.matmul(g)).transpose()?,
        ]),
        Op::Transpose => one(g.transpose()),
        Op::Conv2d(mode) => {
            let (x, w) = (&ins[0], &ins[1]);
            let k = w.shape()[2];
            Ok(vec![
                want(0).then(|| g.conv2d(&w.flip_transpose()?, *mode)).transpose()?,
                want(1).then(|| x.conv2d_weight_grad(g, k, *mode)).transpose()?,
            ])
        }
        Op::Conv2dWeightGrad(mode) => {
            // out = wgrad(x, gy); g has the weight shape.
            let (x, gy) = (&ins[0], &ins[1]);
            Ok(vec![
                want(0).then(|| gy.conv2d(&g.flip_transpose()?, *mode)).transpose()?,
                want(1).then(|| x.conv2d(g, *mode)).transpose()?,
            ])
        }
        Op::FlipTranspose => one(g.flip_transpose()),
        Op::Concat(axis) => {
            let mut start = 0;
            let mut res = Vec::with_capacity(ins.len());
            for (i, t) in ins.iter().enumerate() {
                let len = t.shape()[*axis];
                res.push(want(i).then(|| g.slice(*axis, start, len)).transpose()?);
                start += len;
            }
            Ok(res)
        }
        Op::Slice { axis, start } => one(g.embed(*axis, *start, ins[0].shape()[*axis])),
        Op::Embed { axis, start } => one(g.slice(*axis, *start, ins[0].shape()[*axis])),
        Op::Pad(a, m) => one(g.unpad(*a, *m)),
        Op::Unpad(a, m) => one(g.pad(*a, *m)),
        Op::Shift(dy, dx) => one(g.shift(-dy, -dx)),
        Op::AvgPool2 => one(g.upsample2().map(|t| t.scale(0.25))),
        Op::Upsample2 => one(g.avgpool2().map(|t| t.scale(4.0))),
        Op::Custom(c) => {
            if retain {
                return Err(Error::NoDoubleBackward { op: c.name().to_string() });
            }
            let arrays: Vec<&Array> = ins.iter().map(|t| t.value()).collect();
            let grads = c.backward(&arrays, out.value(), g.value())?;
            Ok(grads.into_iter().map(|a| Some(Tensor::constant(a))).collect())
        }
    }
}

/// Gradient of a scalar `loss` w.r.t. each tensor in `wrt`.
///
/// Tensors that do not influence the loss (or are untracked) get zeros of
/// their own shape. With `retain_graph`, the returned gradients are tracked
/// and can be differentiated again.
pub fn grad(loss: &Tensor, wrt: &[&Tensor], retain_graph: bool) -> Result<Vec<Tensor>> {
    if loss.value().len() != 1 {
        return Err(Error::NonScalarLoss(loss.shape().to_vec()));
    }
    let zeros = |t: &Tensor| Tensor::constant(Array::zeros(t.shape()));
    let Some(root) = loss.node.clone() else {
        return Ok(wrt.iter().map(|t| zeros(t)).collect());
    };
    let targets: HashMap<u64, usize> =
        wrt.iter().enumerate().filter_map(|(i, t)| t.node.as_ref().map(|n| (n.id, i))).collect();

    // Mark nodes lying on a path from the root to a requested tensor.
    let mut relevant: HashMap<u64, bool> = HashMap::new();
    let mut nodes: HashMap<u64, Rc<Node>> = HashMap::new();
    let mut stack: Vec<(Rc<Node>, bool)> = vec![(root.clone(), false)];
    while let Some((node, expanded)) = stack.pop() {
        if relevant.contains_key(&node.id) {
            continue;
        }
        if expanded {
            let r = targets.contains_key(&node.id)
                || node.inputs.iter().any(|t| t.node.as_ref().is_some_and(|n| relevant[&n.id]));
            relevant.insert(node.id, r);
            nodes.insert(node.id, node);
        } else {
            stack.push((node.clone(), true));
            for t in &node.inputs {
                if let Some(n) = &t.node {
                    if !relevant.contains_key(&n.id) {
                        stack.push((n.clone(), false));
                    }
                }
            }
        }
    }
    let mut order: Vec<u64> = relevant.iter().filter(|(_, &r)| r).map(|(&id, _)| id).collect();
    order.sort_unstable_by(|a, b| b.cmp(a));

    let mut grads: HashMap<u64, Tensor> = HashMap::new();
    grads.insert(root.id, Tensor::constant(Array::full(loss.shape(), 1.0)));
    let mut out: Vec<Option<Tensor>> = vec![None; wrt.len()];
    for id in order {
        let node = &nodes[&id];
        let Some(g) = grads.remove(&id) else { continue };
        if let Some(&i) = targets.get(&id) {
            out[i] = Some(g.clone());
        }
        if node.inputs.is_empty() {
            continue;
        }
        let need: Vec<bool> =
            node.inputs.iter().map(|t| t.node.as_ref().is_some_and(|n| relevant[&n.id])).collect();
        let in_grads = if retain_graph {
            let o = Tensor { value: node.value.clone(), node: None };
            backward_rule(&node.op, &node.inputs, &o, &g, &need, true)
        } else {
            let ins: Vec<Tensor> = node.inputs.iter().map(Tensor::detach).collect();
            let o = Tensor { value: node.value.clone(), node: None };
            backward_rule(&node.op, &ins, &o, &g.detach(), &need, false)
        }
        .map_err(|e| match e {
            Error::Shape { detail, .. } => Error::Internal(format!("backward of {}: {detail}", node.op.name())),
            other => other,
        })?;
        for ((t, gi), needed) in node.inputs.iter().zip(in_grads).zip(&need) {
            let (Some(n), Some(gi), true) = (&t.node, gi, *needed) else { continue };
            let acc = match grads.remove(&n.id) {
                Some(prev) => prev.add(&gi)?,
                None => gi,
            };
            grads.insert(n.id, acc);
        }
    }
    Ok(out.into_iter().zip(wrt).map(|(g, t)| g.unwrap_or_else(|| zeros(t))).collect())
}

/// Maximum relative error between autodiff and central finite differences of
/// a scalar function, over all inputs. Relative error per input is
/// `|ad - fd|_2 / max(|ad|_2, |fd|_2)`.
pub fn check_gradients(f: impl Fn(&[Tensor]) -> Result<Tensor>, inputs: &[Array], h: f64) -> Result<f64> {
    let leaves: Vec<Tensor> = inputs.iter().cloned().map(Tensor::leaf).collect();
    let loss = f(&leaves)?;
    let refs: Vec<&Tensor> = leaves.iter().collect();
    let analytic = grad(&loss, &refs, false)?;
    let eval = |vals: &[Array]| -> Result<f64> {
        let ts: Vec<Tensor> = vals.iter().cloned().map(Tensor::constant).collect();
        Ok(f(&ts)?.item())
    };
    let mut worst: f64 = 0.0;
    for (i, a) in analytic.iter().enumerate() {
        let mut vals: Vec<Array> = inputs.to_vec();
        let mut diff2 = 0.0;
        let mut ad2 = 0.0;
        let mut fd2 = 0.0;
        for k in 0..inputs[i].len() {
            let orig = inputs[i].data()[k];
            vals[i].data_mut()[k] = orig + h;
            let up = eval(&vals)?;
            vals[i].data_mut()[k] = orig - h;
            let down = eval(&vals)?;
            vals[i].data_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let ad = a.value().data()[k];
            diff2 += (ad - fd) * (ad - fd);
            ad2 += ad * ad;
            fd2 += fd * fd;
        }
        let denom = ad2.sqrt().max(fd2.sqrt()).max(1e-300);
        worst = worst.max(diff2.sqrt() / denom);
    }
    Ok(worst)
}
