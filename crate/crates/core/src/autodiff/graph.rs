//! Dynamic computation graph with reverse-mode differentiation.
//!
//! Every backward rule is written in terms of [`Var`] operations, so when a
//! gradient is requested with `retain_graph` the returned gradients are graph
//! nodes themselves and can be differentiated again. Without `retain_graph`
//! the rules run with recording disabled and produce constants.
//!
//! Node ids are allocated in creation order, which is a topological order of
//! the graph; the backward sweep walks ids in descending order.

use std::cell::Cell;
use std::collections::HashMap;
use std::fmt;
use std::ops;
use std::rc::Rc;

use super::tensor::{broadcast_shape, Tensor};
use crate::error::{Error, Result};

thread_local! {
    static NEXT_ID: Cell<u64> = const { Cell::new(0) };
    static RECORDING: Cell<bool> = const { Cell::new(true) };
    static LIVE_NODES: Cell<usize> = const { Cell::new(0) };
}

/// Number of graph nodes currently alive on this thread.
pub fn live_nodes() -> usize {
    LIVE_NODES.with(|c| c.get())
}

fn recording() -> bool {
    RECORDING.with(|c| c.get())
}

/// Restores the previous recording mode on drop.
struct RecordingGuard(bool);

impl RecordingGuard {
    fn set(on: bool) -> Self {
        RecordingGuard(RECORDING.with(|c| c.replace(on)))
    }
}

impl Drop for RecordingGuard {
    fn drop(&mut self) {
        RECORDING.with(|c| c.set(self.0));
    }
}

/// Runs `f` without recording any graph edges.
pub fn no_grad<T>(f: impl FnOnce() -> T) -> T {
    let _g = RecordingGuard::set(false);
    f()
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Transpose(Var),
    Sum(Var),
    SumTo(Var),
    BroadcastTo(Var),
    Reshape(Var),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Sigmoid(Var),
    Softplus(Var),
    /// ELU with the constant mask `1[x <= 0]`.
    Elu(Var, Tensor),
    Concat(Vec<Var>, usize),
    Slice { x: Var, axis: usize, start: usize },
    Pad { x: Var, axis: usize, start: usize },
}

impl Op {
    fn parents(&self) -> Vec<&Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![a, b],
            MatMul { a, b, .. } => vec![a, b],
            Neg(x) | Scale(x, _) | Offset(x) | Transpose(x) | Sum(x) | SumTo(x)
            | BroadcastTo(x) | Reshape(x) | Square(x) | Sqrt(x) | Exp(x) | Log(x) | Tanh(x)
            | Sigmoid(x) | Softplus(x) | Elu(x, _) => vec![x],
            Slice { x, .. } | Pad { x, .. } => vec![x],
            Concat(xs, _) => xs.iter().collect(),
        }
    }

    fn take_parents(&mut self) -> Vec<Var> {
        match std::mem::replace(self, Op::Leaf) {
            Op::Leaf => vec![],
            other => other.parents().into_iter().cloned().collect(),
        }
    }
}

struct Node {
    id: u64,
    name: &'static str,
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

impl Drop for Node {
    fn drop(&mut self) {
        LIVE_NODES.with(|c| c.set(c.get().saturating_sub(1)));
        // unlink iteratively so long chains do not recurse on drop
        let mut stack = self.op.take_parents();
        while let Some(v) = stack.pop() {
            if let Ok(mut node) = Rc::try_unwrap(v.0) {
                stack.extend(node.op.take_parents());
            }
        }
    }
}

/// A node of the computation graph. Cloning is cheap (reference counted).
#[derive(Clone)]
pub struct Var(Rc<Node>);

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("op", &self.0.name)
            .field("shape", &self.0.value.shape())
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

fn make(name: &'static str, value: Tensor, op: Op) -> Var {
    let requires_grad = recording() && op.parents().iter().any(|p| p.requires_grad());
    let op = if requires_grad { op } else { Op::Leaf };
    new_node(name, value, op, requires_grad)
}

fn new_node(name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Var {
    let id = NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    });
    LIVE_NODES.with(|c| c.set(c.get() + 1));
    Var(Rc::new(Node {
        id,
        name,
        value,
        op,
        requires_grad,
    }))
}

impl Var {
    /// A leaf node; set `requires_grad` for values to differentiate against.
    pub fn leaf(value: Tensor, requires_grad: bool) -> Var {
        new_node("leaf", value, Op::Leaf, requires_grad)
    }

    pub fn param(value: Tensor) -> Var {
        Var::leaf(value, true)
    }

    pub fn constant(value: Tensor) -> Var {
        Var::leaf(value, false)
    }

    pub fn scalar(x: f64) -> Var {
        Var::constant(Tensor::scalar(x))
    }

    pub fn value(&self) -> &Tensor {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn numel(&self) -> usize {
        self.0.value.numel()
    }

    pub fn item(&self) -> f64 {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn op_name(&self) -> &'static str {
        self.0.name
    }

    fn id(&self) -> u64 {
        self.0.id
    }

    /// A constant copy of this node's value, cut from the graph.
    pub fn detach(&self) -> Var {
        Var::constant(self.value().clone())
    }

    fn broadcast_pair(&self, other: &Var, what: &str) -> (Var, Var) {
        if self.shape() == other.shape() {
            return (self.clone(), other.clone());
        }
        let shape = broadcast_shape(self.shape(), other.shape()).unwrap_or_else(|| {
            panic!(
                "{}: incompatible shapes {:?} and {:?}",
                what,
                self.shape(),
                other.shape()
            )
        });
        (self.broadcast_to(&shape), other.broadcast_to(&shape))
    }

    pub fn add(&self, other: &Var) -> Var {
        let (a, b) = self.broadcast_pair(other, "add");
        let v = a.value().add(b.value());
        make("add", v, Op::Add(a, b))
    }

    pub fn sub(&self, other: &Var) -> Var {
        let (a, b) = self.broadcast_pair(other, "sub");
        let v = a.value().sub(b.value());
        make("sub", v, Op::Sub(a, b))
    }

    pub fn mul(&self, other: &Var) -> Var {
        let (a, b) = self.broadcast_pair(other, "mul");
        let v = a.value().zip_map(b.value(), |x, y| x * y);
        make("mul", v, Op::Mul(a, b))
    }

    pub fn div(&self, other: &Var) -> Var {
        let (a, b) = self.broadcast_pair(other, "div");
        let v = a.value().zip_map(b.value(), |x, y| x / y);
        make("div", v, Op::Div(a, b))
    }

    pub fn neg(&self) -> Var {
        make("neg", self.value().scale(-1.0), Op::Neg(self.clone()))
    }

    pub fn scale(&self, c: f64) -> Var {
        make("scale", self.value().scale(c), Op::Scale(self.clone(), c))
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        make("offset", self.value().map(|x| x + c), Op::Offset(self.clone()))
    }

    /// Matrix product of rank-2 nodes.
    pub fn matmul(&self, other: &Var) -> Var {
        self.matmul_t(other, false, false)
    }

    /// `op(self) · op(other)` with optional transposition of either operand.
    pub fn matmul_t(&self, other: &Var, ta: bool, tb: bool) -> Var {
        let v = self.value().matmul_t(other.value(), ta, tb);
        make(
            "matmul",
            v,
            Op::MatMul {
                a: self.clone(),
                b: other.clone(),
                ta,
                tb,
            },
        )
    }

    pub fn t(&self) -> Var {
        make("transpose", self.value().transpose(), Op::Transpose(self.clone()))
    }

    /// Sum of all entries, as a rank-0 node.
    pub fn sum(&self) -> Var {
        make("sum", Tensor::scalar(self.value().sum()), Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Var {
        let n = self.numel().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums away broadcast dimensions to reach `shape`.
    pub fn sum_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        make("sum_to", self.value().sum_to(shape), Op::SumTo(self.clone()))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        make(
            "broadcast",
            self.value().broadcast_to(shape),
            Op::BroadcastTo(self.clone()),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        if self.shape() == shape {
            return self.clone();
        }
        make("reshape", self.value().reshape(shape), Op::Reshape(self.clone()))
    }

    /// Sum over one axis of a rank-2 node; `axis = 1` gives per-row sums `[n]`.
    pub fn sum_axis(&self, axis: usize) -> Var {
        let s = self.shape();
        assert_eq!(s.len(), 2, "sum_axis expects rank 2, got {:?}", s);
        match axis {
            0 => self.sum_to(&[1, s[1]]).reshape(&[s[1]]),
            1 => self.sum_to(&[s[0], 1]).reshape(&[s[0]]),
            _ => panic!("sum_axis: axis {} out of range", axis),
        }
    }

    pub fn square(&self) -> Var {
        make("square", self.value().map(|x| x * x), Op::Square(self.clone()))
    }

    pub fn sqrt(&self) -> Var {
        make("sqrt", self.value().map(f64::sqrt), Op::Sqrt(self.clone()))
    }

    pub fn exp(&self) -> Var {
        make("exp", self.value().map(f64::exp), Op::Exp(self.clone()))
    }

    pub fn ln(&self) -> Var {
        make("log", self.value().map(f64::ln), Op::Log(self.clone()))
    }

    pub fn tanh(&self) -> Var {
        make("tanh", self.value().map(f64::tanh), Op::Tanh(self.clone()))
    }

    pub fn sigmoid(&self) -> Var {
        make("sigmoid", self.value().map(sigmoid), Op::Sigmoid(self.clone()))
    }

    pub fn softplus(&self) -> Var {
        make("softplus", self.value().map(softplus), Op::Softplus(self.clone()))
    }

    /// Exponential linear unit with unit scale.
    pub fn elu(&self) -> Var {
        let x = self.value();
        let v = x.map(|t| if t > 0.0 { t } else { t.exp_m1() });
        let mask = x.map(|t| if t > 0.0 { 0.0 } else { 1.0 });
        make("elu", v, Op::Elu(self.clone(), mask))
    }

    pub fn concat(parts: &[Var], axis: usize) -> Var {
        let values: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let v = Tensor::concat(&values, axis);
        make("concat", v, Op::Concat(parts.to_vec(), axis))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Var {
        if start == 0 && self.shape().get(axis) == Some(&len) {
            return self.clone();
        }
        make(
            "slice",
            self.value().slice(axis, start, len),
            Op::Slice {
                x: self.clone(),
                axis,
                start,
            },
        )
    }

    fn pad(&self, axis: usize, start: usize, total: usize) -> Var {
        make(
            "pad",
            self.value().pad(axis, start, total),
            Op::Pad {
                x: self.clone(),
                axis,
                start,
            },
        )
    }

    /// Vector-Jacobian products of this node for the parents selected by `want`.
    fn backward(&self, g: &Var, want: &dyn Fn(&Var) -> bool) -> Vec<(Var, Var)> {
        use Op::*;
        let mut out = Vec::new();
        let mut push = |p: &Var, f: &dyn Fn() -> Var| {
            if want(p) {
                out.push((p.clone(), f()));
            }
        };
        match &self.0.op {
            Leaf => {}
            Add(a, b) => {
                push(a, &|| g.clone());
                push(b, &|| g.clone());
            }
            Sub(a, b) => {
                push(a, &|| g.clone());
                push(b, &|| g.neg());
            }
            Mul(a, b) => {
                push(a, &|| g.mul(b));
                push(b, &|| g.mul(a));
            }
            Div(a, b) => {
                push(a, &|| g.div(b));
                push(b, &|| g.mul(self).div(b).neg());
            }
            Neg(x) => push(x, &|| g.neg()),
            Scale(x, c) => push(x, &|| g.scale(*c)),
            Offset(x) => push(x, &|| g.clone()),
            MatMul { a, b, ta, tb } => {
                push(a, &|| {
                    if *ta {
                        b.matmul_t(g, *tb, true)
                    } else {
                        g.matmul_t(b, false, !*tb)
                    }
                });
                push(b, &|| {
                    if *tb {
                        g.matmul_t(a, true, *ta)
                    } else {
                        a.matmul_t(g, !*ta, false)
                    }
                });
            }
            Transpose(x) => push(x, &|| g.t()),
            Sum(x) => push(x, &|| g.broadcast_to(x.shape())),
            SumTo(x) => push(x, &|| g.broadcast_to(x.shape())),
            BroadcastTo(x) => push(x, &|| g.sum_to(x.shape())),
            Reshape(x) => push(x, &|| g.reshape(x.shape())),
            Square(x) => push(x, &|| g.mul(x).scale(2.0)),
            Sqrt(x) => push(x, &|| g.div(self).scale(0.5)),
            Exp(x) => push(x, &|| g.mul(self)),
            Log(x) => push(x, &|| g.div(x)),
            Tanh(x) => push(x, &|| {
                let one_minus = self.square().neg().add_scalar(1.0);
                g.mul(&one_minus)
            }),
            Sigmoid(x) => push(x, &|| {
                let d = self.mul(&self.neg().add_scalar(1.0));
                g.mul(&d)
            }),
            Softplus(x) => push(x, &|| g.mul(&x.sigmoid())),
            Elu(x, mask) => push(x, &|| {
                // elu'(x) = 1 + elu(x)·1[x<=0]
                let d = self.mul(&Var::constant(mask.clone())).add_scalar(1.0);
                g.mul(&d)
            }),
            Concat(xs, axis) => {
                let mut start = 0;
                for x in xs {
                    let len = x.shape()[*axis];
                    push(x, &|| g.slice(*axis, start, len));
                    start += len;
                }
            }
            Slice { x, axis, start } => {
                push(x, &|| g.pad(*axis, *start, x.shape()[*axis]));
            }
            Pad { x, axis, start } => {
                push(x, &|| g.slice(*axis, *start, x.shape()[*axis]));
            }
        }
        out
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

macro_rules! binop {
    ($tr:ident, $m:ident) => {
        impl ops::$tr<&Var> for &Var {
            type Output = Var;
            fn $m(self, rhs: &Var) -> Var {
                Var::$m(self, rhs)
            }
        }
        impl ops::$tr<Var> for Var {
            type Output = Var;
            fn $m(self, rhs: Var) -> Var {
                Var::$m(&self, &rhs)
            }
        }
        impl ops::$tr<&Var> for Var {
            type Output = Var;
            fn $m(self, rhs: &Var) -> Var {
                Var::$m(&self, rhs)
            }
        }
        impl ops::$tr<Var> for &Var {
            type Output = Var;
            fn $m(self, rhs: Var) -> Var {
                Var::$m(self, &rhs)
            }
        }
    };
}

binop!(Add, add);
binop!(Sub, sub);
binop!(Mul, mul);
binop!(Div, div);

impl ops::Neg for &Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(self)
    }
}

impl ops::Neg for Var {
    type Output = Var;
    fn neg(self) -> Var {
        Var::neg(&self)
    }
}

/// Gradients of a scalar `output` with respect to each of `inputs`.
///
/// Inputs may be leaves or intermediate nodes; for an intermediate node the
/// result is the partial derivative holding every other path fixed. Inputs
/// the output does not depend on receive zeros. With `retain_graph` the
/// returned gradients are differentiable graph nodes.
pub fn grad(output: &Var, inputs: &[Var], retain_graph: bool) -> Result<Vec<Var>> {
    if output.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad needs a scalar output, got shape {:?}",
            output.shape()
        )));
    }

    // collect the recorded subgraph
    let mut nodes: Vec<Var> = Vec::new();
    let mut seen: HashMap<u64, ()> = HashMap::new();
    let mut stack = vec![output.clone()];
    while let Some(v) = stack.pop() {
        if seen.insert(v.id(), ()).is_some() {
            continue;
        }
        for p in v.0.op.parents() {
            if !seen.contains_key(&p.id()) {
                stack.push(p.clone());
            }
        }
        nodes.push(v);
    }
    nodes.sort_by_key(|v| v.id());

    if let Some(bad) = nodes.iter().find(|v| !v.value().is_finite()) {
        return Err(Error::Numeric {
            op: bad.op_name().to_string(),
            context: String::new(),
        });
    }

    let index: HashMap<u64, usize> = nodes.iter().enumerate().map(|(i, v)| (v.id(), i)).collect();
    let mut is_input = vec![false; nodes.len()];
    for x in inputs {
        if let Some(&i) = index.get(&x.id()) {
            is_input[i] = true;
        }
    }
    // relevant: the node lies on a path from some input to the output
    let mut relevant = vec![false; nodes.len()];
    for (i, v) in nodes.iter().enumerate() {
        relevant[i] = is_input[i]
            || v.0
                .op
                .parents()
                .iter()
                .any(|p| relevant[index[&p.id()]]);
    }

    let _guard = RecordingGuard::set(retain_graph);
    let mut grads: Vec<Option<Var>> = vec![None; nodes.len()];
    let out_idx = nodes.len() - 1;
    debug_assert_eq!(nodes[out_idx].id(), output.id());
    if relevant[out_idx] {
        grads[out_idx] = Some(Var::constant(Tensor::ones(output.shape())));
    }

    for i in (0..nodes.len()).rev() {
        if !relevant[i] {
            continue;
        }
        let g = if is_input[i] {
            grads[i].clone()
        } else {
            grads[i].take()
        };
        let Some(g) = g else { continue };
        let want = |p: &Var| relevant[index[&p.id()]];
        for (p, pg) in nodes[i].backward(&g, &want) {
            let j = index[&p.id()];
            grads[j] = Some(match grads[j].take() {
                Some(acc) => acc.add(&pg),
                None => pg,
            });
        }
    }

    Ok(inputs
        .iter()
        .map(|x| {
            index
                .get(&x.id())
                .and_then(|&i| grads[i].clone())
                .unwrap_or_else(|| Var::constant(Tensor::zeros(x.shape())))
        })
        .collect())
}

/// Like [`grad`] without retained graph, returning plain tensors.
pub fn grad_values(output: &Var, inputs: &[Var]) -> Result<Vec<Tensor>> {
    Ok(grad(output, inputs, false)?
        .into_iter()
        .map(|g| g.value().clone())
        .collect())
}

/// Largest input dimension for which a dense Hessian is materialized.
pub const HESSIAN_DIM_LIMIT: usize = 32;

/// Dense Hessian of a scalar output with respect to `input` (flattened).
pub fn grad2(output: &Var, input: &Var) -> Result<Tensor> {
    let d = input.numel();
    if d > HESSIAN_DIM_LIMIT {
        return Err(Error::size("Hessian input dimension", d, HESSIAN_DIM_LIMIT));
    }
    let g = grad(output, std::slice::from_ref(input), true)?.remove(0);
    let flat = g.reshape(&[d]);
    let mut h = Vec::with_capacity(d * d);
    for i in 0..d {
        let gi = flat.slice(0, i, 1).sum();
        let row = grad(&gi, std::slice::from_ref(input), false)?.remove(0);
        h.extend_from_slice(row.value().data());
    }
    Ok(Tensor::matrix(d, d, h))
}

/// Hessian-vector product `(∇² output) · vector` by double differentiation.
pub fn hvp(output: &Var, input: &Var, vector: &Tensor) -> Result<Tensor> {
    Ok(hvp_var(output, input, vector, false)?.value().clone())
}

/// Graph-valued Hessian-vector product; differentiable again with `retain_graph`.
pub fn hvp_var(output: &Var, input: &Var, vector: &Tensor, retain_graph: bool) -> Result<Var> {
    if vector.shape() != input.shape() {
        return Err(Error::shape(format!(
            "hvp vector shape {:?} does not match input {:?}",
            vector.shape(),
            input.shape()
        )));
    }
    let g = grad(output, std::slice::from_ref(input), true)?.remove(0);
    let s = g.mul(&Var::constant(vector.clone())).sum();
    Ok(grad(&s, std::slice::from_ref(input), retain_graph)?.remove(0))
}
