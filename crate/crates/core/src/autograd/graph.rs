use crate::error::{shape_err, Error, Result};

use super::kernels;
use super::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Primitive operations understood by the tape.
#[derive(Clone, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Div,
    MatMul,
    Transpose,
    Exp,
    Log,
    Pow2,
    Sqrt,
    Negate,
    Relu,
    /// `None` reduces every element to a scalar; `Some(axis)` keeps the axis with extent 1.
    Sum(Option<usize>),
    Mean(Option<usize>),
    Concat(usize),
    Slice { axis: usize, start: usize, len: usize },
    Broadcast(Vec<usize>),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Exp(Var),
    Log(Var),
    Pow2(Var),
    Sqrt(Var),
    Negate(Var),
    Relu(Var),
    Reduce { input: Var, axis: Option<usize>, mean: bool },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Broadcast(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of primitive records in creation (topological) order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires them.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` for constants and for nodes the loss does not depend on.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn get_or_zeros(&self, graph: &Graph, v: Var) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(graph.value(v).shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of nodes holding a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Euclidean norm of the gradient at `v` (zero when absent).
    pub fn norm(&self, v: Var) -> f64 {
        self.get(v).map_or(0.0, Tensor::norm)
    }
}

fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!("{what} produced a non-finite value")))
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node; outstanding `Var`s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Constant leaf: never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Returns a constant copy of `v`'s current value (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Generic entry point dispatching on [`OpKind`].
    pub fn apply(&mut self, kind: OpKind, inputs: &[Var]) -> Result<Var> {
        let unary = |inputs: &[Var]| -> Result<Var> {
            match inputs {
                [a] => Ok(*a),
                _ => Err(Error::Contract(format!("{kind:?} takes one input, got {}", inputs.len()))),
            }
        };
        let binary = |inputs: &[Var]| -> Result<(Var, Var)> {
            match inputs {
                [a, b] => Ok((*a, *b)),
                _ => Err(Error::Contract(format!("{kind:?} takes two inputs, got {}", inputs.len()))),
            }
        };
        match &kind {
            OpKind::Add => binary(inputs).and_then(|(a, b)| self.add(a, b)),
            OpKind::Sub => binary(inputs).and_then(|(a, b)| self.sub(a, b)),
            OpKind::Mul => binary(inputs).and_then(|(a, b)| self.mul(a, b)),
            OpKind::Div => binary(inputs).and_then(|(a, b)| self.div(a, b)),
            OpKind::MatMul => binary(inputs).and_then(|(a, b)| self.matmul(a, b)),
            OpKind::Transpose => unary(inputs).and_then(|a| self.transpose(a)),
            OpKind::Exp => unary(inputs).and_then(|a| self.exp(a)),
            OpKind::Log => unary(inputs).and_then(|a| self.log(a)),
            OpKind::Pow2 => unary(inputs).map(|a| self.pow2(a)),
            OpKind::Sqrt => unary(inputs).and_then(|a| self.sqrt(a)),
            OpKind::Negate => unary(inputs).map(|a| self.neg(a)),
            OpKind::Relu => unary(inputs).map(|a| self.relu(a)),
            OpKind::Sum(axis) => unary(inputs).and_then(|a| self.sum(a, *axis)),
            OpKind::Mean(axis) => unary(inputs).and_then(|a| self.mean(a, *axis)),
            OpKind::Concat(axis) => self.concat(inputs, *axis),
            OpKind::Slice { axis, start, len } => {
                unary(inputs).and_then(|a| self.slice(a, *axis, *start, *len))
            }
            OpKind::Broadcast(shape) => unary(inputs).and_then(|a| self.broadcast_to(a, shape)),
        }
    }

    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let out_shape = kernels::broadcast_shape(self.shape(a), shape)?;
        if out_shape != shape {
            return Err(shape_err!("cannot broadcast {:?} to {:?}", self.shape(a), shape));
        }
        let value = kernels::broadcast(self.value(a), shape);
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Broadcast(a), rg))
    }

    fn align(&mut self, a: Var, b: Var) -> Result<(Var, Var)> {
        if self.shape(a) == self.shape(b) {
            return Ok((a, b));
        }
        let shape = kernels::broadcast_shape(self.shape(a), self.shape(b))?;
        Ok((self.broadcast_to(a, &shape)?, self.broadcast_to(b, &shape)?))
    }

    fn zip(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<(Var, Var, Tensor)> {
        let (a, b) = self.align(a, b)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        Ok((a, b, t))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, t) = self.zip(a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, t) = self.zip(a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b, t) = self.zip(a, b, |x, y| x * y)?;
        check_finite(&t, "mul")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(b).data().iter().any(|&v| v == 0.0) {
            return Err(Error::Domain("division by zero".into()));
        }
        let (a, b, t) = self.zip(a, b, |x, y| x / y)?;
        check_finite(&t, "div")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Div(a, b), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err!("matmul {:?} x {:?}", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(m, k, n, self.value(a).data(), false, self.value(b).data(), false, &mut out);
        let t = Tensor::new(vec![m, n], out)?;
        check_finite(&t, "matmul")?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = kernels::transpose(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(f64::exp);
        check_finite(&t, "exp")?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Exp(a), rg))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v <= 0.0) {
            return Err(Error::Domain("log of a non-positive value".into()));
        }
        let t = self.value(a).map(f64::ln);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Log(a), rg))
    }

    pub fn pow2(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v * v);
        let rg = self.rg(&[a]);
        self.push(t, Op::Pow2(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if self.value(a).data().iter().any(|&v| v < 0.0) {
            return Err(Error::Domain("sqrt of a negative value".into()));
        }
        let t = self.value(a).map(f64::sqrt);
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Sqrt(a), rg))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| -v);
        let rg = self.rg(&[a]);
        self.push(t, Op::Negate(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(&[a]);
        self.push(t, Op::Relu(a), rg)
    }

    fn reduce(&mut self, a: Var, axis: Option<usize>, mean: bool) -> Result<Var> {
        let t = kernels::reduce(self.value(a), axis, mean)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Reduce { input: a, axis, mean }, rg))
    }

    pub fn sum(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, axis, false)
    }

    pub fn mean(&mut self, a: Var, axis: Option<usize>) -> Result<Var> {
        self.reduce(a, axis, true)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = inputs.iter().map(|v| self.value(*v)).collect();
        let t = kernels::concat(&values, axis)?;
        let rg = self.rg(inputs);
        Ok(self.push(t, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = kernels::slice(self.value(a), axis, start, len)?;
        let rg = self.rg(&[a]);
        Ok(self.push(t, Op::Slice { input: a, axis, start }, rg))
    }

    // Conveniences built from the primitives above.

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::scalar(c));
        self.mul(a, k)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let k = self.constant(Tensor::scalar(c));
        self.add(a, k)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.shape().is_empty() {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for id in (0..=loss.0).rev() {
            let Some(gout) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            self.propagate(node, &gout, &mut grads)?;
            grads[id] = Some(gout);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, gout: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let mut acc = |v: Var, g: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                        *e += x;
                    }
                }
                slot => *slot = Some(g),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        let zipmap = |a: &Tensor, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            let data = a.data().iter().zip(gout.data()).map(|(&x, &g)| f(x, g)).collect();
            Tensor::new(a.shape().to_vec(), data).expect("same shape")
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, gout.clone());
                acc(*b, gout.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, gout.clone());
                acc(*b, gout.map(|g| -g));
            }
            Op::Mul(a, b) => {
                acc(*a, zipmap(val(*b), &|y, g| y * g));
                acc(*b, zipmap(val(*a), &|x, g| x * g));
            }
            Op::Div(a, b) => {
                let vb = val(*b);
                acc(*a, zipmap(vb, &|y, g| g / y));
                let out = &node.value;
                let data = vb
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(gout.data())
                    .map(|((&y, &o), &g)| -g * o / y)
                    .collect();
                acc(*b, Tensor::new(vb.shape().to_vec(), data)?);
            }
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(m, n, k, gout.data(), false, vb.data(), true, &mut da);
                    acc(*a, Tensor::new(vec![m, k], da)?);
                }
                if self.nodes[b.0].requires_grad {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(k, m, n, va.data(), true, gout.data(), false, &mut db);
                    acc(*b, Tensor::new(vec![k, n], db)?);
                }
            }
            Op::Transpose(a) => acc(*a, kernels::transpose(gout)?),
            Op::Exp(a) => acc(*a, zipmap(&node.value, &|o, g| o * g)),
            Op::Log(a) => acc(*a, zipmap(val(*a), &|x, g| g / x)),
            Op::Pow2(a) => acc(*a, zipmap(val(*a), &|x, g| 2.0 * x * g)),
            Op::Sqrt(a) => acc(*a, zipmap(&node.value, &|o, g| g / (2.0 * o))),
            Op::Negate(a) => acc(*a, gout.map(|g| -g)),
            Op::Relu(a) => acc(*a, zipmap(val(*a), &|x, g| if x > 0.0 { g } else { 0.0 })),
            Op::Reduce { input, axis, mean } => {
                acc(*input, kernels::reduce_backward(val(*input).shape(), gout, *axis, *mean));
            }
            Op::Concat { inputs, axis } => {
                let mut start = 0;
                for v in inputs {
                    let len = val(*v).shape()[*axis];
                    acc(*v, kernels::slice(gout, *axis, start, len)?);
                    start += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let shape = val(*input).shape();
                acc(*input, kernels::unslice(shape, gout, *axis, *start));
            }
            Op::Broadcast(a) => acc(*a, kernels::unbroadcast(val(*a).shape(), gout)),
        }
        Ok(())
    }
}
