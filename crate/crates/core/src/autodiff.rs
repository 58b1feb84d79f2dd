//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op applied to tracked [`Var`]s in creation
//! order, which is already a topological order. [`Graph::backward`] replays
//! the record in reverse, visiting each op once. Vars that do not depend on
//! a tracked leaf are never recorded, and a graph built with
//! [`Graph::no_grad`] records nothing, so inference keeps only live values.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{
    axis_split, gemm_nn, gemm_tn, reduce_to_shape, zip_broadcast, MatmulPlan, Scalar, Tensor,
    TensorSet,
};

/// Additive sentinel used for masked attention logits.
pub const DEFAULT_MASK_VALUE: f64 = -1e9;

/// Conditions that are tolerated but reported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GraphFlags {
    /// A softmax row was masked everywhere and fell back to uniform.
    pub degenerate_mask: bool,
    /// Distal context was requested with a single agent and replaced by zeros.
    pub degenerate_distal: bool,
}

/// Backward rule for an op whose forward is computed outside the graph.
pub trait CustomOp<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Gradients for each input (None where no gradient flows).
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>>;
}

pub enum Mask<T> {
    /// Hides column j from row i whenever j > i (last two axes).
    Causal,
    /// Added to the logits; entries at or below the graph's mask value count as masked.
    Additive(Tensor<T>),
}

enum Op<T: Scalar> {
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    Scale(T),
    AddScalar,
    Tanh,
    Exp,
    Ln,
    Sqrt,
    Square,
    MatMul,
    Transpose,
    Permute(Vec<usize>),
    Reshape,
    BroadcastTo,
    SumAxis { axis: usize, keepdim: bool },
    SumAll,
    Softmax { degenerate_rows: Vec<usize> },
    Cumsum { axis: usize },
    Embedding { ids: Vec<usize> },
    Custom(Box<dyn CustomOp<T>>),
}

struct Node<T: Scalar> {
    op: Op<T>,
    parents: Vec<Option<usize>>,
    inputs: Vec<Rc<Tensor<T>>>,
    value: Rc<Tensor<T>>,
}

pub struct Graph<T: Scalar> {
    nodes: RefCell<Vec<Node<T>>>,
    params: RefCell<Vec<(String, usize)>>,
    recording: bool,
    mask_value: f64,
    flags: Cell<GraphFlags>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            params: RefCell::new(Vec::new()),
            recording: true,
            mask_value: DEFAULT_MASK_VALUE,
            flags: Cell::new(GraphFlags::default()),
        }
    }

    /// A graph that computes values only.
    pub fn no_grad() -> Self {
        Graph {
            recording: false,
            ..Self::new()
        }
    }

    pub fn with_mask_value(mut self, mask_value: f64) -> Self {
        self.mask_value = mask_value;
        self
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn mask_value(&self) -> f64 {
        self.mask_value
    }

    /// Number of recorded ops (leaves included).
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flags(&self) -> GraphFlags {
        self.flags.get()
    }

    pub(crate) fn raise(&self, f: impl FnOnce(&mut GraphFlags)) {
        let mut flags = self.flags.get();
        f(&mut flags);
        self.flags.set(flags);
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<'_, T> {
        Var {
            graph: self,
            id: None,
            value: Rc::new(value),
        }
    }

    /// An anonymous tracked leaf.
    pub fn variable(&self, value: Tensor<T>) -> Var<'_, T> {
        if !self.recording {
            return self.constant(value);
        }
        let value = Rc::new(value);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op: Op::Leaf,
            parents: vec![],
            inputs: vec![],
            value: value.clone(),
        });
        Var {
            graph: self,
            id: Some(nodes.len() - 1),
            value,
        }
    }

    /// A named tracked leaf; its gradient is reported by [`Gradients::named`].
    pub fn param(&self, name: &str, value: Tensor<T>) -> Var<'_, T> {
        let var = self.variable(value);
        if let Some(id) = var.id {
            self.params.borrow_mut().push((name.to_string(), id));
        }
        var
    }

    fn record(&self, op: Op<T>, inputs: &[&Var<'_, T>], value: Tensor<T>, what: &str) -> Result<Var<'_, T>> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("{what} produced non-finite values")));
        }
        let value = Rc::new(value);
        let tracked = self.recording && inputs.iter().any(|v| v.id.is_some());
        if !tracked {
            return Ok(Var {
                graph: self,
                id: None,
                value,
            });
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            parents: inputs.iter().map(|v| v.id).collect(),
            inputs: inputs.iter().map(|v| v.value.clone()).collect(),
            value: value.clone(),
        });
        Ok(Var {
            graph: self,
            id: Some(nodes.len() - 1),
            value,
        })
    }

    /// Records an op computed by the caller with a hand-written backward rule.
    pub fn custom<'g>(
        &'g self,
        inputs: &[&Var<'g, T>],
        output: Tensor<T>,
        op: Box<dyn CustomOp<T>>,
    ) -> Result<Var<'g, T>> {
        let name = op.name();
        self.record(Op::Custom(op), inputs, output, name)
    }

    /// Gathers rows of `table` (`[V, E]`) into an `[ids.len(), E]` tensor.
    pub fn embedding<'g>(&'g self, table: &Var<'g, T>, ids: &[usize]) -> Result<Var<'g, T>> {
        let t = table.value();
        if t.ndim() != 2 {
            return Err(Error::dim(format!(
                "embedding table must be 2-D, got {:?}",
                t.shape()
            )));
        }
        let (v, e) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * e);
        for &id in ids {
            if id >= v {
                return Err(Error::Index { id, size: v });
            }
            data.extend_from_slice(&t.data()[id * e..(id + 1) * e]);
        }
        let out = Tensor::new(&[ids.len(), e], data)?;
        self.record(Op::Embedding { ids: ids.to_vec() }, &[table], out, "embedding")
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: &Var<'_, T>) -> Result<Gradients<T>> {
        if loss.value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.value.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Tensor<T>>> = (0..nodes.len()).map(|_| None).collect();
        if let Some(id) = loss.id {
            grads[id] = Some(Tensor::full(loss.value.shape(), T::one()));
            for i in (0..=id).rev() {
                let Some(g) = grads[i].take() else { continue };
                let node = &nodes[i];
                if node.parents.iter().any(Option::is_some) {
                    let inputs: Vec<&Tensor<T>> = node.inputs.iter().map(|t| t.as_ref()).collect();
                    let parent_grads = node_backward(&node.op, &inputs, &node.value, &g)?;
                    for (parent, pg) in node.parents.iter().zip(parent_grads) {
                        if let (Some(p), Some(pg)) = (parent, pg) {
                            match &mut grads[*p] {
                                Some(acc) => acc.add_assign(&pg)?,
                                slot => *slot = Some(pg),
                            }
                        }
                    }
                }
                grads[i] = Some(g);
            }
        }
        let params = self
            .params
            .borrow()
            .iter()
            .map(|(name, id)| (name.clone(), *id, nodes[*id].value.shape().to_vec()))
            .collect();
        Ok(Gradients { grads, params })
    }
}

fn node_backward<T: Scalar>(
    op: &Op<T>,
    inputs: &[&Tensor<T>],
    out: &Tensor<T>,
    g: &Tensor<T>,
) -> Result<Vec<Option<Tensor<T>>>> {
    let one = |t: Tensor<T>| Ok(vec![Some(t)]);
    match op {
        Op::Leaf => Ok(vec![]),
        Op::Add => Ok(vec![
            Some(reduce_to_shape(g, inputs[0].shape())?),
            Some(reduce_to_shape(g, inputs[1].shape())?),
        ]),
        Op::Sub => Ok(vec![
            Some(reduce_to_shape(g, inputs[0].shape())?),
            Some(reduce_to_shape(&g.scale(-T::one()), inputs[1].shape())?),
        ]),
        Op::Mul => Ok(vec![
            Some(reduce_to_shape(&zip_broadcast(g, inputs[1], |g, b| g * b)?, inputs[0].shape())?),
            Some(reduce_to_shape(&zip_broadcast(g, inputs[0], |g, a| g * a)?, inputs[1].shape())?),
        ]),
        Op::Div => {
            let ga = zip_broadcast(g, inputs[1], |g, b| g / b)?;
            let gb = zip_broadcast(&ga, out, |gb, y| -gb * y)?;
            Ok(vec![
                Some(reduce_to_shape(&ga, inputs[0].shape())?),
                Some(reduce_to_shape(&gb, inputs[1].shape())?),
            ])
        }
        Op::Scale(s) => one(g.scale(*s)),
        Op::AddScalar => one(g.clone()),
        Op::Tanh => one(zip_broadcast(g, out, |g, y| g * (T::one() - y * y))?),
        Op::Exp => one(zip_broadcast(g, out, |g, y| g * y)?),
        Op::Ln => one(zip_broadcast(g, inputs[0], |g, x| g / x)?),
        Op::Sqrt => one(zip_broadcast(g, out, |g, y| g / (y + y))?),
        Op::Square => one(zip_broadcast(g, inputs[0], |g, x| g * (x + x))?),
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let plan = MatmulPlan::new(a.shape(), b.shape())?;
            let (m, k, n) = (plan.m, plan.k, plan.n);
            let bt = b.transpose_last()?;
            let nb = plan.batch_count();
            let mut ga = vec![T::zero(); nb * m * k];
            let mut gb = vec![T::zero(); nb * k * n];
            let mut i = 0;
            plan.for_each(|oa, ob, oc| {
                let gc = &g.data()[oc..oc + m * n];
                gemm_nn(gc, &bt.data()[ob..ob + k * n], &mut ga[i * m * k..(i + 1) * m * k], m, n, k);
                gemm_tn(&a.data()[oa..oa + m * k], gc, &mut gb[i * k * n..(i + 1) * k * n], m, k, n);
                i += 1;
            });
            let mut sa = plan.batch.clone();
            sa.extend([m, k]);
            let mut sb = plan.batch.clone();
            sb.extend([k, n]);
            Ok(vec![
                Some(reduce_to_shape(&Tensor::new(&sa, ga)?, a.shape())?),
                Some(reduce_to_shape(&Tensor::new(&sb, gb)?, b.shape())?),
            ])
        }
        Op::Transpose => one(g.transpose_last()?),
        Op::Permute(perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            one(g.permute(&inv)?)
        }
        Op::Reshape => one(g.clone().reshape(inputs[0].shape())?),
        Op::BroadcastTo => one(reduce_to_shape(g, inputs[0].shape())?),
        Op::SumAxis { axis, keepdim } => {
            let shape = inputs[0].shape();
            let g = if *keepdim {
                g.clone()
            } else {
                let mut kept = shape.to_vec();
                kept[*axis] = 1;
                g.clone().reshape(&kept)?
            };
            one(g.broadcast_to(shape)?)
        }
        Op::SumAll => one(Tensor::full(inputs[0].shape(), g.item())),
        Op::Softmax { degenerate_rows } => {
            let c = *out.shape().last().unwrap_or(&1);
            let mut gx = vec![T::zero(); out.numel()];
            for (r, chunk) in gx.chunks_mut(c.max(1)).enumerate() {
                let y = &out.data()[r * c..(r + 1) * c];
                let gy = &g.data()[r * c..(r + 1) * c];
                let dot: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                for j in 0..c {
                    chunk[j] = y[j] * (gy[j] - dot);
                }
            }
            for &r in degenerate_rows {
                gx[r * c..(r + 1) * c].iter_mut().for_each(|x| *x = T::zero());
            }
            Ok(vec![Some(Tensor::new(out.shape(), gx)?), None])
        }
        Op::Cumsum { axis } => one(g.rev_cumsum(*axis)?),
        Op::Embedding { ids } => {
            let table = inputs[0];
            let e = table.shape()[1];
            let mut gt = Tensor::zeros(table.shape());
            let dst = gt.data_mut();
            for (r, &id) in ids.iter().enumerate() {
                let src = &g.data()[r * e..(r + 1) * e];
                for (d, &s) in dst[id * e..(id + 1) * e].iter_mut().zip(src) {
                    *d = *d + s;
                }
            }
            one(gt)
        }
        Op::Custom(op) => op.backward(inputs, out, g),
    }
}

/// Handle to a value in a [`Graph`]; cheap to clone.
#[derive(Clone)]
pub struct Var<'g, T: Scalar> {
    graph: &'g Graph<T>,
    id: Option<usize>,
    value: Rc<Tensor<T>>,
}

impl<'g, T: Scalar> std::fmt::Debug for Var<'g, T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({:?}, {:?})", self.id, self.value)
    }
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn graph(&self) -> &'g Graph<T> {
        self.graph
    }

    pub fn is_tracked(&self) -> bool {
        self.id.is_some()
    }

    fn unary(&self, op: Op<T>, value: Tensor<T>, what: &str) -> Result<Self> {
        self.graph.record(op, &[self], value, what)
    }

    fn binary(&self, other: &Self, op: Op<T>, f: impl Fn(T, T) -> T, what: &str) -> Result<Self> {
        let value = zip_broadcast(&self.value, &other.value, f)?;
        self.graph.record(op, &[self, other], value, what)
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary(other, Op::Add, |a, b| a + b, "add")
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(other, Op::Sub, |a, b| a - b, "sub")
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(other, Op::Mul, |a, b| a * b, "mul")
    }

    pub fn div(&self, other: &Self) -> Result<Self> {
        self.binary(other, Op::Div, |a, b| a / b, "div")
    }

    pub fn scale(&self, s: f64) -> Result<Self> {
        let s = T::of(s);
        self.unary(Op::Scale(s), self.value.scale(s), "scale")
    }

    pub fn add_scalar(&self, c: f64) -> Result<Self> {
        let c = T::of(c);
        self.unary(Op::AddScalar, self.value.map(|x| x + c), "add_scalar")
    }

    pub fn tanh(&self) -> Result<Self> {
        self.unary(Op::Tanh, self.value.map(T::tanh), "tanh")
    }

    pub fn exp(&self) -> Result<Self> {
        self.unary(Op::Exp, self.value.map(T::exp), "exp")
    }

    pub fn ln(&self) -> Result<Self> {
        self.unary(Op::Ln, self.value.map(T::ln), "ln")
    }

    pub fn sqrt(&self) -> Result<Self> {
        self.unary(Op::Sqrt, self.value.map(T::sqrt), "sqrt")
    }

    pub fn square(&self) -> Result<Self> {
        self.unary(Op::Square, self.value.map(|x| x * x), "square")
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let value = self.value.matmul(&other.value)?;
        self.graph.record(Op::MatMul, &[self, other], value, "matmul")
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        self.unary(Op::Transpose, self.value.transpose_last()?, "transpose")
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        self.unary(Op::Permute(perm.to_vec()), self.value.permute(perm)?, "permute")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let value = self.value.as_ref().clone().reshape(shape)?;
        self.unary(Op::Reshape, value, "reshape")
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        self.unary(Op::BroadcastTo, self.value.broadcast_to(shape)?, "broadcast_to")
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Self> {
        let value = self.value.sum_axis(axis, keepdim)?;
        self.unary(Op::SumAxis { axis, keepdim }, value, "sum_axis")
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Self> {
        let (_, len, _) = axis_split(self.shape(), axis)?;
        self.sum_axis(axis, keepdim)?.scale(1.0 / len as f64)
    }

    pub fn sum_all(&self) -> Result<Self> {
        self.unary(Op::SumAll, Tensor::scalar(self.value.sum()), "sum_all")
    }

    pub fn mean_all(&self) -> Result<Self> {
        let n = self.value.numel().max(1);
        self.sum_all()?.scale(1.0 / n as f64)
    }

    /// Inverted dropout: zeroes each element with probability `rate` and
    /// scales survivors by `1 / (1 - rate)`.
    pub fn dropout(&self, rate: f64, rng: &mut impl Rng) -> Result<Self> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if rate == 0.0 {
            return Ok(self.clone());
        }
        let keep = T::of(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..self.value.numel())
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let mask = self.graph.constant(Tensor::new(self.shape(), mask)?);
        self.mul(&mask)
    }

    /// Cumulative sum along `axis`, inclusive.
    pub fn cumsum(&self, axis: usize) -> Result<Self> {
        self.unary(Op::Cumsum { axis }, self.value.cumsum(axis)?, "cumsum")
    }

    /// Max-subtracted softmax over the last axis with an optional mask.
    ///
    /// A row whose every entry is masked has no valid distribution; it
    /// becomes uniform over the whole row and raises
    /// [`GraphFlags::degenerate_mask`].
    pub fn softmax_lastdim(&self, mask: Option<&Mask<T>>) -> Result<Self> {
        let x = self.value.as_ref();
        let shape = x.shape();
        if shape.is_empty() {
            return Err(Error::dim("softmax needs at least one axis"));
        }
        let c = shape[shape.len() - 1];
        let sentinel = T::of(self.graph.mask_value);
        let additive = match mask {
            Some(Mask::Additive(m)) => Some(m.broadcast_to(shape).map_err(|_| {
                Error::dim(format!(
                    "mask {:?} does not broadcast to logits {:?}",
                    m.shape(),
                    shape
                ))
            })?),
            _ => None,
        };
        let causal_rows = match mask {
            Some(Mask::Causal) => {
                if shape.len() < 2 {
                    return Err(Error::dim("causal mask needs at least 2 axes"));
                }
                Some(shape[shape.len() - 2])
            }
            _ => None,
        };
        let mut y = vec![T::zero(); x.numel()];
        let mut row = vec![T::zero(); c];
        let mut degenerate = Vec::new();
        for (r, out) in y.chunks_mut(c.max(1)).enumerate() {
            let src = &x.data()[r * c..(r + 1) * c];
            let mut masked = 0;
            for j in 0..c {
                let mut v = src[j];
                if let Some(m) = &additive {
                    let mv = m.data()[r * c + j];
                    if mv <= sentinel {
                        masked += 1;
                    }
                    v = v + mv;
                }
                if let Some(rows) = causal_rows {
                    if j > r % rows {
                        masked += 1;
                        v = v + sentinel;
                    }
                }
                row[j] = v;
            }
            if masked == c {
                degenerate.push(r);
                out.iter_mut().for_each(|o| *o = T::one() / T::of(c as f64));
                continue;
            }
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for j in 0..c {
                let e = (row[j] - max).exp();
                out[j] = e;
                sum = sum + e;
            }
            for o in out.iter_mut() {
                *o = *o / sum;
            }
        }
        if !degenerate.is_empty() {
            self.graph.raise(|f| f.degenerate_mask = true);
        }
        let value = Tensor::new(shape, y)?;
        match &additive {
            Some(m) => {
                let mask = self.graph.constant(m.clone());
                self.graph.record(
                    Op::Softmax { degenerate_rows: degenerate },
                    &[self, &mask],
                    value,
                    "softmax",
                )
            }
            None => self.unary(Op::Softmax { degenerate_rows: degenerate }, value, "softmax"),
        }
    }
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<T: Scalar> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(String, usize, Vec<usize>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: &Var<'_, T>) -> Option<&Tensor<T>> {
        var.id.and_then(|id| self.grads.get(id).and_then(Option::as_ref))
    }

    /// Gradient of `var`, zeros when nothing flowed into it.
    pub fn wrt(&self, var: &Var<'_, T>) -> Tensor<T> {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(var.shape()))
    }

    /// Gradients of every named parameter in registration order.
    pub fn named(&self) -> TensorSet<T> {
        let mut set = TensorSet::new();
        for (name, id, shape) in &self.params {
            let g = self.grads[*id]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(shape));
            set.insert(name.clone(), g);
        }
        set
    }
}

/// Graph handles for a registered [`TensorSet`].
pub struct ParamVars<'g, T: Scalar> {
    vars: Vec<(String, Var<'g, T>)>,
}

impl<'g, T: Scalar> ParamVars<'g, T> {
    pub fn get(&self, name: &str) -> Result<&Var<'g, T>> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var<'g, T>)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), v))
    }
}

impl<T: Scalar> TensorSet<T> {
    /// Enters every tensor into `graph` as a named learnable leaf.
    pub fn register<'g>(&self, graph: &'g Graph<T>) -> ParamVars<'g, T> {
        ParamVars {
            vars: self
                .iter()
                .map(|(name, t)| (name.to_string(), graph.param(name, t.clone())))
                .collect(),
        }
    }
}
