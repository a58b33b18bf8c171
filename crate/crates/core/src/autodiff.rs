//! Tape-based reverse-mode differentiation.
//!
//! Model code is written once against the [`Ops`] trait and runs either on a
//! recording [`Graph`] (training, fine-tuning) or on the [`Eager`]
//! evaluator, which computes values only and keeps no history. Eager
//! intermediates are released as soon as the caller drops them, so peak
//! memory of an eager forward pass stays at a couple of activations.

use std::rc::Rc;

use crate::counters;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{self, Tensor};

/// A primitive operation. Forward and backward rules live here so that both
/// evaluators share them.
#[derive(Debug, Clone)]
pub enum OpKind {
    MatMul,
    /// `a + b`, with `b` broadcast over the leading axes of `a`.
    Add,
    Sub,
    Mul,
    Scale(f64),
    Relu,
    Sum,
    Mean,
    SumLast,
    /// Inputs: `x`, `gamma`, `beta`.
    LayerNorm { eps: f64 },
    Softmax,
    SoftmaxCe { labels: Rc<[usize]>, mean: bool },
    Transpose,
    SqDist,
    ConcatRows,
    Narrow { start: usize, len: usize },
    Reshape(Vec<usize>),
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale(_) => "scale",
            OpKind::Relu => "relu",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumLast => "sum_last",
            OpKind::LayerNorm { .. } => "layer_norm",
            OpKind::Softmax => "softmax",
            OpKind::SoftmaxCe { .. } => "softmax_ce",
            OpKind::Transpose => "transpose",
            OpKind::SqDist => "sq_dist",
            OpKind::ConcatRows => "concat_rows",
            OpKind::Narrow { .. } => "narrow",
            OpKind::Reshape(_) => "reshape",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::MatMul | OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::SqDist => Some(2),
            OpKind::LayerNorm { .. } => Some(3),
            OpKind::ConcatRows => None,
            _ => Some(1),
        }
    }

    pub fn forward(&self, x: &[&Tensor]) -> Result<Tensor> {
        if let Some(n) = self.arity() {
            if x.len() != n {
                return Err(Error::shape(self.name(), format!("expected {n} inputs, got {}", x.len())));
            }
        }
        let out = match self {
            OpKind::MatMul => tensor::gemm(x[0], false, x[1], false)?,
            OpKind::Add => tensor::zip_bcast("add", x[0], x[1], |a, b| a + b)?,
            OpKind::Sub => tensor::zip_bcast("sub", x[0], x[1], |a, b| a - b)?,
            OpKind::Mul => tensor::zip_bcast("mul", x[0], x[1], |a, b| a * b)?,
            OpKind::Scale(c) => tensor::map(x[0], |v| v * c),
            OpKind::Relu => tensor::map(x[0], |v| v.max(0.0)),
            OpKind::Sum => Tensor::scalar(x[0].data().iter().sum()),
            OpKind::Mean => {
                if x[0].is_empty() {
                    return Err(Error::Empty("mean"));
                }
                Tensor::scalar(x[0].data().iter().sum::<f64>() / x[0].len() as f64)
            }
            OpKind::SumLast => tensor::sum_last(x[0])?,
            OpKind::LayerNorm { eps } => tensor::layer_norm(x[0], x[1], x[2], *eps)?.0,
            OpKind::Softmax => tensor::softmax_last(x[0])?,
            OpKind::SoftmaxCe { labels, mean } => tensor::softmax_ce(x[0], labels, *mean)?.0,
            OpKind::Transpose => tensor::transpose(x[0])?,
            OpKind::SqDist => tensor::sq_dist(x[0], x[1])?,
            OpKind::ConcatRows => tensor::concat_rows(x)?,
            OpKind::Narrow { start, len } => tensor::narrow(x[0], *start, *len)?,
            OpKind::Reshape(shape) => x[0].reshaped(shape)?,
        };
        if !out.is_finite() {
            return Err(Error::NonFinite { op: self.name() });
        }
        Ok(out)
    }

    /// Vector-Jacobian products for each input flagged in `needs`.
    fn backward(&self, x: &[&Tensor], out: &Tensor, g: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; x.len()];
        let want = |i: usize| needs[i];
        match self {
            OpKind::MatMul => {
                if want(0) {
                    grads[0] = Some(tensor::gemm(g, false, x[1], true)?);
                }
                if want(1) {
                    grads[1] = Some(tensor::gemm(x[0], true, g, false)?);
                }
            }
            OpKind::Add | OpKind::Sub => {
                if want(0) {
                    grads[0] = Some(g.clone());
                }
                if want(1) {
                    let mut r = tensor::reduce_to(g, x[1].shape());
                    if matches!(self, OpKind::Sub) {
                        r.data_mut().iter_mut().for_each(|v| *v = -*v);
                    }
                    grads[1] = Some(r);
                }
            }
            OpKind::Mul => {
                if want(0) {
                    grads[0] = Some(tensor::zip_bcast("mul", g, x[1], |a, b| a * b)?);
                }
                if want(1) {
                    let prod = tensor::zip_same(g, x[0], |a, b| a * b);
                    grads[1] = Some(tensor::reduce_to(&prod, x[1].shape()));
                }
            }
            OpKind::Scale(c) => grads[0] = Some(tensor::map(g, |v| v * c)),
            OpKind::Relu => grads[0] = Some(tensor::zip_same(g, out, |gv, o| if o > 0.0 { gv } else { 0.0 })),
            OpKind::Sum | OpKind::Mean => {
                let scale = if matches!(self, OpKind::Mean) { 1.0 / x[0].len() as f64 } else { 1.0 };
                let gv = g.item() * scale;
                grads[0] = Some(tensor::map(x[0], |_| gv));
            }
            OpKind::SumLast => {
                let k = tensor::last_dim("sum_last", x[0])?;
                let data = g.data().iter().flat_map(|&v| std::iter::repeat_n(v, k)).collect();
                grads[0] = Some(Tensor::new(x[0].shape().to_vec(), data)?);
            }
            OpKind::LayerNorm { eps } => {
                let (_, xhat, inv) = tensor::layer_norm(x[0], x[1], x[2], *eps)?;
                let k = tensor::last_dim("layer_norm", x[0])?;
                let gamma = x[1].data();
                let mut dx = vec![0.0; x[0].len()];
                let mut dgamma = vec![0.0; k];
                let mut dbeta = vec![0.0; k];
                for (r, &is) in inv.iter().enumerate() {
                    let gr = &g.data()[r * k..(r + 1) * k];
                    let hr = &xhat[r * k..(r + 1) * k];
                    let mut mean_d = 0.0;
                    let mut mean_dh = 0.0;
                    for j in 0..k {
                        let d = gr[j] * gamma[j];
                        mean_d += d;
                        mean_dh += d * hr[j];
                        dgamma[j] += gr[j] * hr[j];
                        dbeta[j] += gr[j];
                    }
                    mean_d /= k as f64;
                    mean_dh /= k as f64;
                    for j in 0..k {
                        let d = gr[j] * gamma[j];
                        dx[r * k + j] = is * (d - mean_d - hr[j] * mean_dh);
                    }
                }
                grads[0] = Some(Tensor::new(x[0].shape().to_vec(), dx)?);
                grads[1] = Some(Tensor::vector(dgamma));
                grads[2] = Some(Tensor::vector(dbeta));
            }
            OpKind::Softmax => {
                let k = tensor::last_dim("softmax", out)?;
                let mut dx = vec![0.0; out.len()];
                for (r, (yr, gr)) in out.data().chunks(k).zip(g.data().chunks(k)).enumerate() {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, gv)| y * gv).sum();
                    for j in 0..k {
                        dx[r * k + j] = yr[j] * (gr[j] - dot);
                    }
                }
                grads[0] = Some(Tensor::new(out.shape().to_vec(), dx)?);
            }
            OpKind::SoftmaxCe { labels, mean } => {
                let (_, mut probs) = tensor::softmax_ce(x[0], labels, *mean)?;
                let c = x[0].shape()[1];
                let scale = g.item() * if *mean { 1.0 / labels.len() as f64 } else { 1.0 };
                let data = probs.data_mut();
                for (i, &y) in labels.iter().enumerate() {
                    data[i * c + y] -= 1.0;
                }
                data.iter_mut().for_each(|v| *v *= scale);
                grads[0] = Some(probs);
            }
            OpKind::Transpose => grads[0] = Some(tensor::transpose(g)?),
            OpKind::SqDist => {
                let (a, b) = (x[0], x[1]);
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[0];
                let mut da = vec![0.0; m * k];
                let mut db = vec![0.0; n * k];
                for i in 0..m {
                    for j in 0..n {
                        let gij = 2.0 * g.data()[i * n + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for c in 0..k {
                            let diff = gij * (a.data()[i * k + c] - b.data()[j * k + c]);
                            da[i * k + c] += diff;
                            db[j * k + c] -= diff;
                        }
                    }
                }
                if want(0) {
                    grads[0] = Some(Tensor::matrix(m, k, da)?);
                }
                if want(1) {
                    grads[1] = Some(Tensor::matrix(n, k, db)?);
                }
            }
            OpKind::ConcatRows => {
                let mut offset = 0;
                for (i, part) in x.iter().enumerate() {
                    let n = part.len();
                    if want(i) {
                        grads[i] = Some(Tensor::new(part.shape().to_vec(), g.data()[offset..offset + n].to_vec())?);
                    }
                    offset += n;
                }
            }
            OpKind::Narrow { start, .. } => {
                let mut full = Tensor::zeros(x[0].shape());
                let inner = x[0].len() / x[0].shape()[0].max(1);
                full.data_mut()[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                grads[0] = Some(full);
            }
            OpKind::Reshape(_) => grads[0] = Some(g.reshaped(x[0].shape())?),
        }
        for (slot, &need) in grads.iter_mut().zip(needs) {
            if !need {
                *slot = None;
            }
        }
        Ok(grads)
    }
}

/// Evaluation backend shared by the recording graph and the eager path.
pub trait Ops {
    type V: Clone;

    fn apply(&mut self, kind: OpKind, inputs: &[&Self::V]) -> Result<Self::V>;
    fn constant(&mut self, t: Tensor) -> Self::V;
    /// A constant that shares storage with the caller (no copy).
    fn shared(&mut self, t: &Rc<Tensor>) -> Self::V;
    fn param(&mut self, store: &ParamStore, id: ParamId) -> Self::V;
    fn value<'a>(&'a self, v: &'a Self::V) -> &'a Tensor;

    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(OpKind::MatMul, &[a, b])
    }
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(OpKind::Add, &[a, b])
    }
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(OpKind::Sub, &[a, b])
    }
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(OpKind::Mul, &[a, b])
    }
    fn scale(&mut self, a: &Self::V, c: f64) -> Result<Self::V> {
        self.apply(OpKind::Scale(c), &[a])
    }
    fn relu(&mut self, a: &Self::V) -> Result<Self::V> {
        self.apply(OpKind::Relu, &[a])
    }
    fn sum(&mut self, a: &Self::V) -> Result<Self::V> {
        self.apply(OpKind::Sum, &[a])
    }
    fn mean(&mut self, a: &Self::V) -> Result<Self::V> {
        self.apply(OpKind::Mean, &[a])
    }
    fn sum_last(&mut self, a: &Self::V) -> Result<Self::V> {
        self.apply(OpKind::SumLast, &[a])
    }
    fn layer_norm(&mut self, x: &Self::V, gamma: &Self::V, beta: &Self::V) -> Result<Self::V> {
        self.apply(OpKind::LayerNorm { eps: 1e-5 }, &[x, gamma, beta])
    }
    fn softmax(&mut self, a: &Self::V) -> Result<Self::V> {
        self.apply(OpKind::Softmax, &[a])
    }
    fn softmax_ce(&mut self, logits: &Self::V, labels: &[usize], mean: bool) -> Result<Self::V> {
        self.apply(
            OpKind::SoftmaxCe {
                labels: labels.into(),
                mean,
            },
            &[logits],
        )
    }
    fn transpose(&mut self, a: &Self::V) -> Result<Self::V> {
        self.apply(OpKind::Transpose, &[a])
    }
    fn sq_dist(&mut self, a: &Self::V, b: &Self::V) -> Result<Self::V> {
        self.apply(OpKind::SqDist, &[a, b])
    }
    fn concat_rows(&mut self, parts: &[&Self::V]) -> Result<Self::V> {
        self.apply(OpKind::ConcatRows, parts)
    }
    fn narrow(&mut self, a: &Self::V, start: usize, len: usize) -> Result<Self::V> {
        self.apply(OpKind::Narrow { start, len }, &[a])
    }
    fn reshape(&mut self, a: &Self::V, shape: &[usize]) -> Result<Self::V> {
        self.apply(OpKind::Reshape(shape.to_vec()), &[a])
    }

    /// `x · w + b` with `w` stored `[in, out]`.
    fn linear(&mut self, x: &Self::V, w: &Self::V, b: &Self::V) -> Result<Self::V> {
        let xw = self.matmul(x, w)?;
        self.add(&xw, b)
    }

    /// Single-head scaled dot-product attention over the rows of `q`, `k`, `v`.
    fn attention(&mut self, q: &Self::V, k: &Self::V, v: &Self::V) -> Result<Self::V> {
        let width = *self.value(q).shape().last().unwrap_or(&1);
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, &kt)?;
        let scores = self.scale(&scores, 1.0 / (width as f64).sqrt())?;
        let weights = self.softmax(&scores)?;
        self.matmul(&weights, v)
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

struct Node {
    value: Rc<Tensor>,
    op: Option<(OpKind, Vec<usize>)>,
    requires_grad: bool,
}

/// Recording evaluator. Nodes are appended in evaluation order, which is a
/// topological order of the (acyclic) computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(usize, ParamId)>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(Rc::new(t), None, requires_grad)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn reset(&mut self) {
        self.nodes.clear();
        self.bindings.clear();
        self.backward_done = false;
    }

    fn push(&mut self, value: Rc<Tensor>, op: Option<(OpKind, Vec<usize>)>, requires_grad: bool) -> Var {
        counters::count_graph_node();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        let shape = self.nodes[loss.0].value.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        self.backward_done = true;
        counters::count_backward();

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(shape.to_vec(), vec![1.0])?);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some((kind, inputs)) = &node.op else { continue };
            let Some(g) = grads[idx].take() else { continue };
            let xs: Vec<&Tensor> = inputs.iter().map(|&i| &*self.nodes[i].value).collect();
            let needs: Vec<bool> = inputs.iter().map(|&i| self.nodes[i].requires_grad).collect();
            let input_grads = kind.backward(&xs, &node.value, &g, &needs)?;
            for (&i, ig) in inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                match &mut grads[i] {
                    Some(acc) => acc.data_mut().iter_mut().zip(ig.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(ig),
                }
            }
            // Keep leaf gradients; drop intermediate ones once propagated.
            grads[idx] = None;
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Graph::backward`] and accumulates into the gradient slots of
    /// every trainable parameter bound on this graph.
    pub fn backward_into(&mut self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for &(node, id) in &self.bindings {
            if let Some(g) = &grads.grads[node] {
                store.accumulate_grad(id, g);
            }
        }
        Ok(grads)
    }
}

impl Ops for Graph {
    type V = Var;

    fn apply(&mut self, kind: OpKind, inputs: &[&Var]) -> Result<Var> {
        let out = {
            let xs: Vec<&Tensor> = inputs.iter().map(|v| &*self.nodes[v.0].value).collect();
            kind.forward(&xs)?
        };
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let ids = inputs.iter().map(|v| v.0).collect();
        Ok(self.push(Rc::new(out), Some((kind, ids)), requires_grad))
    }

    fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn shared(&mut self, t: &Rc<Tensor>) -> Var {
        self.push(Rc::clone(t), None, false)
    }

    fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let entry = store.get(id);
        let v = self.push(Rc::clone(&entry.value), None, entry.trainable);
        if entry.trainable {
            self.bindings.push((v.0, id));
        }
        v
    }

    fn value<'a>(&'a self, v: &'a Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }
}

/// Gradients of one backward sweep, indexed by leaf handle.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Value-only evaluator: no graph, no retained intermediates.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eager;

impl Ops for Eager {
    type V = Rc<Tensor>;

    fn apply(&mut self, kind: OpKind, inputs: &[&Rc<Tensor>]) -> Result<Rc<Tensor>> {
        counters::count_eager_op();
        let xs: Vec<&Tensor> = inputs.iter().map(|v| &***v).collect();
        Ok(Rc::new(kind.forward(&xs)?))
    }

    fn constant(&mut self, t: Tensor) -> Rc<Tensor> {
        Rc::new(t)
    }

    fn shared(&mut self, t: &Rc<Tensor>) -> Rc<Tensor> {
        Rc::clone(t)
    }

    fn param(&mut self, store: &ParamStore, id: ParamId) -> Rc<Tensor> {
        Rc::clone(store.value(id))
    }

    fn value<'a>(&'a self, v: &'a Rc<Tensor>) -> &'a Tensor {
        v
    }
}

/// Central-difference gradient of a scalar function of a flat vector.
pub fn finite_difference(f: &mut dyn FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe)?;
        probe[i] = orig - h;
        let down = f(&probe)?;
        probe[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`.
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}
