//! Define-by-run tape. Every primitive appends a node holding its output
//! value; [`Tape::backward`] walks the nodes in reverse execution order and
//! accumulates vector-Jacobian products into each input.

use super::tensor::{strides, swap_axes};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Shift(Var),
    Transpose(Var, usize, usize),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice(Var, usize, usize),
    Gather(Var, Vec<usize>),
    Embedding(Var, Vec<usize>),
    Softmax(Var),
    LogSoftmax(Var),
    Silu(Var),
    Tanh(Var),
    RmsStat(Var, S),
    Sum(Var),
    Mean(Var),
    L1Loss(Var, Var, Option<Vec<S>>, S),
    L2Loss(Var, Var, Option<Vec<S>>, S),
    StraightThrough(Var),
    Rope(Var, S),
    Sinusoid(Var, Vec<S>),
    /// Scalar whose gradient w.r.t. its single input was computed eagerly.
    Precomputed(Var, Vec<S>),
}

#[derive(Clone, Debug)]
struct Node<S> {
    shape: Vec<usize>,
    data: Vec<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Execution counters read by decoders and samplers.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counters {
    pub block_executions: usize,
}

#[derive(Clone, Debug)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    params: Vec<Var>,
    check_finite: bool,
    pub counters: Counters,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<S>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn is_suffix(shape: &[usize], of: &[usize]) -> bool {
    shape.len() <= of.len() && of[of.len() - shape.len()..] == *shape
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn accumulate<S: Scalar>(slot: &mut Option<Vec<S>>, contrib: Vec<S>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        None => *slot = Some(contrib),
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            check_finite: cfg!(debug_assertions),
            counters: Counters::default(),
        }
    }

    /// Enable or disable the non-finite check applied to every op output.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<S>,
        op: Op<S>,
        requires_grad: bool,
    ) -> Result<Var> {
        debug_assert_eq!(numel(&shape), data.len());
        if self.check_finite && data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[S] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<S> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape invariant")
    }

    /// Scalar value of a 0-d or single-element node.
    pub fn item(&self, v: Var) -> S {
        self.nodes[v.0].data[0]
    }

    // ---------------------------------------------------------------- leaves

    pub fn leaf(&mut self, t: &Tensor<S>) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
            op: Op::Leaf,
            requires_grad: t.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<S>) -> Result<Var> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "constant",
                format!("shape {:?} vs {} elements", shape, data.len()),
            ));
        }
        self.push("constant", shape, data, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: S) -> Var {
        self.nodes.push(Node {
            shape: vec![],
            data: vec![v],
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` that is cut from the graph (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let n = &self.nodes[v.0];
        let (shape, data) = (n.shape.clone(), n.data.clone());
        self.nodes.push(Node {
            shape,
            data,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register a parameter set; `param(i)` then resolves to the i-th leaf.
    pub fn bind_params<'a, I>(&mut self, tensors: I) -> Vec<Var>
    where
        I: IntoIterator<Item = &'a Tensor<S>>,
    {
        let vars: Vec<Var> = tensors.into_iter().map(|t| self.leaf(t)).collect();
        self.params = vars.clone();
        vars
    }

    pub fn param(&self, index: usize) -> Var {
        self.params[index]
    }

    pub fn params(&self) -> &[Var] {
        &self.params
    }

    // ------------------------------------------------------------ primitives

    /// `[m,k]·[k,n]` or batched `[b,m,k]·[b,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.len(), sb.len()) {
            (2, 2) if sa[1] == sb[0] => (1, sa[0], sa[1], sb[1]),
            (3, 3) if sa[0] == sb[0] && sa[2] == sb[1] => (sa[0], sa[1], sa[2], sb[2]),
            _ => return Err(Error::shape("matmul", format!("{:?} x {:?}", sa, sb))),
        };
        let mut out = vec![S::zero(); batch * m * n];
        {
            let (da, db) = (self.value(a), self.value(b));
            for bi in 0..batch {
                S::gemm(
                    m,
                    k,
                    n,
                    &da[bi * m * k..],
                    k,
                    1,
                    &db[bi * k * n..],
                    n,
                    1,
                    S::zero(),
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let shape = if sa.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        let rg = self.rg(a) || self.rg(b);
        self.push("matmul", shape, out, Op::Matmul(a, b), rg)
    }

    fn broadcast_binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !is_suffix(&sb, &sa) {
            return Err(Error::shape(name, format!("{:?} with {:?}", sa, sb)));
        }
        let nb = numel(&sb).max(1);
        let (da, db) = (self.value(a), self.value(b));
        let out: Vec<S> = da
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, db[i % nb]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        self.push(name, sa, out, op, rg)
    }

    /// Elementwise sum; `b` may have a trailing-suffix shape of `a` (bias).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product; `b` may have a trailing-suffix shape of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push("scale", shape, out, Op::Scale(a, c), rg)
    }

    /// `a + c` for a constant scalar `c`.
    pub fn shift(&mut self, a: Var, c: S) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x + c).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push("shift", shape, out, Op::Shift(a), rg)
    }

    pub fn transpose(&mut self, a: Var, d0: usize, d1: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if d0 >= shape.len() || d1 >= shape.len() {
            return Err(Error::shape(
                "transpose",
                format!("axes ({d0},{d1}) of {:?}", shape),
            ));
        }
        let (out, out_shape) = swap_axes(self.value(a), &shape, d0, d1);
        let rg = self.rg(a);
        self.push("transpose", out_shape, out, Op::Transpose(a, d0, d1), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != self.value(a).len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", self.shape(a), shape),
            ));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(a);
        self.push("reshape", shape, out, Op::Reshape(a), rg)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} of {:?}", base)));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let ok = s.len() == base.len()
                && s.iter()
                    .enumerate()
                    .all(|(i, &d)| i == axis || d == base[i]);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} on axis {axis}", base, s),
                ));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push("concat", shape, out, Op::Concat(inputs.to_vec(), axis), rg)
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}..{}] on axis {axis} of {:?}", start + len, shape),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let rg = self.rg(a);
        self.push("slice", out_shape, out, Op::Slice(a, axis, start), rg)
    }

    /// Picks one element per row along the last axis: `[.., V] -> [..]`.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let v = *shape
            .last()
            .ok_or_else(|| Error::shape("gather", "scalar input"))?;
        let rows = self.value(a).len() / v.max(1);
        if indices.len() != rows || indices.iter().any(|&i| i >= v) {
            return Err(Error::shape(
                "gather",
                format!("{} indices for {:?}", indices.len(), shape),
            ));
        }
        let src = self.value(a);
        let out = indices
            .iter()
            .enumerate()
            .map(|(r, &i)| src[r * v + i])
            .collect();
        let rg = self.rg(a);
        self.push(
            "gather",
            shape[..shape.len() - 1].to_vec(),
            out,
            Op::Gather(a, indices.to_vec()),
            rg,
        )
    }

    /// Rows of a `[N, D]` table: `[len(ids), D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || ids.iter().any(|&i| i >= shape[0]) {
            return Err(Error::shape(
                "embedding_lookup",
                format!("ids into {:?}", shape),
            ));
        }
        let d = shape[1];
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        self.push(
            "embedding_lookup",
            vec![ids.len(), d],
            out,
            Op::Embedding(table, ids.to_vec()),
            rg,
        )
    }

    fn last_dim(&self, a: Var, op: &'static str) -> Result<usize> {
        match self.shape(a).last() {
            Some(&d) if d > 0 => Ok(d),
            _ => Err(Error::shape(op, format!("{:?}", self.shape(a)))),
        }
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let d = self.last_dim(a, "softmax_lastdim")?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
            let mut z = S::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x = *x / z;
            }
        }
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push("softmax_lastdim", shape, out, Op::Softmax(a), rg)
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let d = self.last_dim(a, "log_softmax_lastdim")?;
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().fold(S::neg_infinity(), |m, &x| m.max(x));
            let lse = m + row.iter().map(|&x| (x - m).exp()).sum::<S>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push("log_softmax_lastdim", shape, out, Op::LogSoftmax(a), rg)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push("silu", shape, out, Op::Silu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x.tanh()).collect();
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push("tanh", shape, out, Op::Tanh(a), rg)
    }

    /// Row-wise `x / sqrt(mean(x²) + eps)` over the last axis.
    pub fn rms_stat(&mut self, a: Var, eps: S) -> Result<Var> {
        let d = self.last_dim(a, "rms_stat")?;
        let mut out = self.value(a).to_vec();
        let inv_d = S::one() / S::from_f64(d as f64);
        for row in out.chunks_mut(d) {
            let ms = row.iter().map(|&x| x * x).sum::<S>() * inv_d;
            let r = S::one() / (ms + eps).sqrt();
            for x in row.iter_mut() {
                *x *= r;
            }
        }
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push("rms_stat", shape, out, Op::RmsStat(a, eps), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(a);
        self.push("sum", vec![], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::shape("mean", "empty input"));
        }
        let s = self.value(a).iter().copied().sum::<S>() / S::from_f64(n as f64);
        let rg = self.rg(a);
        self.push("mean", vec![], vec![s], Op::Mean(a), rg)
    }

    fn loss_prologue(
        &self,
        op: &'static str,
        pred: Var,
        target: Var,
        mask: Option<&[S]>,
    ) -> Result<S> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(pred), self.shape(target)),
            ));
        }
        let count = match mask {
            Some(m) => {
                if m.len() != self.value(pred).len() {
                    return Err(Error::shape(
                        op,
                        format!("mask of {} for {:?}", m.len(), self.shape(pred)),
                    ));
                }
                m.iter().copied().sum::<S>()
            }
            None => S::from_f64(self.value(pred).len() as f64),
        };
        if count <= S::zero() {
            return Err(Error::shape(op, "mask selects no elements"));
        }
        Ok(count)
    }

    /// Mean absolute error over the (optionally masked) elements.
    pub fn l1_loss(&mut self, pred: Var, target: Var, mask: Option<&[S]>) -> Result<Var> {
        let count = self.loss_prologue("l1_loss", pred, target, mask)?;
        let (p, t) = (self.value(pred), self.value(target));
        let s: S = (0..p.len())
            .map(|i| (p[i] - t[i]).abs() * mask.map_or(S::one(), |m| m[i]))
            .sum();
        let rg = self.rg(pred) || self.rg(target);
        self.push(
            "l1_loss",
            vec![],
            vec![s / count],
            Op::L1Loss(pred, target, mask.map(|m| m.to_vec()), count),
            rg,
        )
    }

    /// Mean squared error over the (optionally masked) elements.
    pub fn l2_loss(&mut self, pred: Var, target: Var, mask: Option<&[S]>) -> Result<Var> {
        let count = self.loss_prologue("l2_loss", pred, target, mask)?;
        let (p, t) = (self.value(pred), self.value(target));
        let s: S = (0..p.len())
            .map(|i| {
                let d = p[i] - t[i];
                d * d * mask.map_or(S::one(), |m| m[i])
            })
            .sum();
        let rg = self.rg(pred) || self.rg(target);
        self.push(
            "l2_loss",
            vec![],
            vec![s / count],
            Op::L2Loss(pred, target, mask.map(|m| m.to_vec()), count),
            rg,
        )
    }

    /// Forward value `value`, backward identity into `a`.
    pub fn straight_through(&mut self, a: Var, value: Vec<S>) -> Result<Var> {
        if value.len() != self.value(a).len() {
            return Err(Error::shape(
                "straight_through",
                format!("{} values for {:?}", value.len(), self.shape(a)),
            ));
        }
        let (shape, rg) = (self.shape(a).to_vec(), self.rg(a));
        self.push("straight_through", shape, value, Op::StraightThrough(a), rg)
    }

    /// Rotary embedding over `[.., T, D]`: pairs `(2i, 2i+1)` at position
    /// `p` rotate by `p · base^(-2i/D)`.
    pub fn rope(&mut self, a: Var, base: S) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() < 2 || !shape[shape.len() - 1].is_multiple_of(2) {
            return Err(Error::shape("rope", format!("{:?}", shape)));
        }
        let out = rope_apply(self.value(a), &shape, base, false);
        let rg = self.rg(a);
        self.push("rope", shape, out, Op::Rope(a, base), rg)
    }

    /// `[n] -> [n, 2F]` features `[cos(t·f_j) | sin(t·f_j)]`.
    pub fn sinusoid(&mut self, t: Var, freqs: &[S]) -> Result<Var> {
        let n = self.value(t).len();
        let f = freqs.len();
        let mut out = Vec::with_capacity(n * 2 * f);
        for &tv in self.value(t) {
            out.extend(freqs.iter().map(|&w| (tv * w).cos()));
            out.extend(freqs.iter().map(|&w| (tv * w).sin()));
        }
        let rg = self.rg(t);
        self.push(
            "sinusoid",
            vec![n, 2 * f],
            out,
            Op::Sinusoid(t, freqs.to_vec()),
            rg,
        )
    }

    /// Scalar node whose gradient w.r.t. `input` is supplied by the caller.
    pub fn precomputed(
        &mut self,
        op: &'static str,
        input: Var,
        value: S,
        grad: Vec<S>,
    ) -> Result<Var> {
        if grad.len() != self.value(input).len() {
            return Err(Error::shape(op, "gradient length"));
        }
        let rg = self.rg(input);
        self.push(op, vec![], vec![value], Op::Precomputed(input, grad), rg)
    }

    // -------------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if matches!(n.op, Op::Leaf) && n.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![S::zero(); n.data.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (batch, m, k, n) = if sa.len() == 2 {
                    (1, sa[0], sa[1], sb[1])
                } else {
                    (sa[0], sa[1], sa[2], sb[2])
                };
                if self.rg(*a) {
                    // dA = dC · Bᵀ
                    let db = self.value(*b);
                    let mut ga = vec![S::zero(); batch * m * k];
                    for bi in 0..batch {
                        S::gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..],
                            n,
                            1,
                            &db[bi * k * n..],
                            1,
                            n,
                            S::zero(),
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                        );
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                if self.rg(*b) {
                    // dB = Aᵀ · dC
                    let da = self.value(*a);
                    let mut gb = vec![S::zero(); batch * k * n];
                    for bi in 0..batch {
                        S::gemm(
                            k,
                            m,
                            n,
                            &da[bi * m * k..],
                            1,
                            k,
                            &g[bi * m * n..],
                            n,
                            1,
                            S::zero(),
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -S::one()
                } else {
                    S::one()
                };
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.rg(*b) {
                    let nb = self.value(*b).len().max(1);
                    let mut gb = vec![S::zero(); nb];
                    for (j, &gv) in g.iter().enumerate() {
                        gb[j % nb] += gv * sign;
                    }
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.value(*a), self.value(*b));
                let nb = db.len().max(1);
                if self.rg(*a) {
                    let ga = g
                        .iter()
                        .enumerate()
                        .map(|(j, &gv)| gv * db[j % nb])
                        .collect();
                    accumulate(&mut grads[a.0], ga);
                }
                if self.rg(*b) {
                    let mut gb = vec![S::zero(); nb];
                    for (j, &gv) in g.iter().enumerate() {
                        gb[j % nb] += gv * da[j];
                    }
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Scale(a, c) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.iter().map(|&v| v * *c).collect());
                }
            }
            Op::Shift(a) | Op::Reshape(a) | Op::StraightThrough(a) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
            }
            Op::Transpose(a, d0, d1) => {
                if self.rg(*a) {
                    let (back, _) = swap_axes(g, &node.shape, *d0, *d1);
                    accumulate(&mut grads[a.0], back);
                }
            }
            Op::Concat(inputs, axis) => {
                let shape = &node.shape;
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for v in inputs {
                    let len = self.shape(*v)[*axis];
                    if self.rg(*v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[base..base + len * inner]);
                        }
                        accumulate(&mut grads[v.0], gv);
                    }
                    offset += len;
                }
            }
            Op::Slice(a, axis, start) => {
                if self.rg(*a) {
                    let in_shape = self.shape(*a);
                    let outer: usize = in_shape[..*axis].iter().product();
                    let inner: usize = in_shape[axis + 1..].iter().product();
                    let len = node.shape[*axis];
                    let mut ga = vec![S::zero(); self.value(*a).len()];
                    for o in 0..outer {
                        let dst = (o * in_shape[*axis] + start) * inner;
                        let src = o * len * inner;
                        ga[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    accumulate(&mut grads[a.0], ga);
                }
            }
            Op::Gather(a, idx) => {
                if self.rg(*a) {
                    let v = *self.shape(*a).last().unwrap();
                    let mut ga = vec![S::zero(); self.value(*a).len()];
                    for (r, &k) in idx.iter().enumerate() {
                        ga[r * v + k] += g[r];
                    }
                    accumulate(&mut grads[a.0], ga);
                }
            }
            Op::Embedding(table, ids) => {
                if self.rg(*table) {
                    let d = self.shape(*table)[1];
                    let mut gt = vec![S::zero(); self.value(*table).len()];
                    for (r, &k) in ids.iter().enumerate() {
                        for j in 0..d {
                            gt[k * d + j] += g[r * d + j];
                        }
                    }
                    accumulate(&mut grads[table.0], gt);
                }
            }
            Op::Softmax(a) => {
                if self.rg(*a) {
                    let d = *node.shape.last().unwrap();
                    let mut ga = vec![S::zero(); g.len()];
                    for ((y, gy), out) in node.data.chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d))
                    {
                        let dot: S = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                        for j in 0..d {
                            out[j] = y[j] * (gy[j] - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
            }
            Op::LogSoftmax(a) => {
                if self.rg(*a) {
                    let d = *node.shape.last().unwrap();
                    let mut ga = vec![S::zero(); g.len()];
                    for ((y, gy), out) in node.data.chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d))
                    {
                        let s: S = gy.iter().copied().sum();
                        for j in 0..d {
                            out[j] = gy[j] - y[j].exp() * s;
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
            }
            Op::Silu(a) => {
                if self.rg(*a) {
                    let x = self.value(*a);
                    let ga = x
                        .iter()
                        .zip(g)
                        .map(|(&x, &gv)| {
                            let s = sigmoid(x);
                            gv * s * (S::one() + x * (S::one() - s))
                        })
                        .collect();
                    accumulate(&mut grads[a.0], ga);
                }
            }
            Op::Tanh(a) => {
                if self.rg(*a) {
                    let ga = node
                        .data
                        .iter()
                        .zip(g)
                        .map(|(&y, &gv)| gv * (S::one() - y * y))
                        .collect();
                    accumulate(&mut grads[a.0], ga);
                }
            }
            Op::RmsStat(a, eps) => {
                if self.rg(*a) {
                    let d = *node.shape.last().unwrap();
                    let inv_d = S::one() / S::from_f64(d as f64);
                    let x = self.value(*a);
                    let mut ga = vec![S::zero(); x.len()];
                    for ((xr, gr), out) in x.chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)) {
                        let ms = xr.iter().map(|&v| v * v).sum::<S>() * inv_d;
                        let r = S::one() / (ms + *eps).sqrt();
                        let dot: S = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        let c = r * r * r * dot * inv_d;
                        for j in 0..d {
                            out[j] = r * gr[j] - c * xr[j];
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
            }
            Op::Sum(a) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], vec![g[0]; self.value(*a).len()]);
                }
            }
            Op::Mean(a) => {
                if self.rg(*a) {
                    let n = self.value(*a).len();
                    accumulate(&mut grads[a.0], vec![g[0] / S::from_f64(n as f64); n]);
                }
            }
            Op::L1Loss(p, t, mask, count) | Op::L2Loss(p, t, mask, count) => {
                let l1 = matches!(node.op, Op::L1Loss(..));
                let (pv, tv) = (self.value(*p), self.value(*t));
                let scale = g[0] / *count;
                let gp: Vec<S> = (0..pv.len())
                    .map(|j| {
                        let diff = pv[j] - tv[j];
                        let m = mask.as_ref().map_or(S::one(), |m| m[j]);
                        let dj = if l1 {
                            if diff > S::zero() {
                                S::one()
                            } else if diff < S::zero() {
                                -S::one()
                            } else {
                                S::zero()
                            }
                        } else {
                            diff + diff
                        };
                        dj * m * scale
                    })
                    .collect();
                if self.rg(*t) {
                    accumulate(&mut grads[t.0], gp.iter().map(|&v| -v).collect());
                }
                if self.rg(*p) {
                    accumulate(&mut grads[p.0], gp);
                }
            }
            Op::Rope(a, base) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], rope_apply(g, &node.shape, *base, true));
                }
            }
            Op::Sinusoid(t, freqs) => {
                if self.rg(*t) {
                    let f = freqs.len();
                    let tv = self.value(*t);
                    let gt = tv
                        .iter()
                        .enumerate()
                        .map(|(r, &x)| {
                            let row = &g[r * 2 * f..(r + 1) * 2 * f];
                            freqs
                                .iter()
                                .enumerate()
                                .map(|(j, &w)| {
                                    -row[j] * w * (x * w).sin() + row[f + j] * w * (x * w).cos()
                                })
                                .sum::<S>()
                        })
                        .collect();
                    accumulate(&mut grads[t.0], gt);
                }
            }
            Op::Precomputed(a, local) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], local.iter().map(|&v| v * g[0]).collect());
                }
            }
        }
    }
}

fn rope_apply<S: Scalar>(data: &[S], shape: &[usize], base: S, inverse: bool) -> Vec<S> {
    let d = shape[shape.len() - 1];
    let t = shape[shape.len() - 2];
    let st = strides(shape);
    let row = st[shape.len() - 2];
    let mut out = data.to_vec();
    let half = d / 2;
    let inv_freq: Vec<S> = (0..half)
        .map(|i| base.powf(-S::from_f64(2.0 * i as f64 / d as f64)))
        .collect();
    for chunk in out.chunks_mut(t * d) {
        for pos in 0..t {
            let p = S::from_f64(pos as f64);
            for (i, &w) in inv_freq.iter().enumerate() {
                let ang = p * w;
                let (s, c) = (ang.sin(), ang.cos());
                let s = if inverse { -s } else { s };
                let j = pos * row + 2 * i;
                let (x0, x1) = (chunk[j], chunk[j + 1]);
                chunk[j] = x0 * c - x1 * s;
                chunk[j + 1] = x0 * s + x1 * c;
            }
        }
    }
    out
}
