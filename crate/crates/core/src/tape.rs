//! Tape-based reverse-mode differentiation.
//!
//! Every operation evaluates eagerly, appends a node to the tape and checks
//! its output for non-finite values. [`Tape::backward`] walks the tape in
//! reverse and returns gradients for every node that requires them.
//! Parameters enter the tape through [`Tape::param`], which caches one leaf
//! per [`ParamId`] so a parameter shared by several call sites accumulates a
//! single gradient.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{split_axis, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Abs,
}

/// Binary element-wise kinds. The right operand may be a scalar or match a
/// trailing suffix of the left operand's shape (expansion over leading axes).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    Affine(Var, f64),
    Softmax { x: Var, axis: usize },
    SumAxis { x: Var, axis: usize },
    SumAll(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Linear { x: Var, w: Var, b: Option<Var>, axis: usize },
    ConvTime { x: Var, w: Var, b: Option<Var>, pad: usize },
    Concat { parts: Vec<Var>, axis: usize },
    TakeTime { x: Var, start: usize, step: usize },
    Interleave(Var, Var),
    NodeTimeScores { q: Var, k: Var, scale: f64 },
    NodeTimeMix { p: Var, v: Var },
    NodeMix { a: Var, h: Var },
    TopKRows { x: Var, mask: Vec<bool> },
    RowNormalize(Var),
    GatherRows { table: Var, idx: Vec<usize> },
    BroadcastNodes { x: Var, nodes: usize },
    NodesMajor(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Unary(Unary::Sigmoid, _) => "sigmoid",
            Op::Unary(Unary::Tanh, _) => "tanh",
            Op::Unary(Unary::Relu, _) => "relu",
            Op::Unary(Unary::Exp, _) => "exp",
            Op::Unary(Unary::Abs, _) => "abs",
            Op::Binary(Binary::Add, ..) => "add",
            Op::Binary(Binary::Sub, ..) => "sub",
            Op::Binary(Binary::Mul, ..) => "hadamard",
            Op::Affine(..) => "affine",
            Op::Softmax { .. } => "softmax",
            Op::SumAxis { .. } => "sum_axis",
            Op::SumAll(_) => "sum_all",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Linear { .. } => "linear",
            Op::ConvTime { .. } => "conv_time",
            Op::Concat { .. } => "concat",
            Op::TakeTime { .. } => "take_time",
            Op::Interleave(..) => "interleave",
            Op::NodeTimeScores { .. } => "node_time_scores",
            Op::NodeTimeMix { .. } => "node_time_mix",
            Op::NodeMix { .. } => "node_mix",
            Op::TopKRows { .. } => "topk_rows",
            Op::RowNormalize(_) => "row_normalize",
            Op::GatherRows { .. } => "gather_rows",
            Op::BroadcastNodes { .. } => "broadcast_nodes",
            Op::NodesMajor(_) => "nodes_major",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, Var>,
}

/// Result of a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    param_leaves: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient w.r.t. a recorded value; `None` if it did not influence the root.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Per-parameter gradients indexed by [`ParamId`] for a store with `n` parameters.
    /// Parameters that never reached the tape get `None`.
    pub fn param_grads(&self, n: usize) -> Vec<Option<Tensor>> {
        let mut out = vec![None; n];
        for &(pid, var) in &self.param_leaves {
            if pid.0 < n {
                out[pid.0] = self.grads[var.0].clone();
            }
        }
        out
    }
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::dim(op, a.shape(), b.shape())
}

fn accumulate(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                stage: op.name().to_string(),
            });
        }
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Param => true,
            _ => self.op_inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf | Op::Param => vec![],
            Op::Unary(_, x)
            | Op::Affine(x, _)
            | Op::Softmax { x, .. }
            | Op::SumAxis { x, .. }
            | Op::SumAll(x)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::TakeTime { x, .. }
            | Op::TopKRows { x, .. }
            | Op::RowNormalize(x)
            | Op::BroadcastNodes { x, .. }
            | Op::NodesMajor(x) => vec![*x],
            Op::Binary(_, a, b)
            | Op::MatMul(a, b)
            | Op::Interleave(a, b)
            | Op::NodeTimeScores { q: a, k: b, .. }
            | Op::NodeTimeMix { p: a, v: b }
            | Op::NodeMix { a, h: b } => vec![*a, *b],
            Op::Linear { x, w, b, .. } | Op::ConvTime { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Concat { parts, .. } => parts.clone(),
            Op::GatherRows { table, .. } => vec![*table],
        }
    }

    /// A constant input: gradients are not propagated into it.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    /// An input that gradients are tracked for (used by gradient checks on inputs).
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        let v = self.push(value, Op::Leaf)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// Records a parameter's current value; repeated calls return the same leaf.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_leaves.get(&id) {
            return Ok(v);
        }
        let v = self.push(store.value(id).clone(), Op::Param)?;
        self.param_leaves.insert(id, v);
        Ok(v)
    }

    // ---- element-wise -------------------------------------------------

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let f: fn(f64) -> f64 = match kind {
            Unary::Sigmoid => |v| {
                if v >= 0.0 {
                    1.0 / (1.0 + (-v).exp())
                } else {
                    let e = v.exp();
                    e / (1.0 + e)
                }
            },
            Unary::Tanh => f64::tanh,
            Unary::Relu => |v| v.max(0.0),
            Unary::Exp => f64::exp,
            Unary::Abs => f64::abs,
        };
        let value = self.value(x).map(f);
        self.push(value, Op::Unary(kind, x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Relu, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Abs, x)
    }

    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let rep = broadcast_len(av, bv).ok_or_else(|| dim_err(kind_name(kind), av, bv))?;
        let bd = bv.data();
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_mut(rep) {
            for (i, o) in chunk.iter_mut().enumerate() {
                let r = if bd.len() == 1 { bd[0] } else { bd[i] };
                *o = match kind {
                    Binary::Add => *o + r,
                    Binary::Sub => *o - r,
                    Binary::Mul => *o * r,
                };
            }
        }
        self.push(out, Op::Binary(kind, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let value = self.value(x).map(|v| scale * v + shift);
        self.push(value, Op::Affine(x, scale))
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis("softmax", xv, axis)?;
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let mut out = xv.clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| (o * len + k) * inner + i;
                let m = (0..len).map(|k| d[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for k in 0..len {
                    let e = (d[at(k)] - m).exp();
                    d[at(k)] = e;
                    sum += e;
                }
                for k in 0..len {
                    d[at(k)] /= sum;
                }
            }
        }
        self.push(out, Op::Softmax { x, axis })
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis("sum_axis", xv, axis)?;
        let (outer, len, inner) = split_axis(xv.shape(), axis);
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let d = xv.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &d[(o * len + k) * inner..][..inner];
                for (acc, s) in out[o * inner..][..inner].iter_mut().zip(src) {
                    *acc += s;
                }
            }
        }
        self.push(Tensor::new(shape, out)?, Op::SumAxis { x, axis })
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    // ---- linear algebra -----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(dim_err("matmul", av, bv));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::dim("transpose", xv.shape(), &[0, 0]));
        }
        let t = xv.transposed();
        self.push(t, Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        self.push(t, Op::Reshape(x))
    }

    /// Affine map `W·x + b` contracting `axis` of `x` with the input width of
    /// `w: [out, in]`; all other axes are carried through.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>, axis: usize) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        check_axis("linear", xv, axis)?;
        if wv.rank() != 2 || wv.shape()[1] != xv.shape()[axis] {
            return Err(dim_err("linear", xv, wv));
        }
        let (outer, n_in, inner) = split_axis(xv.shape(), axis);
        let n_out = wv.shape()[0];
        let bias = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [n_out] {
                    return Err(dim_err("linear bias", wv, bv));
                }
                Some(bv.data())
            }
            None => None,
        };
        let (xd, wd) = (xv.data(), wv.data());
        let mut out = vec![0.0; outer * n_out * inner];
        for ou in 0..outer {
            for o in 0..n_out {
                let y = &mut out[(ou * n_out + o) * inner..][..inner];
                if let Some(bd) = bias {
                    y.fill(bd[o]);
                }
                for i in 0..n_in {
                    let wv = wd[o * n_in + i];
                    let xr = &xd[(ou * n_in + i) * inner..][..inner];
                    for (yy, xx) in y.iter_mut().zip(xr) {
                        *yy += wv * xx;
                    }
                }
            }
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = n_out;
        self.push(Tensor::new(shape, out)?, Op::Linear { x, w, b, axis })
    }

    /// Convolution along the last (time) axis of `x: [C_in, N, t]` with
    /// `w: [C_out, C_in, k]`. Zero padding of `k-1` positions is split as
    /// `(k-1)/2` on the left and the rest on the right, so `t` is preserved.
    pub fn conv_time(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if xv.rank() != 3 || wv.rank() != 3 || wv.shape()[1] != xv.shape()[0] || wv.shape()[2] == 0
        {
            return Err(dim_err("conv_time", xv, wv));
        }
        let (c_in, n, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let (c_out, k) = (wv.shape()[0], wv.shape()[2]);
        let pad = (k - 1) / 2;
        let bias = match b {
            Some(b) => {
                let bv = self.value(b);
                if bv.shape() != [c_out] {
                    return Err(dim_err("conv_time bias", wv, bv));
                }
                Some(bv.data())
            }
            None => None,
        };
        let (xd, wd) = (xv.data(), wv.data());
        let mut out = vec![0.0; c_out * n * t];
        for o in 0..c_out {
            if let Some(bd) = bias {
                out[o * n * t..][..n * t].fill(bd[o]);
            }
            for i in 0..c_in {
                for j in 0..k {
                    let wv = wd[(o * c_in + i) * k + j];
                    let (lo, hi, shift) = conv_range(t, j, pad);
                    if lo >= hi {
                        continue;
                    }
                    for nn in 0..n {
                        let y = &mut out[(o * n + nn) * t..][..t];
                        let xr = &xd[(i * n + nn) * t..][..t];
                        for s in lo..hi {
                            y[s] += wv * xr[(s as isize + shift) as usize];
                        }
                    }
                }
            }
        }
        self.push(
            Tensor::new(vec![c_out, n, t], out)?,
            Op::ConvTime { x, w, b, pad },
        )
    }

    // ---- structural -----------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .value(*parts.first().ok_or_else(|| Error::contract("concat of zero tensors"))?)
            .clone();
        check_axis("concat", &first, axis)?;
        let mut total = 0;
        for &p in parts {
            let pv = self.value(p);
            let same_rank = pv.rank() == first.rank();
            let others_match = same_rank
                && (0..pv.rank()).all(|a| a == axis || pv.shape()[a] == first.shape()[a]);
            if !others_match {
                return Err(dim_err("concat", &first, pv));
            }
            total += pv.shape()[axis];
        }
        let (outer, _, inner) = split_axis(first.shape(), axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let block = pv.shape()[axis] * inner;
                out.extend_from_slice(&pv.data()[o * block..][..block]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Strided selection along the last axis: positions `start, start+step, ...`.
    pub fn take_time(&mut self, x: Var, start: usize, step: usize) -> Result<Var> {
        let xv = self.value(x);
        let t = *xv.shape().last().unwrap_or(&0);
        if step == 0 || start >= t {
            return Err(Error::contract(format!(
                "take_time start {start} step {step} on length {t}"
            )));
        }
        let m = (t - start).div_ceil(step);
        let rows = xv.len() / t;
        let mut out = Vec::with_capacity(rows * m);
        for r in 0..rows {
            let src = &xv.data()[r * t..][..t];
            out.extend((0..m).map(|s| src[start + s * step]));
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = m;
        self.push(Tensor::new(shape, out)?, Op::TakeTime { x, start, step })
    }

    /// Interleaves two equal-shape tensors along the last axis: `a0 b0 a1 b1 ...`.
    pub fn interleave(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() || av.rank() == 0 {
            return Err(dim_err("interleave", av, bv));
        }
        let m = *av.shape().last().unwrap();
        let rows = av.len() / m.max(1);
        let mut out = Vec::with_capacity(av.len() * 2);
        for r in 0..rows {
            let (ar, br) = (&av.data()[r * m..][..m], &bv.data()[r * m..][..m]);
            for s in 0..m {
                out.push(ar[s]);
                out.push(br[s]);
            }
        }
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = 2 * m;
        self.push(Tensor::new(shape, out)?, Op::Interleave(a, b))
    }

    // ---- node/time contractions --------------------------------------

    /// `s[n,a,b] = scale * Σ_c q[c,n,a] k[c,n,b]` for `q, k: [C, N, t]`.
    pub fn node_time_scores(&mut self, q: Var, k: Var, scale: f64) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(k));
        if qv.rank() != 3 || qv.shape() != kv.shape() {
            return Err(dim_err("node_time_scores", qv, kv));
        }
        let (c, n, t) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let (qd, kd) = (qv.data(), kv.data());
        let mut out = vec![0.0; n * t * t];
        for cc in 0..c {
            for nn in 0..n {
                let qr = &qd[(cc * n + nn) * t..][..t];
                let kr = &kd[(cc * n + nn) * t..][..t];
                for a in 0..t {
                    let row = &mut out[(nn * t + a) * t..][..t];
                    for b in 0..t {
                        row[b] += qr[a] * kr[b];
                    }
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        self.push(
            Tensor::new(vec![n, t, t], out)?,
            Op::NodeTimeScores { q, k, scale },
        )
    }

    /// `out[c,n,a] = Σ_b p[n,a,b] v[c,n,b]` for `p: [N, t, t]`, `v: [C, N, t]`.
    pub fn node_time_mix(&mut self, p: Var, v: Var) -> Result<Var> {
        let (pv, vv) = (self.value(p), self.value(v));
        if pv.rank() != 3 || vv.rank() != 3 {
            return Err(dim_err("node_time_mix", pv, vv));
        }
        let (c, n, t) = (vv.shape()[0], vv.shape()[1], vv.shape()[2]);
        if pv.shape() != [n, t, t] {
            return Err(dim_err("node_time_mix", pv, vv));
        }
        let (pd, vd) = (pv.data(), vv.data());
        let mut out = vec![0.0; c * n * t];
        for cc in 0..c {
            for nn in 0..n {
                let vr = &vd[(cc * n + nn) * t..][..t];
                let o = &mut out[(cc * n + nn) * t..][..t];
                for a in 0..t {
                    let pr = &pd[(nn * t + a) * t..][..t];
                    o[a] = pr.iter().zip(vr).map(|(x, y)| x * y).sum();
                }
            }
        }
        self.push(Tensor::new(vec![c, n, t], out)?, Op::NodeTimeMix { p, v })
    }

    /// Propagates along the node axis: `out[c,i,s] = Σ_j a[i,j] h[c,j,s]`
    /// for `a: [N, N]`, `h: [C, N, t]`.
    pub fn node_mix(&mut self, a: Var, h: Var) -> Result<Var> {
        let (av, hv) = (self.value(a), self.value(h));
        if av.rank() != 2 || hv.rank() != 3 || av.shape() != [hv.shape()[1], hv.shape()[1]] {
            return Err(dim_err("node_mix", av, hv));
        }
        let (c, n, t) = (hv.shape()[0], hv.shape()[1], hv.shape()[2]);
        let mut out = vec![0.0; c * n * t];
        for cc in 0..c {
            // [N,N] x [N,t] slab product
            matmul_into(
                av.data(),
                &hv.data()[cc * n * t..][..n * t],
                &mut out[cc * n * t..][..n * t],
                n,
                n,
                t,
            );
        }
        self.push(Tensor::new(vec![c, n, t], out)?, Op::NodeMix { a, h })
    }

    /// Keeps the `tau` largest entries of each row of a 2-D tensor and zeroes
    /// the rest. Ties are broken towards the lower column index.
    pub fn topk_rows(&mut self, x: Var, tau: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::dim("topk_rows", xv.shape(), &[0, 0]));
        }
        let cols = xv.shape()[1];
        let mask = topk_mask(xv, tau);
        let mut out = xv.clone();
        for (o, &keep) in out.data_mut().iter_mut().zip(&mask) {
            if !keep {
                *o = 0.0;
            }
        }
        debug_assert_eq!(mask.len(), xv.shape()[0] * cols);
        self.push(out, Op::TopKRows { x, mask })
    }

    /// Divides every row by its sum; all-zero rows are left untouched.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::dim("row_normalize", xv.shape(), &[0, 0]));
        }
        let cols = xv.shape()[1];
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(cols.max(1)) {
            let s: f64 = row.iter().sum();
            if s != 0.0 {
                row.iter_mut().for_each(|v| *v /= s);
            }
        }
        self.push(out, Op::RowNormalize(x))
    }

    /// Row lookup: `out[t] = table[idx[t]]`, giving `[idx.len(), width]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        if tv.rank() != 2 {
            return Err(Error::dim("gather_rows", tv.shape(), &[0, 0]));
        }
        let (rows, width) = (tv.shape()[0], tv.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= rows {
                return Err(Error::Index {
                    what: "embedding table",
                    index: i,
                    len: rows,
                });
            }
            out.extend_from_slice(tv.row(i));
        }
        self.push(
            Tensor::new(vec![idx.len(), width], out)?,
            Op::GatherRows {
                table,
                idx: idx.to_vec(),
            },
        )
    }

    /// `[T, d] -> [d, N, T]`, copying each time step's vector to every node.
    pub fn broadcast_nodes(&mut self, x: Var, nodes: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::dim("broadcast_nodes", xv.shape(), &[0, 0]));
        }
        let (t, d) = (xv.shape()[0], xv.shape()[1]);
        let mut out = vec![0.0; d * nodes * t];
        for c in 0..d {
            for nn in 0..nodes {
                for s in 0..t {
                    out[(c * nodes + nn) * t + s] = xv.data()[s * d + c];
                }
            }
        }
        self.push(
            Tensor::new(vec![d, nodes, t], out)?,
            Op::BroadcastNodes { x, nodes },
        )
    }

    /// `[C, N, T] -> [N, C*T]`, flattening each node's (channel, time) block.
    pub fn nodes_major(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 3 {
            return Err(Error::dim("nodes_major", xv.shape(), &[0, 0, 0]));
        }
        let (c, n, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let mut out = vec![0.0; c * n * t];
        for cc in 0..c {
            for nn in 0..n {
                out[(nn * c + cc) * t..][..t].copy_from_slice(&xv.data()[(cc * n + nn) * t..][..t]);
            }
        }
        self.push(Tensor::new(vec![n, c * t], out)?, Op::NodesMajor(x))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Reverse-mode pass from a scalar root with seed 1.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        self.backward_with_seed(root, 1.0)
    }

    pub fn backward_with_seed(&self, root: Var, seed: f64) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::contract(format!(
                "backward root must be a scalar, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(rv.shape(), seed));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(idx, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        grads.resize(self.nodes.len(), None);
        let mut param_leaves: Vec<(ParamId, Var)> =
            self.param_leaves.iter().map(|(&p, &v)| (p, v)).collect();
        param_leaves.sort_by_key(|(p, _)| p.0);
        Ok(Gradients {
            grads,
            param_leaves,
        })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let y = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Unary(kind, x) => {
                let xv = self.value(*x);
                let d: Vec<f64> = match kind {
                    Unary::Sigmoid => zip3(gd, y.data(), |g, y| g * y * (1.0 - y)),
                    Unary::Tanh => zip3(gd, y.data(), |g, y| g * (1.0 - y * y)),
                    Unary::Exp => zip3(gd, y.data(), |g, y| g * y),
                    Unary::Relu => zip3(gd, xv.data(), |g, x| if x > 0.0 { g } else { 0.0 }),
                    Unary::Abs => zip3(gd, xv.data(), |g, x| {
                        if x > 0.0 {
                            g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    }),
                };
                accumulate(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), d).unwrap());
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let rep = broadcast_len(av, bv).unwrap();
                if self.needs(*a) {
                    let da = match kind {
                        Binary::Add | Binary::Sub => g.clone(),
                        Binary::Mul => {
                            let mut da = g.clone();
                            for (chunk, _) in da.data_mut().chunks_mut(rep).zip(0..) {
                                for (i, v) in chunk.iter_mut().enumerate() {
                                    let r = if bv.len() == 1 { bv.data()[0] } else { bv.data()[i] };
                                    *v *= r;
                                }
                            }
                            da
                        }
                    };
                    accumulate(&mut grads[a.0], da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; bv.len()];
                    for (ci, chunk) in gd.chunks(rep).enumerate() {
                        for (i, &gv) in chunk.iter().enumerate() {
                            let j = if bv.len() == 1 { 0 } else { i };
                            db[j] += match kind {
                                Binary::Add => gv,
                                Binary::Sub => -gv,
                                Binary::Mul => gv * av.data()[ci * rep + i],
                            };
                        }
                    }
                    accumulate(&mut grads[b.0], Tensor::new(bv.shape().to_vec(), db).unwrap());
                }
            }
            Op::Affine(x, scale) => {
                accumulate(&mut grads[x.0], g.map(|v| v * scale));
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = split_axis(y.shape(), *axis);
                let yd = y.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| (o * len + k) * inner + i;
                        let dot: f64 = (0..len).map(|k| gd[at(k)] * yd[at(k)]).sum();
                        for k in 0..len {
                            dx[at(k)] = yd[at(k)] * (gd[at(k)] - dot);
                        }
                    }
                }
                accumulate(&mut grads[x.0], Tensor::new(y.shape().to_vec(), dx).unwrap());
            }
            Op::SumAxis { x, axis } => {
                let xv = self.value(*x);
                let (outer, len, inner) = split_axis(xv.shape(), *axis);
                let mut dx = vec![0.0; xv.len()];
                for o in 0..outer {
                    for k in 0..len {
                        dx[(o * len + k) * inner..][..inner]
                            .copy_from_slice(&gd[o * inner..][..inner]);
                    }
                }
                accumulate(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::SumAll(x) => {
                let xv = self.value(*x);
                accumulate(&mut grads[x.0], Tensor::full(xv.shape(), gd[0]));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs(*a) {
                    // dA = G · Bᵀ
                    let bt = bv.transposed();
                    let mut da = vec![0.0; m * k];
                    matmul_into(gd, bt.data(), &mut da, m, n, k);
                    accumulate(&mut grads[a.0], Tensor::new(vec![m, k], da).unwrap());
                }
                if self.needs(*b) {
                    // dB = Aᵀ · G
                    let at = av.transposed();
                    let mut db = vec![0.0; k * n];
                    matmul_into(at.data(), gd, &mut db, k, m, n);
                    accumulate(&mut grads[b.0], Tensor::new(vec![k, n], db).unwrap());
                }
            }
            Op::Transpose(x) => {
                accumulate(&mut grads[x.0], g.transposed());
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).shape().to_vec();
                accumulate(&mut grads[x.0], g.clone().reshape(&shape).unwrap());
            }
            Op::Linear { x, w, b, axis } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (outer, n_in, inner) = split_axis(xv.shape(), *axis);
                let n_out = wv.shape()[0];
                let (xd, wd) = (xv.data(), wv.data());
                if self.needs(*x) {
                    let mut dx = vec![0.0; xv.len()];
                    for ou in 0..outer {
                        for o in 0..n_out {
                            let gr = &gd[(ou * n_out + o) * inner..][..inner];
                            for i in 0..n_in {
                                let wv = wd[o * n_in + i];
                                let dr = &mut dx[(ou * n_in + i) * inner..][..inner];
                                for (d, gg) in dr.iter_mut().zip(gr) {
                                    *d += wv * gg;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), dx).unwrap());
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; n_out * n_in];
                    for ou in 0..outer {
                        for o in 0..n_out {
                            let gr = &gd[(ou * n_out + o) * inner..][..inner];
                            for i in 0..n_in {
                                let xr = &xd[(ou * n_in + i) * inner..][..inner];
                                dw[o * n_in + i] += dot(gr, xr);
                            }
                        }
                    }
                    accumulate(&mut grads[w.0], Tensor::new(vec![n_out, n_in], dw).unwrap());
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let mut db = vec![0.0; n_out];
                    for ou in 0..outer {
                        for (o, d) in db.iter_mut().enumerate() {
                            *d += gd[(ou * n_out + o) * inner..][..inner].iter().sum::<f64>();
                        }
                    }
                    accumulate(&mut grads[b.0], Tensor::new(vec![n_out], db).unwrap());
                }
            }
            Op::ConvTime { x, w, b, pad } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (c_in, n, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let (c_out, k) = (wv.shape()[0], wv.shape()[2]);
                let (xd, wd) = (xv.data(), wv.data());
                let need_x = self.needs(*x);
                let need_w = self.needs(*w);
                let mut dx = vec![0.0; if need_x { xv.len() } else { 0 }];
                let mut dw = vec![0.0; if need_w { wv.len() } else { 0 }];
                for o in 0..c_out {
                    for i in 0..c_in {
                        for j in 0..k {
                            let (lo, hi, shift) = conv_range(t, j, *pad);
                            if lo >= hi {
                                continue;
                            }
                            let widx = (o * c_in + i) * k + j;
                            let wv = wd[widx];
                            let mut acc = 0.0;
                            for nn in 0..n {
                                let gr = &gd[(o * n + nn) * t..][..t];
                                let xoff = (i * n + nn) * t;
                                for s in lo..hi {
                                    let xs = xoff + (s as isize + shift) as usize;
                                    if need_x {
                                        dx[xs] += wv * gr[s];
                                    }
                                    acc += gr[s] * xd[xs];
                                }
                            }
                            if need_w {
                                dw[widx] += acc;
                            }
                        }
                    }
                }
                if need_x {
                    accumulate(&mut grads[x.0], Tensor::new(vec![c_in, n, t], dx).unwrap());
                }
                if need_w {
                    accumulate(&mut grads[w.0], Tensor::new(wv.shape().to_vec(), dw).unwrap());
                }
                if let Some(b) = b.filter(|b| self.needs(*b)) {
                    let db: Vec<f64> = (0..c_out)
                        .map(|o| gd[o * n * t..][..n * t].iter().sum())
                        .collect();
                    accumulate(&mut grads[b.0], Tensor::new(vec![c_out], db).unwrap());
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let pv = self.value(p);
                    let len = pv.shape()[*axis];
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(pv.len());
                        for o in 0..outer {
                            dp.extend_from_slice(&gd[(o * total + offset) * inner..][..len * inner]);
                        }
                        accumulate(&mut grads[p.0], Tensor::new(pv.shape().to_vec(), dp).unwrap());
                    }
                    offset += len;
                }
            }
            Op::TakeTime { x, start, step } => {
                let xv = self.value(*x);
                let t = *xv.shape().last().unwrap();
                let m = *y.shape().last().unwrap();
                let mut dx = vec![0.0; xv.len()];
                for r in 0..xv.len() / t {
                    for s in 0..m {
                        dx[r * t + start + s * step] += gd[r * m + s];
                    }
                }
                accumulate(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::Interleave(a, b) => {
                let av = self.value(*a);
                let m = *av.shape().last().unwrap();
                let rows = av.len() / m;
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(av.len());
                for r in 0..rows {
                    for s in 0..m {
                        da.push(gd[r * 2 * m + 2 * s]);
                        db.push(gd[r * 2 * m + 2 * s + 1]);
                    }
                }
                if self.needs(*a) {
                    accumulate(&mut grads[a.0], Tensor::new(av.shape().to_vec(), da).unwrap());
                }
                if self.needs(*b) {
                    accumulate(&mut grads[b.0], Tensor::new(av.shape().to_vec(), db).unwrap());
                }
            }
            Op::NodeTimeScores { q, k, scale } => {
                let (qv, kv) = (self.value(*q), self.value(*k));
                let (c, n, t) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
                let (qd, kd) = (qv.data(), kv.data());
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                for cc in 0..c {
                    for nn in 0..n {
                        let base = (cc * n + nn) * t;
                        for a in 0..t {
                            let gr = &gd[(nn * t + a) * t..][..t];
                            for b in 0..t {
                                let gs = gr[b] * scale;
                                dq[base + a] += gs * kd[base + b];
                                dk[base + b] += gs * qd[base + a];
                            }
                        }
                    }
                }
                if self.needs(*q) {
                    accumulate(&mut grads[q.0], Tensor::new(qv.shape().to_vec(), dq).unwrap());
                }
                if self.needs(*k) {
                    accumulate(&mut grads[k.0], Tensor::new(kv.shape().to_vec(), dk).unwrap());
                }
            }
            Op::NodeTimeMix { p, v } => {
                let (pv, vv) = (self.value(*p), self.value(*v));
                let (c, n, t) = (vv.shape()[0], vv.shape()[1], vv.shape()[2]);
                let (pd, vd) = (pv.data(), vv.data());
                let mut dp = vec![0.0; pv.len()];
                let mut dv = vec![0.0; vv.len()];
                for cc in 0..c {
                    for nn in 0..n {
                        let base = (cc * n + nn) * t;
                        for a in 0..t {
                            let ga = gd[base + a];
                            let prow = (nn * t + a) * t;
                            for b in 0..t {
                                dp[prow + b] += ga * vd[base + b];
                                dv[base + b] += pd[prow + b] * ga;
                            }
                        }
                    }
                }
                if self.needs(*p) {
                    accumulate(&mut grads[p.0], Tensor::new(pv.shape().to_vec(), dp).unwrap());
                }
                if self.needs(*v) {
                    accumulate(&mut grads[v.0], Tensor::new(vv.shape().to_vec(), dv).unwrap());
                }
            }
            Op::NodeMix { a, h } => {
                let (av, hv) = (self.value(*a), self.value(*h));
                let (c, n, t) = (hv.shape()[0], hv.shape()[1], hv.shape()[2]);
                if self.needs(*a) {
                    // dA[i,j] = Σ_c Σ_s G[c,i,s] H[c,j,s]
                    let mut da = vec![0.0; n * n];
                    for cc in 0..c {
                        for i in 0..n {
                            let gr = &gd[(cc * n + i) * t..][..t];
                            for j in 0..n {
                                da[i * n + j] += dot(gr, &hv.data()[(cc * n + j) * t..][..t]);
                            }
                        }
                    }
                    accumulate(&mut grads[a.0], Tensor::new(vec![n, n], da).unwrap());
                }
                if self.needs(*h) {
                    let at = av.transposed();
                    let mut dh = vec![0.0; hv.len()];
                    for cc in 0..c {
                        matmul_into(
                            at.data(),
                            &gd[cc * n * t..][..n * t],
                            &mut dh[cc * n * t..][..n * t],
                            n,
                            n,
                            t,
                        );
                    }
                    accumulate(&mut grads[h.0], Tensor::new(hv.shape().to_vec(), dh).unwrap());
                }
            }
            Op::TopKRows { x, mask } => {
                let d: Vec<f64> = gd
                    .iter()
                    .zip(mask)
                    .map(|(g, &m)| if m { *g } else { 0.0 })
                    .collect();
                accumulate(&mut grads[x.0], Tensor::new(y.shape().to_vec(), d).unwrap());
            }
            Op::RowNormalize(x) => {
                let xv = self.value(*x);
                let cols = xv.shape()[1];
                let mut dx = vec![0.0; xv.len()];
                for r in 0..xv.shape()[0] {
                    let xr = &xv.data()[r * cols..][..cols];
                    let yr = &y.data()[r * cols..][..cols];
                    let gr = &gd[r * cols..][..cols];
                    let s: f64 = xr.iter().sum();
                    let dr = &mut dx[r * cols..][..cols];
                    if s == 0.0 {
                        dr.copy_from_slice(gr);
                    } else {
                        let gy = dot(gr, yr);
                        for (d, g) in dr.iter_mut().zip(gr) {
                            *d = (g - gy) / s;
                        }
                    }
                }
                accumulate(&mut grads[x.0], Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::GatherRows { table, idx } => {
                let tv = self.value(*table);
                let width = tv.shape()[1];
                let mut dt = vec![0.0; tv.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for c in 0..width {
                        dt[i * width + c] += gd[r * width + c];
                    }
                }
                accumulate(&mut grads[table.0], Tensor::new(tv.shape().to_vec(), dt).unwrap());
            }
            Op::BroadcastNodes { x, nodes } => {
                let xv = self.value(*x);
                let (t, d) = (xv.shape()[0], xv.shape()[1]);
                let mut dx = vec![0.0; xv.len()];
                for c in 0..d {
                    for nn in 0..*nodes {
                        for s in 0..t {
                            dx[s * d + c] += gd[(c * nodes + nn) * t + s];
                        }
                    }
                }
                accumulate(&mut grads[x.0], Tensor::new(vec![t, d], dx).unwrap());
            }
            Op::NodesMajor(x) => {
                let xv = self.value(*x);
                let (c, n, t) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let mut dx = vec![0.0; xv.len()];
                for cc in 0..c {
                    for nn in 0..n {
                        dx[(cc * n + nn) * t..][..t].copy_from_slice(&gd[(nn * c + cc) * t..][..t]);
                    }
                }
                accumulate(&mut grads[x.0], Tensor::new(vec![c, n, t], dx).unwrap());
            }
        }
    }
}

fn kind_name(kind: Binary) -> &'static str {
    match kind {
        Binary::Add => "add",
        Binary::Sub => "sub",
        Binary::Mul => "hadamard",
    }
}

/// Length of the repeating block when `b` broadcasts onto `a`, or `None`.
fn broadcast_len(a: &Tensor, b: &Tensor) -> Option<usize> {
    if b.len() == 1 {
        return Some(1);
    }
    let (ar, br) = (a.rank(), b.rank());
    if br <= ar && a.shape()[ar - br..] == *b.shape() {
        Some(b.len())
    } else {
        None
    }
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<()> {
    if axis >= t.rank() {
        return Err(Error::Index {
            what: op,
            index: axis,
            len: t.rank(),
        });
    }
    Ok(())
}

/// Output positions `[lo, hi)` that read input `s + shift` for kernel tap `j`.
fn conv_range(t: usize, j: usize, pad: usize) -> (usize, usize, isize) {
    let shift = j as isize - pad as isize;
    let lo = (-shift).max(0) as usize;
    let hi = (t as isize - shift).clamp(0, t as isize) as usize;
    (lo.min(t), hi, shift)
}

pub(crate) fn topk_mask(x: &Tensor, tau: usize) -> Vec<bool> {
    let cols = x.shape()[1];
    let mut mask = vec![false; x.len()];
    let mut order: Vec<usize> = Vec::with_capacity(cols);
    for (r, row) in x.data().chunks(cols.max(1)).enumerate() {
        order.clear();
        order.extend(0..cols);
        // stable sort keeps lower indices first among equal values
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal));
        for &c in order.iter().take(tau) {
            mask[r * cols + c] = true;
        }
    }
    mask
}

fn zip3(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += a[m,k] · b[k,n]`, with `out` assumed zeroed by the caller.
fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..][..n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[p * n..][..n]) {
                *o += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2)).unwrap();
        let m = tape.constant(t(&[2, 2], &[1., 2., 3., 4.])).unwrap();
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1., 2., 3., 4.]);

        let a = tape.constant(t(&[1, 2], &[1., 2.])).unwrap();
        let b = tape.constant(t(&[2, 1], &[3., 4.])).unwrap();
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[1., 2., 3.])).unwrap();
        let z = tape.constant(Tensor::zeros(&[3])).unwrap();
        let h = tape.mul(a, z).unwrap();
        assert_eq!(tape.value(h).data(), &[0., 0., 0.]);

        let x = tape.constant(Tensor::zeros(&[2])).unwrap();
        let s = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);

        let zero = tape.constant(Tensor::scalar(0.0)).unwrap();
        let sg = tape.sigmoid(zero).unwrap();
        assert_eq!(tape.value(sg).data(), &[0.5]);
    }

    #[test]
    fn incompatible_broadcast_rejected() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(tape.add(a, b), Err(Error::Dimension { .. })));
        // trailing-suffix broadcast is accepted
        let c = tape.constant(Tensor::zeros(&[3])).unwrap();
        assert!(tape.add(a, c).is_ok());
    }

    #[test]
    fn identity_linear_is_identity() {
        let mut tape = Tape::new();
        let x = tape
            .constant(Tensor::from_fn(&[3, 2, 4], |i| i as f64 * 0.5 - 1.0))
            .unwrap();
        let w = tape.constant(Tensor::eye(3)).unwrap();
        let b = tape.constant(Tensor::zeros(&[3])).unwrap();
        let y = tape.linear(x, w, Some(b), 0).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn linear_expands_channels() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 5, 12])).unwrap();
        let w = tape.constant(Tensor::zeros(&[4, 1])).unwrap();
        let y = tape.linear(x, w, None, 0).unwrap();
        assert_eq!(tape.shape(y), &[4, 5, 12]);
        let bad = tape.constant(Tensor::zeros(&[4, 2])).unwrap();
        assert!(tape.linear(x, bad, None, 0).is_err());
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(1000.0)).unwrap();
        assert!(matches!(tape.exp(x), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn conv_time_preserves_length_for_even_and_odd_kernels() {
        for k in 1..=6 {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::full(&[2, 3, 5], 1.0)).unwrap();
            let w = tape.constant(Tensor::full(&[4, 2, k], 1.0)).unwrap();
            let y = tape.conv_time(x, w, None).unwrap();
            assert_eq!(tape.shape(y), &[4, 3, 5]);
        }
    }

    #[test]
    fn topk_ties_prefer_lower_index() {
        let x = t(&[1, 4], &[0.5, 0.5, 0.5, 0.1]);
        assert_eq!(topk_mask(&x, 2), vec![true, true, false, false]);
    }

    #[test]
    fn row_normalize_leaves_zero_rows() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0., 0., 1., 3.])).unwrap();
        let y = tape.row_normalize(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0., 0., 0.25, 0.75]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2])).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shared_param_accumulates_once() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::scalar(3.0)).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, w).unwrap();
        let b = tape.param(&store, w).unwrap();
        assert_eq!(a, b);
        let y = tape.mul(a, b).unwrap();
        let g = tape.backward(y).unwrap();
        let pg = g.param_grads(store.len());
        assert_eq!(pg[0].as_ref().unwrap().data(), &[6.0]);
    }

    #[test]
    fn untouched_params_get_no_gradient() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::scalar(2.0)).unwrap();
        store.register("unused", Tensor::scalar(1.0)).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, w).unwrap();
        let y = tape.sum_all(a).unwrap();
        let pg = tape.backward(y).unwrap().param_grads(store.len());
        assert!(pg[0].is_some());
        assert!(pg[1].is_none());
    }
}
