//! Reverse-mode differentiation over [`DenseArray`] values.
//!
//! Every primitive appends a node to the [`Tape`]; nodes are only ever
//! appended, so insertion order is a topological order and the backward
//! sweep is a single reverse pass. Nodes whose inputs are all constants are
//! stored for uniform handle access but never visited by the sweep.

use std::collections::HashMap;

use super::array::DenseArray;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// A trainable array together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub value: DenseArray,
    pub grad: Option<DenseArray>,
}

impl Parameter {
    pub fn new(value: DenseArray) -> Self {
        Self { value, grad: None }
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Transpose(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sum(Var, usize),
    Mean(Var, usize),
    Variance(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    L2Normalize(Var),
    Concat(Vec<Var>, usize),
    Reshape(Var),
}

struct Node {
    value: DenseArray,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar loss with respect to every leaf that required them.
#[derive(Debug, Default)]
pub struct Gradients {
    by_leaf: HashMap<Var, DenseArray>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&DenseArray> {
        self.by_leaf.get(&v)
    }

    /// Adds the gradient of `v` into `param.grad`.
    pub fn accumulate(&self, v: Var, param: &mut Parameter) -> Result<()> {
        let g = self
            .get(v)
            .ok_or_else(|| Error::Grad(format!("no gradient recorded for {v:?}")))?;
        if g.shape() != param.value.shape() {
            return Err(Error::shape(
                "accumulate",
                format!(
                    "gradient {:?} vs parameter {:?}",
                    g.shape(),
                    param.value.shape()
                ),
            ));
        }
        match &mut param.grad {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            None => param.grad = Some(g.clone()),
        }
        Ok(())
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn axis_extents(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for d in 0..rank {
        let da = if d + a.len() >= rank {
            a[d + a.len() - rank]
        } else {
            1
        };
        let db = if d + b.len() >= rank {
            b[d + b.len() - rank]
        } else {
            1
        };
        out[d] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let lead = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        if shape[d] != 1 {
            strides[d + lead] = acc;
        }
        acc *= shape[d];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
fn for_each_broadcast(
    out: &[usize],
    a: &[usize],
    b: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    if a == out && b == out {
        (0..n).for_each(|i| f(i, i, i));
        return;
    }
    let sa = broadcast_strides(a, out);
    let sb = broadcast_strides(b, out);
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    // Walk the last axis in a tight loop and carry the counter only across
    // the outer axes.
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut counter = vec![0usize; rank - 1];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < n {
        for t in 0..inner {
            f(o + t, ia + t * ia_step, ib + t * ib_step);
        }
        o += inner;
        for d in (0..rank - 1).rev() {
            counter[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if counter[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            counter[d] = 0;
        }
    }
}

/// `out[n×m] += a[n×k] · b[k×m]`
fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    // SAFETY: slice lengths match the row-major strides passed to dgemm.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            m as isize,
            1,
            1.0,
            out.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// `out[n×k] += g[n×m] · b[k×m]ᵀ`
fn gemm_nt(g: &[f64], b: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    // SAFETY: b is read as its transpose through swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            n,
            m,
            k,
            1.0,
            g.as_ptr(),
            m as isize,
            1,
            b.as_ptr(),
            1,
            m as isize,
            1.0,
            out.as_mut_ptr(),
            k as isize,
            1,
        );
    }
}

/// `out[k×m] += a[n×k]ᵀ · g[n×m]`
fn gemm_tn(a: &[f64], g: &[f64], out: &mut [f64], n: usize, k: usize, m: usize) {
    // SAFETY: a is read as its transpose through swapped strides.
    unsafe {
        matrixmultiply::dgemm(
            k,
            n,
            m,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            g.as_ptr(),
            m as isize,
            1,
            1.0,
            out.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// Shape bookkeeping for the supported matmul forms:
/// `[n,k]·[k,m]`, `[B,n,k]·[B,k,m]` and `[B,n,k]·[k,m]`.
struct MatMulDims {
    batch: usize,
    n: usize,
    k: usize,
    m: usize,
    shared_rhs: bool,
}

fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatMulDims> {
    let bad = || Error::shape("matmul", format!("{a:?} · {b:?}"));
    match (a.len(), b.len()) {
        (2, 2) if a[1] == b[0] => Ok(MatMulDims {
            batch: 1,
            n: a[0],
            k: a[1],
            m: b[1],
            shared_rhs: true,
        }),
        (3, 3) if a[0] == b[0] && a[2] == b[1] => Ok(MatMulDims {
            batch: a[0],
            n: a[1],
            k: a[2],
            m: b[2],
            shared_rhs: false,
        }),
        (3, 2) if a[2] == b[0] => Ok(MatMulDims {
            batch: 1,
            n: a[0] * a[1],
            k: a[2],
            m: b[1],
            shared_rhs: true,
        }),
        _ => Err(bad()),
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

    pub fn value(&self, v: Var) -> &DenseArray {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: DenseArray, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: DenseArray) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Registers a trainable parameter as a gradient-requiring leaf.
    pub fn param(&mut self, p: &Parameter) -> Result<Var> {
        self.leaf(p.value.clone(), true)
    }

    fn push(
        &mut self,
        value: DenseArray,
        op: Op,
        name: &'static str,
        inputs: &[Var],
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let out_shape = broadcast_shape(va.shape(), vb.shape())
            .ok_or_else(|| Error::shape(name, format!("{:?} vs {:?}", va.shape(), vb.shape())))?;
        let mut out = DenseArray::zeros(out_shape.clone());
        {
            let (da, db) = (va.data(), vb.data());
            let od = out.data_mut();
            for_each_broadcast(&out_shape, va.shape(), vb.shape(), |o, ia, ib| {
                od[o] = f(da[ia], db[ib]);
            });
        }
        self.push(out, op, name, &[a, b])
    }

    /// Elementwise sum with trailing-axis broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), "scale", &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::Offset(a), "add_scalar", &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let d = matmul_dims(va.shape(), vb.shape())?;
        let out_shape = match va.rank() {
            2 => vec![d.n, d.m],
            _ => vec![va.shape()[0], va.shape()[1], d.m],
        };
        let mut out = DenseArray::zeros(out_shape);
        {
            let od = out.data_mut();
            for bi in 0..d.batch {
                let a_off = bi * d.n * d.k;
                let b_off = if d.shared_rhs { 0 } else { bi * d.k * d.m };
                gemm_nn(
                    &va.data()[a_off..a_off + d.n * d.k],
                    &vb.data()[b_off..b_off + d.k * d.m],
                    &mut od[bi * d.n * d.m..(bi + 1) * d.n * d.m],
                    d.n,
                    d.k,
                    d.m,
                );
            }
        }
        self.push(out, Op::MatMul(a, b), "matmul", &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.rank() != 2 {
            return Err(Error::shape(
                "transpose",
                format!("{:?} is not rank 2", va.shape()),
            ));
        }
        let (r, c) = (va.shape()[0], va.shape()[1]);
        let mut out = DenseArray::zeros(vec![c, r]);
        for i in 0..r {
            for j in 0..c {
                out.data_mut()[j * r + i] = va.data()[i * c + j];
            }
        }
        self.push(out, Op::Transpose(a), "transpose", &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::tanh);
        self.push(out, Op::Tanh(a), "tanh", &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a), "exp", &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a), "log", &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::sqrt);
        self.push(out, Op::Sqrt(a), "sqrt", &[a])
    }

    fn check_axis(&self, a: Var, axis: usize, op: &'static str) -> Result<()> {
        let rank = self.value(a).rank();
        if axis >= rank {
            return Err(Error::shape(
                op,
                format!("axis {axis} out of range for rank {rank}"),
            ));
        }
        Ok(())
    }

    fn reduced_shape(&self, a: Var, axis: usize) -> Vec<usize> {
        let mut s = self.value(a).shape().to_vec();
        s.remove(axis);
        s
    }

    /// Sum over `axis`; the axis is removed from the result shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "sum_axis")?;
        let out = self.reduce(a, axis, |xs| xs.iter().sum());
        self.push(out, Op::Sum(a, axis), "sum_axis", &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "mean_axis")?;
        let out = self.reduce(a, axis, |xs| xs.iter().sum::<f64>() / xs.len() as f64);
        self.push(out, Op::Mean(a, axis), "mean_axis", &[a])
    }

    /// Population variance (divide by the axis length) over `axis`.
    pub fn variance_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "variance_axis")?;
        let out = self.reduce(a, axis, |xs| {
            let n = xs.len() as f64;
            let m = xs.iter().sum::<f64>() / n;
            xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n
        });
        self.push(out, Op::Variance(a, axis), "variance_axis", &[a])
    }

    fn reduce(&self, a: Var, axis: usize, f: impl Fn(&[f64]) -> f64) -> DenseArray {
        let va = self.value(a);
        let (outer, n, inner) = axis_extents(va.shape(), axis);
        let mut out = DenseArray::zeros(self.reduced_shape(a, axis));
        let mut buf = vec![0.0; n];
        for o in 0..outer {
            for i in 0..inner {
                for (k, b) in buf.iter_mut().enumerate() {
                    *b = va.data()[o * n * inner + k * inner + i];
                }
                out.data_mut()[o * inner + i] = f(&buf);
            }
        }
        out
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let out = DenseArray::scalar(self.value(a).sum());
        self.push(out, Op::SumAll(a), "sum_all", &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let out = DenseArray::scalar(va.sum() / va.len() as f64);
        self.push(out, Op::MeanAll(a), "mean_all", &[a])
    }

    fn softmax_values(va: &DenseArray, axis: usize, log: bool) -> DenseArray {
        let (outer, n, inner) = axis_extents(va.shape(), axis);
        let mut out = va.clone();
        let od = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |k: usize| o * n * inner + k * inner + i;
                let max = (0..n).map(|k| od[at(k)]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..n).map(|k| (od[at(k)] - max).exp()).sum();
                let lz = z.ln();
                for k in 0..n {
                    let shifted = od[at(k)] - max;
                    od[at(k)] = if log { shifted - lz } else { shifted.exp() / z };
                }
            }
        }
        out
    }

    /// Max-shifted softmax over `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "softmax")?;
        let out = Self::softmax_values(self.value(a), axis, false);
        self.push(out, Op::Softmax(a, axis), "softmax", &[a])
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check_axis(a, axis, "log_softmax")?;
        let out = Self::softmax_values(self.value(a), axis, true);
        self.push(out, Op::LogSoftmax(a, axis), "log_softmax", &[a])
    }

    /// Scales every vector along the last axis to unit L2 norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let w = va.cols();
        let mut out = va.clone();
        for row in out.data_mut().chunks_mut(w) {
            let n = super::array::l2_norm(row);
            row.iter_mut().for_each(|v| *v /= n);
        }
        self.push(out, Op::L2Normalize(a), "l2_normalize", &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        self.check_axis(*first, axis, "concat")?;
        let base = self.value(*first).shape().to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} vs {base:?} on axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let v = self.value(p);
                let n = v.shape()[axis];
                data.extend_from_slice(&v.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let out = DenseArray::new(shape, data)?;
        self.push(out, Op::Concat(parts.to_vec(), axis), "concat", parts)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        self.push(out, Op::Reshape(a), "reshape", &[a])
    }

    /// Backpropagates from the scalar `loss`, returning gradients for every
    /// gradient-requiring leaf, then clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Grad(format!(
                "loss has shape {:?}, expected a scalar",
                lv.shape()
            )));
        }
        if !self.nodes[loss.0].needs_grad {
            return Err(Error::Grad(
                "loss is detached from every trainable leaf".into(),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            for (target, contribution) in self.local_grads(idx, &g)? {
                if !self.nodes[target.0].needs_grad {
                    continue;
                }
                match &mut grads[target.0] {
                    Some(acc) => acc.iter_mut().zip(&contribution).for_each(|(a, c)| *a += c),
                    slot @ None => *slot = Some(contribution),
                }
            }
        }

        let mut by_leaf = HashMap::new();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let data = grads[idx]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.len()]);
                if data.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
                by_leaf.insert(
                    Var(idx),
                    DenseArray::new(node.value.shape().to_vec(), data)?,
                );
            }
        }
        // Leaves recorded after the loss cannot influence it.
        for (idx, node) in self.nodes.iter().enumerate().skip(loss.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                by_leaf.insert(Var(idx), DenseArray::zeros(node.value.shape().to_vec()));
            }
        }
        self.nodes.clear();
        Ok(Gradients { by_leaf })
    }

    /// Vector-Jacobian products of node `idx` for upstream gradient `g`.
    fn local_grads(&self, idx: usize, g: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut res = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -1.0
                } else {
                    1.0
                };
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                let mut ga = vec![0.0; val(*a).len()];
                let mut gb = vec![0.0; val(*b).len()];
                for_each_broadcast(out.shape(), sa, sb, |o, ia, ib| {
                    ga[ia] += g[o];
                    gb[ib] += sign * g[o];
                });
                res.push((*a, ga));
                res.push((*b, gb));
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let is_div = matches!(node.op, Op::Div(..));
                let (va, vb) = (val(*a), val(*b));
                let mut ga = vec![0.0; va.len()];
                let mut gb = vec![0.0; vb.len()];
                let (da, db) = (va.data(), vb.data());
                for_each_broadcast(out.shape(), va.shape(), vb.shape(), |o, ia, ib| {
                    if is_div {
                        ga[ia] += g[o] / db[ib];
                        gb[ib] -= g[o] * da[ia] / (db[ib] * db[ib]);
                    } else {
                        ga[ia] += g[o] * db[ib];
                        gb[ib] += g[o] * da[ia];
                    }
                });
                res.push((*a, ga));
                res.push((*b, gb));
            }
            Op::Scale(a, c) => res.push((*a, g.iter().map(|x| x * c).collect())),
            Op::Offset(a) | Op::Reshape(a) => res.push((*a, g.to_vec())),
            Op::MatMul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let d = matmul_dims(va.shape(), vb.shape())?;
                let (need_a, need_b) = (self.nodes[a.0].needs_grad, self.nodes[b.0].needs_grad);
                let mut ga = vec![0.0; if need_a { va.len() } else { 0 }];
                let mut gb = vec![0.0; if need_b { vb.len() } else { 0 }];
                for bi in 0..d.batch {
                    let a_off = bi * d.n * d.k;
                    let b_off = if d.shared_rhs { 0 } else { bi * d.k * d.m };
                    let g_off = bi * d.n * d.m;
                    let gs = &g[g_off..g_off + d.n * d.m];
                    if need_a {
                        gemm_nt(
                            gs,
                            &vb.data()[b_off..b_off + d.k * d.m],
                            &mut ga[a_off..a_off + d.n * d.k],
                            d.n,
                            d.k,
                            d.m,
                        );
                    }
                    if need_b {
                        gemm_tn(
                            &va.data()[a_off..a_off + d.n * d.k],
                            gs,
                            &mut gb[b_off..b_off + d.k * d.m],
                            d.n,
                            d.k,
                            d.m,
                        );
                    }
                }
                if need_a {
                    res.push((*a, ga));
                }
                if need_b {
                    res.push((*b, gb));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (val(*a).shape()[0], val(*a).shape()[1]);
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                res.push((*a, ga));
            }
            Op::Tanh(a) => res.push((
                *a,
                g.iter()
                    .zip(out.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect(),
            )),
            Op::Exp(a) => res.push((*a, g.iter().zip(out.data()).map(|(g, y)| g * y).collect())),
            Op::Log(a) => res.push((
                *a,
                g.iter().zip(val(*a).data()).map(|(g, x)| g / x).collect(),
            )),
            Op::Sqrt(a) => res.push((
                *a,
                g.iter().zip(out.data()).map(|(g, y)| g * 0.5 / y).collect(),
            )),
            Op::Sum(a, axis) | Op::Mean(a, axis) | Op::Variance(a, axis) => {
                let va = val(*a);
                let (outer, n, inner) = axis_extents(va.shape(), *axis);
                let mut ga = vec![0.0; va.len()];
                let nf = n as f64;
                for o in 0..outer {
                    for i in 0..inner {
                        let gi = g[o * inner + i];
                        let at = |k: usize| o * n * inner + k * inner + i;
                        match node.op {
                            Op::Sum(..) => (0..n).for_each(|k| ga[at(k)] = gi),
                            Op::Mean(..) => (0..n).for_each(|k| ga[at(k)] = gi / nf),
                            _ => {
                                let m = (0..n).map(|k| va.data()[at(k)]).sum::<f64>() / nf;
                                (0..n).for_each(|k| {
                                    ga[at(k)] = gi * 2.0 * (va.data()[at(k)] - m) / nf
                                });
                            }
                        }
                    }
                }
                res.push((*a, ga));
            }
            Op::SumAll(a) => res.push((*a, vec![g[0]; val(*a).len()])),
            Op::MeanAll(a) => {
                let n = val(*a).len();
                res.push((*a, vec![g[0] / n as f64; n]));
            }
            Op::Softmax(a, axis) | Op::LogSoftmax(a, axis) => {
                let is_log = matches!(node.op, Op::LogSoftmax(..));
                let (outer, n, inner) = axis_extents(out.shape(), *axis);
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |k: usize| o * n * inner + k * inner + i;
                        if is_log {
                            let gs: f64 = (0..n).map(|k| g[at(k)]).sum();
                            (0..n).for_each(|k| ga[at(k)] = g[at(k)] - y[at(k)].exp() * gs);
                        } else {
                            let dotp: f64 = (0..n).map(|k| g[at(k)] * y[at(k)]).sum();
                            (0..n).for_each(|k| ga[at(k)] = y[at(k)] * (g[at(k)] - dotp));
                        }
                    }
                }
                res.push((*a, ga));
            }
            Op::L2Normalize(a) => {
                let va = val(*a);
                let w = va.cols();
                let mut ga = vec![0.0; va.len()];
                for r in 0..va.len() / w {
                    let x = &va.data()[r * w..(r + 1) * w];
                    let y = &out.data()[r * w..(r + 1) * w];
                    let gr = &g[r * w..(r + 1) * w];
                    let n = super::array::l2_norm(x);
                    let yg = super::array::dot(y, gr);
                    for j in 0..w {
                        ga[r * w + j] = (gr[j] - y[j] * yg) / n;
                    }
                }
                res.push((*a, ga));
            }
            Op::Concat(parts, axis) => {
                let (outer, total, inner) = axis_extents(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let n = val(p).shape()[*axis];
                    let mut gp = Vec::with_capacity(val(p).len());
                    for o in 0..outer {
                        let start = o * total * inner + offset * inner;
                        gp.extend_from_slice(&g[start..start + n * inner]);
                    }
                    offset += n;
                    res.push((p, gp));
                }
            }
        }
        Ok(res)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arr(shape: &[usize], data: &[f64]) -> DenseArray {
        DenseArray::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[2], &[0.0, 0.0])).unwrap();
        let s = t.softmax(x, 0).unwrap();
        assert_eq!(t.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[2], &[3.0, 4.0])).unwrap();
        let y = t.l2_normalize(x).unwrap();
        let d = t.value(y).data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn population_variance_of_two_points() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[2, 1], &[1.0, 3.0])).unwrap();
        let v = t.variance_axis(x, 0).unwrap();
        assert_eq!(t.value(v).data(), &[1.0]);
    }

    #[test]
    fn square_derivative() {
        let mut t = Tape::new();
        let x = t.leaf(DenseArray::scalar(3.0), true).unwrap();
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
        assert!(t.is_empty());
    }

    #[test]
    fn tanh_derivative_at_zero() {
        let mut t = Tape::new();
        let x = t.leaf(DenseArray::scalar(0.0), true).unwrap();
        let y = t.tanh(x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_detached() {
        let mut t = Tape::new();
        let x = t.leaf(arr(&[2], &[1.0, 2.0]), true).unwrap();
        assert!(matches!(t.backward(x), Err(Error::Grad(_))));
        let c = t.constant(DenseArray::scalar(1.0)).unwrap();
        assert!(matches!(t.backward(c), Err(Error::Grad(_))));
    }

    #[test]
    fn shape_mismatch_and_non_finite_are_errors() {
        let mut t = Tape::new();
        let a = t.constant(arr(&[2, 3], &[1.0; 6])).unwrap();
        let b = t.constant(arr(&[2, 2], &[1.0; 4])).unwrap();
        assert!(matches!(t.add(a, b), Err(Error::Shape { .. })));
        assert!(matches!(t.matmul(a, a), Err(Error::Shape { .. })));
        let z = t.constant(arr(&[1], &[-1.0])).unwrap();
        assert!(matches!(t.log(z), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn broadcast_add_accumulates_bias_gradient() {
        let mut t = Tape::new();
        let x = t.constant(arr(&[3, 2], &[1., 2., 3., 4., 5., 6.])).unwrap();
        let b = t.leaf(arr(&[2], &[0.0, 0.0]), true).unwrap();
        let y = t.add(x, b).unwrap();
        let s = t.sum_all(y).unwrap();
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(b).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn middle_axis_broadcast() {
        let mut t = Tape::new();
        let x = t
            .constant(arr(&[2, 3, 1], &[1., 2., 3., 4., 5., 6.]))
            .unwrap();
        let s = t.constant(arr(&[2, 1, 2], &[10., 20., 30., 40.])).unwrap();
        let y = t.mul(x, s).unwrap();
        assert_eq!(t.value(y).shape(), &[2, 3, 2]);
        assert_eq!(t.value(y).get(&[1, 2, 1]), 6.0 * 40.0);
        assert_eq!(t.value(y).get(&[0, 1, 0]), 2.0 * 10.0);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(DenseArray::scalar(1.0), true).unwrap();
        let unused = t.leaf(arr(&[2], &[1.0, 1.0]), true).unwrap();
        let y = t.scale(x, 2.0).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0, 0.0]);
    }
}
