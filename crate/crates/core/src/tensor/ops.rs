//! Elementwise, linear-algebra, reduction and loss primitives with their
//! backward rules.
//!
//! Binary elementwise ops broadcast like NumPy: shapes are right-aligned and a
//! dimension of extent 1 (or a missing leading dimension) stretches to match.

use super::graph::{GradSink, Op};
use super::{Graph, Tensor, Var};
use crate::precision::round_slice;
use crate::{Error, Result};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = Vec::with_capacity(r);
    for i in 0..r {
        let da = (i + a.len()).checked_sub(r).map_or(1, |j| a[j]);
        let db = (i + b.len()).checked_sub(r).map_or(1, |j| b[j]);
        out.push(match (da, db) {
            _ if da == db => da,
            (1, d) | (d, 1) => d,
            _ => return None,
        });
    }
    Some(out)
}

/// Strides of `shape` laid out against `out`, zero along broadcast dimensions.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let r = out.len();
    let mut strides = vec![0; r];
    let mut acc = 1;
    for (k, &d) in shape.iter().enumerate().rev() {
        let pos = r - shape.len() + k;
        strides[pos] = if d == 1 && out[pos] != 1 { 0 } else { acc };
        acc *= d;
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of the broadcast result.
fn for_each_pair(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    let la: usize = sa.iter().product();
    let lb: usize = sb.iter().product();
    if sa == sb {
        (0..n).for_each(|o| f(o, o, o));
        return;
    }
    if sb.len() <= sa.len() && sa.ends_with(sb) {
        (0..n).for_each(|o| f(o, o, o % lb));
        return;
    }
    if sa.len() <= sb.len() && sb.ends_with(sa) {
        (0..n).for_each(|o| f(o, o % la, o));
        return;
    }
    let st_a = broadcast_strides(sa, out);
    let st_b = broadcast_strides(sb, out);
    let r = out.len();
    let mut idx = vec![0usize; r];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..r).rev() {
            idx[d] += 1;
            ia += st_a[d];
            ib += st_b[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= st_a[d] * out[d];
            ib -= st_b[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::invalid(format!(
            "{op}: axis {axis} out of range for shape {shape:?}"
        )));
    }
    Ok(())
}

// C = A B for row-major A [n,k], B [k,m].
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

// G Bᵀ for G [n,m], B [k,m] -> [n,k].
fn gemm_nt(g: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut bt = vec![0.0; m * k];
    for p in 0..k {
        for j in 0..m {
            bt[j * k + p] = b[p * m + j];
        }
    }
    gemm_nn(g, &bt, n, m, k)
}

// Aᵀ G for A [n,k], G [n,m] -> [k,m].
fn gemm_tn(a: &[f64], g: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * m];
    for i in 0..n {
        let grow = &g[i * m..(i + 1) * m];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * m..(p + 1) * m];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    out
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

impl Graph {
    fn emit(&mut self, shape: Vec<usize>, mut data: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        round_slice(&mut data);
        let rg = self.any_grad(parents);
        self.push(Tensor::new(shape, data).expect("op output shape"), op, rg)
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| Error::ShapeMismatch {
            op: name,
            lhs: sa.clone(),
            rhs: sb.clone(),
        })?;
        let n = out.iter().product();
        let mut data = vec![0.0; n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for_each_pair(&out, &sa, &sb, |o, ia, ib| data[o] = f(av[ia], bv[ib]));
        }
        Ok(self.emit(out, data, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * s).collect();
        let shape = t.shape().to_vec();
        self.emit(shape, data, Op::Scale(x, s), &[x])
    }

    /// Matrix product of `[n,k]` and `[k,m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let data = gemm_nn(self.value(a).data(), self.value(b).data(), n, k, m);
        Ok(self.emit(vec![n, m], data, Op::Matmul(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: t.shape().to_vec(),
                rhs: shape,
            });
        }
        let data = t.data().to_vec();
        Ok(self.emit(shape, data, Op::Reshape(x), &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let w = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * w..(o + 1) * w]);
            }
        }
        Ok(self.emit(
            shape,
            data,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis("narrow", &s, axis)?;
        if start + len > s[axis] {
            return Err(Error::invalid(format!(
                "narrow: range {start}..{} exceeds extent {} of axis {axis}",
                start + len,
                s[axis]
            )));
        }
        let (outer, full, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.emit(shape, data, Op::Narrow { x, axis, start }, &[x]))
    }

    /// Selects rows (first-axis slices) by index; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rows = t.rows();
        if let Some(bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::invalid(format!(
                "gather_rows: index {bad} out of range for {rows} rows"
            )));
        }
        let w = t.row_len();
        let mut data = Vec::with_capacity(index.len() * w);
        for &i in index {
            data.extend_from_slice(&t.data()[i * w..(i + 1) * w]);
        }
        let mut shape = t.shape().to_vec();
        if shape.is_empty() {
            return Err(Error::invalid("gather_rows on a scalar"));
        }
        shape[0] = index.len();
        Ok(self.emit(
            shape,
            data,
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.emit(vec![], vec![s], Op::SumAll(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    fn reduce_axis(
        &mut self,
        x: Var,
        axis: usize,
        f: impl Fn(&[f64]) -> f64,
    ) -> Result<(Vec<usize>, Vec<f64>)> {
        let s = self.shape(x).to_vec();
        check_axis("reduce", &s, axis)?;
        let (outer, len, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * inner);
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for (l, b) in buf.iter_mut().enumerate() {
                    *b = src[(o * len + l) * inner + i];
                }
                data.push(f(&buf));
            }
        }
        let mut shape = s;
        shape.remove(axis);
        Ok((shape, data))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, data) = self.reduce_axis(x, axis, |v| v.iter().sum())?;
        Ok(self.emit(shape, data, Op::SumAxis { x, axis }, &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, data) =
            self.reduce_axis(x, axis, |v| v.iter().sum::<f64>() / v.len() as f64)?;
        Ok(self.emit(shape, data, Op::MeanAxis { x, axis }, &[x]))
    }

    /// Population variance along `axis`.
    pub fn var_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (shape, data) = self.reduce_axis(x, axis, |v| {
            let n = v.len() as f64;
            let mu = v.iter().sum::<f64>() / n;
            v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n
        })?;
        Ok(self.emit(shape, data, Op::VarAxis { x, axis }, &[x]))
    }

    /// Maximum along `axis`; the gradient flows to the lowest-index maximum.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis("max_axis", &s, axis)?;
        let (outer, len, inner) = split_axis(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * len) * inner + i;
                for l in 1..len {
                    let idx = (o * len + l) * inner + i;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                data.push(src[best]);
                argmax.push(best);
            }
        }
        let mut shape = s;
        shape.remove(axis);
        Ok(self.emit(shape, data, Op::MaxAxis { x, argmax }, &[x]))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let t = self.value(x);
        let data = t
            .data()
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        let shape = t.shape().to_vec();
        self.emit(shape, data, Op::LeakyRelu { x, slope }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.tanh()).collect();
        let shape = t.shape().to_vec();
        self.emit(shape, data, Op::Tanh(x), &[x])
    }

    /// Euclidean norm of each row of a `[rows, width]` tensor, shape `[rows, 1]`.
    /// The gradient at a zero row is taken as zero.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::invalid(format!(
                "row_norm expects rank 2, got {:?}",
                t.shape()
            )));
        }
        let data = (0..t.rows())
            .map(|r| t.row(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        let rows = t.rows();
        Ok(self.emit(vec![rows, 1], data, Op::RowNorm(x), &[x]))
    }

    /// `Σ_ij plan_ij ‖x_i − y_j‖` with the plan held constant.
    pub fn transport_cost(&mut self, x: Var, y: Var, plan: &[f64]) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        if tx.rank() != 2 || ty.rank() != 2 || tx.shape()[1] != ty.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "transport_cost",
                lhs: tx.shape().to_vec(),
                rhs: ty.shape().to_vec(),
            });
        }
        let (m, n) = (tx.rows(), ty.rows());
        if plan.len() != m * n {
            return Err(Error::invalid(format!(
                "transport plan has {} entries, expected {m}x{n}",
                plan.len()
            )));
        }
        let mut total = 0.0;
        for i in 0..m {
            for j in 0..n {
                let p = plan[i * n + j];
                if p != 0.0 {
                    total += p * dist(tx.row(i), ty.row(j));
                }
            }
        }
        Ok(self.emit(
            vec![],
            vec![total],
            Op::TransportCost {
                x,
                y,
                plan: plan.to_vec(),
            },
            &[x, y],
        ))
    }

    /// Chamfer pseudo-distance between the row sets of `x` and `y`.
    pub fn chamfer(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        if tx.rank() != 2 || ty.rank() != 2 || tx.shape()[1] != ty.shape()[1] {
            return Err(Error::ShapeMismatch {
                op: "chamfer",
                lhs: tx.shape().to_vec(),
                rhs: ty.shape().to_vec(),
            });
        }
        if tx.rows() == 0 || ty.rows() == 0 {
            return Err(Error::invalid("chamfer of an empty point set"));
        }
        let nearest = |from: &Tensor, to: &Tensor| -> (Vec<usize>, f64) {
            let mut idx = Vec::with_capacity(from.rows());
            let mut total = 0.0;
            for i in 0..from.rows() {
                let (mut best, mut bd) = (0, f64::INFINITY);
                for j in 0..to.rows() {
                    let d = dist(from.row(i), to.row(j));
                    if d < bd {
                        bd = d;
                        best = j;
                    }
                }
                idx.push(best);
                total += bd;
            }
            (idx, total)
        };
        let (nn_xy, a) = nearest(tx, ty);
        let (nn_yx, b) = nearest(ty, tx);
        Ok(self.emit(
            vec![],
            vec![a + b],
            Op::Chamfer { x, y, nn_xy, nn_yx },
            &[x, y],
        ))
    }
}

pub(crate) fn add_backward(s: &mut GradSink, out: &Tensor, g: &[f64], a: Var, b: Var, sign_b: f64) {
    let (sa, sb) = (s.value(a).shape().to_vec(), s.value(b).shape().to_vec());
    let (wa, wb) = (s.wants(a), s.wants(b));
    let mut ga = vec![0.0; if wa { s.value(a).len() } else { 0 }];
    let mut gb = vec![0.0; if wb { s.value(b).len() } else { 0 }];
    for_each_pair(out.shape(), &sa, &sb, |o, ia, ib| {
        if wa {
            ga[ia] += g[o];
        }
        if wb {
            gb[ib] += sign_b * g[o];
        }
    });
    s.add(a, ga.into_iter());
    s.add(b, gb.into_iter());
}

pub(crate) fn mul_backward(s: &mut GradSink, out: &Tensor, g: &[f64], a: Var, b: Var) {
    let (ta, tb) = (s.value(a), s.value(b));
    let (wa, wb) = (s.wants(a), s.wants(b));
    let mut ga = vec![0.0; if wa { ta.len() } else { 0 }];
    let mut gb = vec![0.0; if wb { tb.len() } else { 0 }];
    let (av, bv) = (ta.data(), tb.data());
    for_each_pair(out.shape(), ta.shape(), tb.shape(), |o, ia, ib| {
        if wa {
            ga[ia] += g[o] * bv[ib];
        }
        if wb {
            gb[ib] += g[o] * av[ia];
        }
    });
    s.add(a, ga.into_iter());
    s.add(b, gb.into_iter());
}

pub(crate) fn div_backward(s: &mut GradSink, out: &Tensor, g: &[f64], a: Var, b: Var) {
    let (ta, tb) = (s.value(a), s.value(b));
    let (wa, wb) = (s.wants(a), s.wants(b));
    let mut ga = vec![0.0; if wa { ta.len() } else { 0 }];
    let mut gb = vec![0.0; if wb { tb.len() } else { 0 }];
    let (av, bv) = (ta.data(), tb.data());
    for_each_pair(out.shape(), ta.shape(), tb.shape(), |o, ia, ib| {
        if wa {
            ga[ia] += g[o] / bv[ib];
        }
        if wb {
            gb[ib] -= g[o] * av[ia] / (bv[ib] * bv[ib]);
        }
    });
    s.add(a, ga.into_iter());
    s.add(b, gb.into_iter());
}

pub(crate) fn matmul_backward(s: &mut GradSink, g: &[f64], a: Var, b: Var) {
    let (ta, tb) = (s.value(a), s.value(b));
    let (n, k, m) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
    if s.wants(a) {
        let ga = gemm_nt(g, tb.data(), n, k, m);
        s.add(a, ga.into_iter());
    }
    if s.wants(b) {
        let gb = gemm_tn(s.value(a).data(), g, n, k, m);
        s.add(b, gb.into_iter());
    }
}

pub(crate) fn concat_backward(
    s: &mut GradSink,
    out: &Tensor,
    g: &[f64],
    inputs: &[Var],
    axis: usize,
) {
    let (outer, total, inner) = split_axis(out.shape(), axis);
    let mut offset = 0;
    for &v in inputs {
        let len = s.value(v).shape()[axis];
        if s.wants(v) {
            let slot = s.slot(v);
            for o in 0..outer {
                let src = &g[(o * total + offset) * inner..(o * total + offset + len) * inner];
                let dst = &mut slot[o * len * inner..(o + 1) * len * inner];
                for (d, x) in dst.iter_mut().zip(src) {
                    *d += x;
                }
            }
        }
        offset += len;
    }
}

pub(crate) fn narrow_backward(
    s: &mut GradSink,
    out: &Tensor,
    g: &[f64],
    x: Var,
    axis: usize,
    start: usize,
) {
    if !s.wants(x) {
        return;
    }
    let full = s.value(x).shape()[axis];
    let (outer, len, inner) = split_axis(out.shape(), axis);
    let slot = s.slot(x);
    for o in 0..outer {
        let base = o * full * inner + start * inner;
        for (d, v) in slot[base..base + len * inner]
            .iter_mut()
            .zip(&g[o * len * inner..(o + 1) * len * inner])
        {
            *d += v;
        }
    }
}

pub(crate) fn gather_backward(s: &mut GradSink, g: &[f64], x: Var, index: &[usize]) {
    if !s.wants(x) {
        return;
    }
    let w = s.value(x).row_len();
    let slot = s.slot(x);
    for (r, &i) in index.iter().enumerate() {
        for (d, v) in slot[i * w..(i + 1) * w]
            .iter_mut()
            .zip(&g[r * w..(r + 1) * w])
        {
            *d += v;
        }
    }
}

pub(crate) fn sum_axis_backward(s: &mut GradSink, g: &[f64], x: Var, axis: usize, factor: f64) {
    if !s.wants(x) {
        return;
    }
    let (outer, len, inner) = split_axis(s.value(x).shape(), axis);
    let slot = s.slot(x);
    for o in 0..outer {
        for l in 0..len {
            for i in 0..inner {
                slot[(o * len + l) * inner + i] += factor * g[o * inner + i];
            }
        }
    }
}

pub(crate) fn var_axis_backward(s: &mut GradSink, g: &[f64], x: Var, axis: usize) {
    if !s.wants(x) {
        return;
    }
    let t = s.value(x);
    let (outer, len, inner) = split_axis(t.shape(), axis);
    let src = t.data().to_vec();
    let slot = s.slot(x);
    let n = len as f64;
    for o in 0..outer {
        for i in 0..inner {
            let at = |l: usize| (o * len + l) * inner + i;
            let mu = (0..len).map(|l| src[at(l)]).sum::<f64>() / n;
            for l in 0..len {
                slot[at(l)] += g[o * inner + i] * 2.0 * (src[at(l)] - mu) / n;
            }
        }
    }
}

pub(crate) fn max_axis_backward(s: &mut GradSink, g: &[f64], x: Var, argmax: &[usize]) {
    if !s.wants(x) {
        return;
    }
    let slot = s.slot(x);
    for (o, &i) in argmax.iter().enumerate() {
        slot[i] += g[o];
    }
}

pub(crate) fn leaky_relu_backward(s: &mut GradSink, g: &[f64], x: Var, slope: f64) {
    let xs = s.value(x).data().to_vec();
    s.add(
        x,
        g.iter()
            .zip(xs)
            .map(|(g, v)| if v >= 0.0 { *g } else { slope * g }),
    );
}

pub(crate) fn row_norm_backward(s: &mut GradSink, out: &Tensor, g: &[f64], x: Var) {
    if !s.wants(x) {
        return;
    }
    let t = s.value(x);
    let w = t.row_len();
    let src = t.data().to_vec();
    let norms = out.data();
    let slot = s.slot(x);
    for (r, &nrm) in norms.iter().enumerate() {
        if nrm == 0.0 {
            continue;
        }
        for c in 0..w {
            slot[r * w + c] += g[r] * src[r * w + c] / nrm;
        }
    }
}

pub(crate) fn transport_cost_backward(s: &mut GradSink, g: f64, x: Var, y: Var, plan: &[f64]) {
    let (tx, ty) = (s.value(x), s.value(y));
    let (m, n, w) = (tx.rows(), ty.rows(), tx.row_len());
    let (wx, wy) = (s.wants(x), s.wants(y));
    let mut gx = vec![0.0; if wx { m * w } else { 0 }];
    let mut gy = vec![0.0; if wy { n * w } else { 0 }];
    for i in 0..m {
        for j in 0..n {
            let p = plan[i * n + j];
            if p == 0.0 {
                continue;
            }
            let (xi, yj) = (tx.row(i), ty.row(j));
            let d = dist(xi, yj);
            if d == 0.0 {
                continue;
            }
            let c = g * p / d;
            for k in 0..w {
                let diff = c * (xi[k] - yj[k]);
                if wx {
                    gx[i * w + k] += diff;
                }
                if wy {
                    gy[j * w + k] -= diff;
                }
            }
        }
    }
    s.add(x, gx.into_iter());
    s.add(y, gy.into_iter());
}

pub(crate) fn chamfer_backward(
    s: &mut GradSink,
    g: f64,
    x: Var,
    y: Var,
    nn_xy: &[usize],
    nn_yx: &[usize],
) {
    let (tx, ty) = (s.value(x), s.value(y));
    let w = tx.row_len();
    let (wx, wy) = (s.wants(x), s.wants(y));
    let mut gx = vec![0.0; if wx { tx.len() } else { 0 }];
    let mut gy = vec![0.0; if wy { ty.len() } else { 0 }];
    let mut pair = |i: usize, j: usize| {
        let (xi, yj) = (tx.row(i), ty.row(j));
        let d = dist(xi, yj);
        if d == 0.0 {
            return;
        }
        for k in 0..w {
            let diff = g * (xi[k] - yj[k]) / d;
            if wx {
                gx[i * w + k] += diff;
            }
            if wy {
                gy[j * w + k] -= diff;
            }
        }
    };
    for (i, &j) in nn_xy.iter().enumerate() {
        pair(i, j);
    }
    for (j, &i) in nn_yx.iter().enumerate() {
        pair(i, j);
    }
    s.add(x, gx.into_iter());
    s.add(y, gy.into_iter());
}
