//! Differentiable primitives on [`Var`].

use super::{axis_split, gemm, MatRef, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
}

impl Binary {
    fn name(self) -> &'static str {
        match self {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
        }
    }

    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            Binary::Add => a + b,
            Binary::Sub => a - b,
            Binary::Mul => a * b,
        }
    }
}

/// How the two operands of a binary op line up.
#[derive(Clone, Copy)]
enum Layout {
    Same,
    /// Right operand is rank-1 and repeats along the trailing axis.
    RhsRow,
    LhsRow,
}

fn binary_layout(op: Binary, a: &[usize], b: &[usize]) -> Result<Layout> {
    if a == b {
        Ok(Layout::Same)
    } else if b.len() == 1 && a.last() == Some(&b[0]) {
        Ok(Layout::RhsRow)
    } else if a.len() == 1 && b.last() == Some(&a[0]) {
        Ok(Layout::LhsRow)
    } else {
        Err(Error::shape(
            op.name(),
            format!("shapes {a:?} and {b:?} are not broadcast-compatible"),
        ))
    }
}

/// Sum a full-size gradient down to a rank-1 operand of length `d`.
fn reduce_rows(g: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for row in g.chunks_exact(d) {
        out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
    }
    out
}

fn binary<'t>(op: Binary, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    let (out, layout) = {
        let (av, bv) = (a.value_ref(), b.value_ref());
        let layout = binary_layout(op, av.shape(), bv.shape())?;
        let data: Vec<f64> = match layout {
            Layout::Same => av.data().iter().zip(bv.data()).map(|(&x, &y)| op.apply(x, y)).collect(),
            Layout::RhsRow => {
                let d = bv.len();
                av.data().iter().enumerate().map(|(i, &x)| op.apply(x, bv.data()[i % d])).collect()
            }
            Layout::LhsRow => {
                let d = av.len();
                bv.data().iter().enumerate().map(|(i, &y)| op.apply(av.data()[i % d], y)).collect()
            }
        };
        let shape = match layout {
            Layout::LhsRow => bv.shape().to_vec(),
            _ => av.shape().to_vec(),
        };
        (Tensor::new(shape, data)?, layout)
    };
    Ok(a.tape().custom(&[a, b], out, move |ctx| {
        let (x, y, g) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
        let n = g.len();
        let xi = |i: usize| x[i % x.len()];
        let yi = |i: usize| y[i % y.len()];
        let (ga, gb): (Vec<f64>, Vec<f64>) = match op {
            Binary::Add => (g.to_vec(), g.to_vec()),
            Binary::Sub => (g.to_vec(), g.iter().map(|v| -v).collect()),
            Binary::Mul => ((0..n).map(|i| g[i] * yi(i)).collect(), (0..n).map(|i| g[i] * xi(i)).collect()),
        };
        let (ga, gb) = match layout {
            Layout::Same => (ga, gb),
            Layout::RhsRow => (ga, reduce_rows(&gb, y.len())),
            Layout::LhsRow => (reduce_rows(&ga, x.len()), gb),
        };
        vec![ctx.needs_grad(0).then_some(ga), ctx.needs_grad(1).then_some(gb)]
    }))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Elementwise map with a derivative expressed through (input, output).
fn unary<'t>(a: Var<'t>, f: fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var<'t> {
    let out = {
        let av = a.value_ref();
        Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    };
    a.tape().custom(&[a], out, move |ctx| {
        let (x, y) = (ctx.inputs[0].data(), ctx.output.data());
        vec![Some(ctx.grad.iter().enumerate().map(|(i, g)| g * df(x[i], y[i])).collect())]
    })
}

impl<'t> Var<'t> {
    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        binary(Binary::Add, self, other)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        binary(Binary::Sub, self, other)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        binary(Binary::Mul, self, other)
    }

    pub fn relu(self) -> Var<'t> {
        unary(self, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn sigmoid(self) -> Var<'t> {
        unary(self, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(self) -> Var<'t> {
        unary(self, f64::tanh, |_, y| 1.0 - y * y)
    }

    /// `scale * x + shift`, elementwise.
    pub fn affine(self, scale: f64, shift: f64) -> Var<'t> {
        let out = {
            let av = self.value_ref();
            Tensor::new(av.shape().to_vec(), av.data().iter().map(|&x| scale * x + shift).collect())
                .expect("same shape")
        };
        self.tape()
            .custom(&[self], out, move |ctx| vec![Some(ctx.grad.iter().map(|g| g * scale).collect())])
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let out = {
            let (av, bv) = (self.value_ref(), other.value_ref());
            let (sa, sb) = (av.shape(), bv.shape());
            if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
                return Err(Error::shape("matmul", format!("cannot multiply {sa:?} by {sb:?}")));
            }
            let (m, n) = (sa[0], sb[1]);
            let mut c = vec![0.0; m * n];
            gemm(1.0, MatRef::row_major(av.data(), m, sa[1]), MatRef::row_major(bv.data(), sb[0], n), 0.0, &mut c, n, 1);
            Tensor::new(vec![m, n], c)?
        };
        Ok(self.tape().custom(&[self, other], out, |ctx| {
            let (a, b) = (ctx.inputs[0], ctx.inputs[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let g = MatRef::row_major(ctx.grad, m, n);
            let ga = ctx.needs_grad(0).then(|| {
                let mut ga = vec![0.0; m * k];
                gemm(1.0, g, MatRef::transposed(b.data(), k, n), 0.0, &mut ga, k, 1);
                ga
            });
            let gb = ctx.needs_grad(1).then(|| {
                let mut gb = vec![0.0; k * n];
                gemm(1.0, MatRef::transposed(a.data(), m, k), g, 0.0, &mut gb, n, 1);
                gb
            });
            vec![ga, gb]
        }))
    }

    /// Transpose of a rank-2 tensor.
    pub fn transpose(self) -> Result<Var<'t>> {
        let out = {
            let av = self.value_ref();
            if av.rank() != 2 {
                return Err(Error::shape("transpose", format!("expected rank 2, got {:?}", av.shape())));
            }
            let (r, c) = (av.shape()[0], av.shape()[1]);
            Tensor::new(vec![c, r], transpose_data(av.data(), r, c))?
        };
        Ok(self.tape().custom(&[self], out, |ctx| {
            let s = ctx.inputs[0].shape();
            vec![Some(transpose_data(ctx.grad, s[1], s[0]))]
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let out = self.value_ref().clone().reshape(shape)?;
        Ok(self.tape().custom(&[self], out, |ctx| vec![Some(ctx.grad.to_vec())]))
    }

    pub fn sum(self, axis: usize) -> Result<Var<'t>> {
        reduce(self, Reduce::Sum, axis)
    }

    pub fn mean(self, axis: usize) -> Result<Var<'t>> {
        reduce(self, Reduce::Mean, axis)
    }

    /// Population standard deviation (divisor N) along `axis`. The gradient
    /// at zero spread is taken as zero.
    pub fn std(self, axis: usize) -> Result<Var<'t>> {
        reduce(self, Reduce::Std, axis)
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum_all(self) -> Var<'t> {
        let out = Tensor::scalar(self.value_ref().data().iter().sum());
        self.tape().custom(&[self], out, |ctx| vec![Some(vec![ctx.grad[0]; ctx.inputs[0].len()])])
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let out = {
            let av = self.value_ref();
            check_axis("softmax", av.shape(), axis)?;
            if av.data().iter().any(|x| x.is_nan()) {
                return Err(Error::Numeric("softmax input contains NaN".into()));
            }
            let (outer, n, inner) = axis_split(av.shape(), axis);
            let x = av.data();
            let mut y = vec![0.0; x.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let max = (0..n).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for j in 0..n {
                        let e = (x[idx(j)] - max).exp();
                        y[idx(j)] = e;
                        total += e;
                    }
                    for j in 0..n {
                        y[idx(j)] /= total;
                    }
                }
            }
            Tensor::new(av.shape().to_vec(), y)?
        };
        Ok(self.tape().custom(&[self], out, move |ctx| {
            let y = ctx.output.data();
            let g = ctx.grad;
            let (outer, n, inner) = axis_split(ctx.output.shape(), axis);
            let mut gx = vec![0.0; y.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let idx = |j: usize| (o * n + j) * inner + i;
                    let dot: f64 = (0..n).map(|j| g[idx(j)] * y[idx(j)]).sum();
                    for j in 0..n {
                        gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                    }
                }
            }
            vec![Some(gx)]
        }))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let out = {
            let av = self.value_ref();
            check_axis("narrow", av.shape(), axis)?;
            let (outer, n, inner) = axis_split(av.shape(), axis);
            if len == 0 || start + len > n {
                return Err(Error::shape(
                    "narrow",
                    format!("range {start}..{} outside axis {axis} of {:?}", start + len, av.shape()),
                ));
            }
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * n + start) * inner;
                data.extend_from_slice(&av.data()[base..base + len * inner]);
            }
            let mut shape = av.shape().to_vec();
            shape[axis] = len;
            Tensor::new(shape, data)?
        };
        Ok(self.tape().custom(&[self], out, move |ctx| {
            let (outer, n, inner) = axis_split(ctx.inputs[0].shape(), axis);
            let mut gx = vec![0.0; ctx.inputs[0].len()];
            for o in 0..outer {
                let base = (o * n + start) * inner;
                let src = &ctx.grad[o * len * inner..(o + 1) * len * inner];
                gx[base..base + len * inner].copy_from_slice(src);
            }
            vec![Some(gx)]
        }))
    }
}

pub(crate) fn transpose_data(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    Ok(())
}

#[derive(Clone, Copy)]
enum Reduce {
    Sum,
    Mean,
    Std,
}

fn reduce(a: Var<'_>, op: Reduce, axis: usize) -> Result<Var<'_>> {
    let name = match op {
        Reduce::Sum => "sum",
        Reduce::Mean => "mean",
        Reduce::Std => "std",
    };
    let out = {
        let av = a.value_ref();
        check_axis(name, av.shape(), axis)?;
        let (outer, n, inner) = axis_split(av.shape(), axis);
        let x = av.data();
        let mut y = vec![0.0; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let col = (0..n).map(|j| x[(o * n + j) * inner + i]);
                let sum: f64 = col.clone().sum();
                y[o * inner + i] = match op {
                    Reduce::Sum => sum,
                    Reduce::Mean => sum / n as f64,
                    Reduce::Std => {
                        let m = sum / n as f64;
                        (col.map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64).sqrt()
                    }
                };
            }
        }
        let mut shape: Vec<usize> = av.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        Tensor::new(shape, y)?
    };
    Ok(a.tape().custom(&[a], out, move |ctx| {
        let xt = ctx.inputs[0];
        let (outer, n, inner) = axis_split(xt.shape(), axis);
        let (x, y, g) = (xt.data(), ctx.output.data(), ctx.grad);
        let mut gx = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let k = o * inner + i;
                let idx = |j: usize| (o * n + j) * inner + i;
                match op {
                    Reduce::Sum => (0..n).for_each(|j| gx[idx(j)] = g[k]),
                    Reduce::Mean => (0..n).for_each(|j| gx[idx(j)] = g[k] / n as f64),
                    Reduce::Std => {
                        if y[k] > 0.0 {
                            let m = (0..n).map(|j| x[idx(j)]).sum::<f64>() / n as f64;
                            let scale = g[k] / (n as f64 * y[k]);
                            (0..n).for_each(|j| gx[idx(j)] = scale * (x[idx(j)] - m));
                        }
                    }
                }
            }
        }
        vec![Some(gx)]
    }))
}

/// Join tensors along `axis`; all other dimensions must agree.
pub fn concat<'t>(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::shape("concat", "no tensors given"))?;
    let tape: &'t Tape = first.tape();
    let shapes: Vec<Vec<usize>> = parts.iter().map(Var::shape).collect();
    check_axis("concat", &shapes[0], axis)?;
    for s in &shapes[1..] {
        let compatible = s.len() == shapes[0].len()
            && s.iter().zip(&shapes[0]).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::shape(
                "concat",
                format!("shape {s:?} incompatible with {:?} along axis {axis}", shapes[0]),
            ));
        }
    }
    let lens: Vec<usize> = shapes.iter().map(|s| s[axis]).collect();
    let total: usize = lens.iter().sum();
    let (outer, _, inner) = axis_split(&shapes[0], axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for (p, &len) in parts.iter().zip(&lens) {
            let v = p.value_ref();
            data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
        }
    }
    let mut shape = shapes[0].clone();
    shape[axis] = total;
    let out = Tensor::new(shape, data)?;
    Ok(tape.custom(parts, out, move |ctx| {
        let mut grads: Vec<Vec<f64>> = lens.iter().map(|l| Vec::with_capacity(outer * l * inner)).collect();
        let mut offset = 0;
        for _ in 0..outer {
            for (g, &len) in grads.iter_mut().zip(&lens) {
                g.extend_from_slice(&ctx.grad[offset..offset + len * inner]);
                offset += len * inner;
            }
        }
        grads.into_iter().map(Some).collect()
    }))
}
