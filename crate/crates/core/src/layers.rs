//! Layer primitives: depthwise and standard 1-D convolution, instance
//! normalization, GRU, fully connected, dropout, and parameter init.
//!
//! Every layer accepts a single sample or a batch with a leading batch axis:
//! `[v, w]` or `[B, v, w]` for sequence maps, `[d]` or `[B, d]` for vectors.
//! Convolutions are cross-correlations with centered zero ("same") padding.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{gemm, MatRef, Tape, Tensor, Var};

/// Default epsilon for [`instance_norm`].
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Named learnable tensors. Names are unique; iteration order is sorted by
/// name, which fixes checkpoint layout and optimizer traversal.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter name {name:?}")));
        }
        self.tensors.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn element_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Register every tensor on `tape` as a gradient-tracking leaf.
    pub fn attach<'t>(&self, tape: &'t Tape, requires_grad: bool) -> ParamVars<'t> {
        ParamVars {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }
}

/// Parameters of a [`ParamStore`] living on one tape.
pub struct ParamVars<'t> {
    vars: BTreeMap<String, Var<'t>>,
}

impl<'t> ParamVars<'t> {
    /// Bind names to variables already on a tape.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Var<'t>)>) -> Self {
        Self { vars: pairs.into_iter().collect() }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name:?}")))
    }

    /// Gradients after a backward pass, keyed like the store. Parameters the
    /// pass did not reach get zeros.
    pub fn grads(&self) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, v)| (k.clone(), v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape()))))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Uniform(-s, s) with s = sqrt(1 / fan_in).
    FanIn(usize),
    Zeros,
    Constant(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn weight(name: impl Into<String>, shape: &[usize], fan_in: usize) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init: Init::FanIn(fan_in),
        }
    }

    pub fn bias(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            init: Init::Zeros,
        }
    }
}

/// Draw every parameter in `specs` order from `rng`.
pub fn init_params(specs: &[ParamSpec], rng: &mut impl Rng) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for spec in specs {
        crate::tensor::validate_shape(&spec.shape)?;
        let n: usize = spec.shape.iter().product();
        let data = match spec.init {
            Init::Zeros => vec![0.0; n],
            Init::Constant(c) => vec![c; n],
            Init::FanIn(fan_in) => {
                let s = (1.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-s..s)).collect()
            }
        };
        store.insert(spec.name.clone(), Tensor::new(spec.shape.clone(), data)?)?;
    }
    Ok(store)
}

/// View a `[c, w]` or `[B, c, w]` map as (batch, channels, width).
fn sequence_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, w] => Ok((1, c, w)),
        [b, c, w] => Ok((b, c, w)),
        _ => Err(Error::shape(op, format!("expected [c, w] or [B, c, w], got {shape:?}"))),
    }
}

fn check_kernel_width(op: &'static str, n: usize, w: usize) -> Result<()> {
    if n.is_multiple_of(2) {
        return Err(Error::shape(op, format!("kernel size {n} must be odd")));
    }
    if n > w {
        return Err(Error::shape(op, format!("kernel size {n} exceeds sequence length {w}")));
    }
    Ok(())
}

/// Per-channel cross-correlation: channel `m` of the output uses only row `m`
/// of `kernel` (`[v, n]`) and channel `m` of `x`, plus `bias[m]`.
pub fn depthwise_conv1d<'t>(x: Var<'t>, kernel: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    const OP: &str = "depthwise_conv1d";
    let out = {
        let (xv, kv, bv) = (x.value_ref(), kernel.value_ref(), bias.value_ref());
        let (batch, v, w) = sequence_dims(OP, xv.shape())?;
        let &[kv_rows, n] = kv.shape() else {
            return Err(Error::shape(OP, format!("kernel must be [v, n], got {:?}", kv.shape())));
        };
        if kv_rows != v || bv.shape() != [v] {
            return Err(Error::shape(
                OP,
                format!("input {:?}, kernel {:?} and bias {:?} disagree on channels", xv.shape(), kv.shape(), bv.shape()),
            ));
        }
        check_kernel_width(OP, n, w)?;
        let pad = (n - 1) / 2;
        let (xd, kd, bd) = (xv.data(), kv.data(), bv.data());
        let mut y = vec![0.0; batch * v * w];
        for b in 0..batch {
            for c in 0..v {
                let row = &xd[(b * v + c) * w..][..w];
                let k = &kd[c * n..][..n];
                let out = &mut y[(b * v + c) * w..][..w];
                for (t, o) in out.iter_mut().enumerate() {
                    let mut acc = bd[c];
                    for (i, &ki) in k.iter().enumerate() {
                        if let Some(s) = (t + i).checked_sub(pad).filter(|&s| s < w) {
                            acc += ki * row[s];
                        }
                    }
                    *o = acc;
                }
            }
        }
        Tensor::new(xv.shape().to_vec(), y)?
    };
    Ok(x.tape().custom(&[x, kernel, bias], out, |ctx| {
        let (xt, kt) = (ctx.inputs[0], ctx.inputs[1]);
        let (batch, v, w) = sequence_dims(OP, xt.shape()).expect("checked in forward");
        let n = kt.shape()[1];
        let pad = (n - 1) / 2;
        let (xd, kd, g) = (xt.data(), kt.data(), ctx.grad);
        let mut gx = vec![0.0; xd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gb = vec![0.0; v];
        for b in 0..batch {
            for c in 0..v {
                let base = (b * v + c) * w;
                for t in 0..w {
                    let gt = g[base + t];
                    gb[c] += gt;
                    for i in 0..n {
                        if let Some(s) = (t + i).checked_sub(pad).filter(|&s| s < w) {
                            gk[c * n + i] += gt * xd[base + s];
                            gx[base + s] += gt * kd[c * n + i];
                        }
                    }
                }
            }
        }
        vec![Some(gx), Some(gk), Some(gb)]
    }))
}

/// Multi-channel cross-correlation: `x` is `[C, w]` or `[B, C, w]`, `kernel`
/// is `[O, C, n]`, `bias` is `[O]`; output is `[O, w]` or `[B, O, w]`.
pub fn conv1d<'t>(x: Var<'t>, kernel: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    const OP: &str = "conv1d";
    let out = {
        let (xv, kv, bv) = (x.value_ref(), kernel.value_ref(), bias.value_ref());
        let (batch, c_in, w) = sequence_dims(OP, xv.shape())?;
        let &[c_out, kc, n] = kv.shape() else {
            return Err(Error::shape(OP, format!("kernel must be [O, C, n], got {:?}", kv.shape())));
        };
        if kc != c_in || bv.shape() != [c_out] {
            return Err(Error::shape(
                OP,
                format!("input {:?}, kernel {:?} and bias {:?} disagree", xv.shape(), kv.shape(), bv.shape()),
            ));
        }
        check_kernel_width(OP, n, w)?;
        let pad = (n - 1) / 2;
        let (xd, kd, bd) = (xv.data(), kv.data(), bv.data());
        let mut y = vec![0.0; batch * c_out * w];
        for b in 0..batch {
            for o in 0..c_out {
                for t in 0..w {
                    let mut acc = bd[o];
                    for c in 0..c_in {
                        for i in 0..n {
                            if let Some(s) = (t + i).checked_sub(pad).filter(|&s| s < w) {
                                acc += kd[(o * c_in + c) * n + i] * xd[(b * c_in + c) * w + s];
                            }
                        }
                    }
                    y[(b * c_out + o) * w + t] = acc;
                }
            }
        }
        let shape = if xv.rank() == 2 { vec![c_out, w] } else { vec![batch, c_out, w] };
        Tensor::new(shape, y)?
    };
    Ok(x.tape().custom(&[x, kernel, bias], out, |ctx| {
        let (xt, kt) = (ctx.inputs[0], ctx.inputs[1]);
        let (batch, c_in, w) = sequence_dims(OP, xt.shape()).expect("checked in forward");
        let (c_out, n) = (kt.shape()[0], kt.shape()[2]);
        let pad = (n - 1) / 2;
        let (xd, kd, g) = (xt.data(), kt.data(), ctx.grad);
        let mut gx = vec![0.0; xd.len()];
        let mut gk = vec![0.0; kd.len()];
        let mut gb = vec![0.0; c_out];
        for b in 0..batch {
            for o in 0..c_out {
                for t in 0..w {
                    let gt = g[(b * c_out + o) * w + t];
                    gb[o] += gt;
                    for c in 0..c_in {
                        for i in 0..n {
                            if let Some(s) = (t + i).checked_sub(pad).filter(|&s| s < w) {
                                let ki = (o * c_in + c) * n + i;
                                let xi = (b * c_in + c) * w + s;
                                gk[ki] += gt * xd[xi];
                                gx[xi] += gt * kd[ki];
                            }
                        }
                    }
                }
            }
        }
        vec![Some(gx), Some(gk), Some(gb)]
    }))
}

/// Normalize every row (last axis) to zero mean and unit population variance:
/// `(x - mean) / sqrt(var + eps)`. No learnable affine.
pub fn instance_norm(x: Var<'_>, eps: f64) -> Var<'_> {
    let out = {
        let xv = x.value_ref();
        let w = *xv.shape().last().expect("rank >= 1");
        let mut y = xv.data().to_vec();
        for row in y.chunks_exact_mut(w) {
            let mean = row.iter().sum::<f64>() / w as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let inv = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        }
        Tensor::new(xv.shape().to_vec(), y).expect("same shape")
    };
    x.tape().custom(&[x], out, move |ctx| {
        let xt = ctx.inputs[0];
        let w = *xt.shape().last().expect("rank >= 1");
        let mut gx = vec![0.0; xt.len()];
        let rows = xt.data().chunks_exact(w).zip(ctx.output.data().chunks_exact(w));
        for (r, (xr, yr)) in rows.enumerate() {
            let g = &ctx.grad[r * w..][..w];
            let mean = xr.iter().sum::<f64>() / w as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
            let inv = 1.0 / (var + eps).sqrt();
            let g_mean = g.iter().sum::<f64>() / w as f64;
            let gy_mean = g.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
            for t in 0..w {
                gx[r * w + t] = inv * (g[t] - g_mean - yr[t] * gy_mean);
            }
        }
        vec![Some(gx)]
    })
}

/// `weight · x + bias` for `x` of shape `[d]` or `[B, d]`, `weight` `[o, d]`.
pub fn linear<'t>(x: Var<'t>, weight: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
    let (xs, ws, bs) = (x.shape(), weight.shape(), bias.shape());
    let ok = ws.len() == 2 && bs == [ws[0]] && xs.last() == Some(&ws[1]) && xs.len() <= 2;
    if !ok {
        return Err(Error::shape(
            "linear",
            format!("input {xs:?}, weight {ws:?} and bias {bs:?} disagree"),
        ));
    }
    if xs.len() == 1 {
        let col = x.reshape(&[xs[0], 1])?;
        weight.matmul(col)?.reshape(&[ws[0]])?.add(bias)
    } else {
        x.matmul(weight.transpose()?)?.add(bias)
    }
}

/// Gate weights of one GRU layer, all on the same tape.
#[derive(Clone, Copy, Debug)]
pub struct GruParams<'t> {
    pub w_r: Var<'t>,
    pub w_z: Var<'t>,
    pub w_h: Var<'t>,
    pub u_r: Var<'t>,
    pub u_z: Var<'t>,
    pub u_h: Var<'t>,
    pub b_r: Var<'t>,
    pub b_z: Var<'t>,
    pub b_h: Var<'t>,
}

impl<'t> GruParams<'t> {
    /// Parameter names under `prefix` (e.g. `gru.W_r`).
    pub fn names(prefix: &str) -> [String; 9] {
        ["W_r", "W_z", "W_h", "U_r", "U_z", "U_h", "b_r", "b_z", "b_h"].map(|s| format!("{prefix}.{s}"))
    }

    pub fn specs(prefix: &str, input: usize, hidden: usize) -> Vec<ParamSpec> {
        let [w_r, w_z, w_h, u_r, u_z, u_h, b_r, b_z, b_h] = Self::names(prefix);
        vec![
            ParamSpec::weight(w_r, &[hidden, input], input),
            ParamSpec::weight(w_z, &[hidden, input], input),
            ParamSpec::weight(w_h, &[hidden, input], input),
            ParamSpec::weight(u_r, &[hidden, hidden], hidden),
            ParamSpec::weight(u_z, &[hidden, hidden], hidden),
            ParamSpec::weight(u_h, &[hidden, hidden], hidden),
            ParamSpec::bias(b_r, &[hidden]),
            ParamSpec::bias(b_z, &[hidden]),
            ParamSpec::bias(b_h, &[hidden]),
        ]
    }

    pub fn from_vars(vars: &crate::layers::ParamVars<'t>, prefix: &str) -> Result<Self> {
        let [w_r, w_z, w_h, u_r, u_z, u_h, b_r, b_z, b_h] = Self::names(prefix);
        Ok(Self {
            w_r: vars.get(&w_r)?,
            w_z: vars.get(&w_z)?,
            w_h: vars.get(&w_h)?,
            u_r: vars.get(&u_r)?,
            u_z: vars.get(&u_z)?,
            u_h: vars.get(&u_h)?,
            b_r: vars.get(&b_r)?,
            b_z: vars.get(&b_z)?,
            b_h: vars.get(&b_h)?,
        })
    }

    fn as_array(&self) -> [Var<'t>; 9] {
        [self.w_r, self.w_z, self.w_h, self.u_r, self.u_z, self.u_h, self.b_r, self.b_z, self.b_h]
    }

    /// (input size, hidden size), after checking all nine shapes agree.
    fn dims(&self) -> Result<(usize, usize)> {
        let ws = self.w_r.shape();
        if ws.len() != 2 {
            return Err(Error::shape("gru", format!("W_r must be [H, d], got {ws:?}")));
        }
        let (h, d) = (ws[0], ws[1]);
        let expect = [[h, d], [h, d], [h, d], [h, h], [h, h], [h, h]];
        for (v, want) in self.as_array()[..6].iter().zip(expect) {
            if v.shape() != want {
                return Err(Error::shape("gru", format!("weight shape {:?}, expected {want:?}", v.shape())));
            }
        }
        for b in &self.as_array()[6..] {
            if b.shape() != [h] {
                return Err(Error::shape("gru", format!("bias shape {:?}, expected [{h}]", b.shape())));
            }
        }
        Ok((d, h))
    }
}

/// One GRU update, written out gate by gate with tape primitives:
///
/// ```text
/// r  = σ(W_r b + U_r h + b_r)
/// h~ = tanh(W_h b + U_h (r ⊙ h) + b_h)
/// z  = σ(W_z b + U_z h + b_z)
/// h' = (1 - z) ⊙ h + z ⊙ h~
/// ```
///
/// `input` is `[d]` or `[B, d]`; `h_prev` is `[H]` or `[B, H]` to match.
pub fn gru_step<'t>(input: Var<'t>, h_prev: Var<'t>, params: &GruParams<'t>) -> Result<Var<'t>> {
    let (d, h) = params.dims()?;
    let (xs, hs) = (input.shape(), h_prev.shape());
    let batch = match (xs.as_slice(), hs.as_slice()) {
        ([xd], [hd]) if *xd == d && *hd == h => None,
        ([b, xd], [hb, hd]) if *xd == d && *hd == h && b == hb => Some(*b),
        _ => {
            return Err(Error::shape(
                "gru_step",
                format!("input {xs:?} / state {hs:?} do not match d={d}, H={h}"),
            ))
        }
    };
    let rows = batch.unwrap_or(1);
    let x = input.reshape(&[rows, d])?;
    let hp = h_prev.reshape(&[rows, h])?;
    let proj = |v: Var<'t>, w: Var<'t>| v.matmul(w.transpose()?);

    let r = proj(x, params.w_r)?.add(proj(hp, params.u_r)?)?.add(params.b_r)?.sigmoid();
    let cand = proj(x, params.w_h)?
        .add(proj(r.mul(hp)?, params.u_h)?)?
        .add(params.b_h)?
        .tanh();
    let z = proj(x, params.w_z)?.add(proj(hp, params.u_z)?)?.add(params.b_z)?.sigmoid();
    let keep = z.affine(-1.0, 1.0).mul(hp)?;
    let next = keep.add(z.mul(cand)?)?;
    match batch {
        None => next.reshape(&[h]),
        Some(_) => Ok(next),
    }
}

/// Run the GRU over every time column of `input` (`[d, w]` or `[B, d, w]`),
/// returning the hidden trajectory `[H, w]` or `[B, H, w]`. `h0` defaults to
/// zeros. This is a single tape node with hand-written backpropagation through
/// time; it agrees with chaining [`gru_step`].
pub fn gru_sequence<'t>(input: Var<'t>, h0: Option<Var<'t>>, params: &GruParams<'t>) -> Result<Var<'t>> {
    const OP: &str = "gru_sequence";
    let (d, h) = params.dims()?;
    let in_shape = input.shape();
    let (batch, d_in, w) = sequence_dims(OP, &in_shape)?;
    if d_in != d {
        return Err(Error::shape(OP, format!("input {in_shape:?} has {d_in} features, GRU expects {d}")));
    }
    let tape = input.tape();
    let h0 = match h0 {
        Some(v) => {
            let s = v.shape();
            if s.iter().product::<usize>() != batch * h {
                return Err(Error::shape(OP, format!("initial state {s:?} does not match [{batch}, {h}]")));
            }
            v
        }
        None => tape.constant(Tensor::zeros(&[batch, h])),
    };

    let mut saved = GruTrace::default();
    let out = {
        let xv = input.value_ref();
        let pv: Vec<_> = params.as_array().iter().map(|p| p.value()).collect();
        let [w_r, w_z, w_h, u_r, u_z, u_h, b_r, b_z, b_h] = [0, 1, 2, 3, 4, 5, 6, 7, 8].map(|i| pv[i].data());
        let x = xv.data();
        let bh = batch * h;
        let mut out = vec![0.0; batch * h * w];
        let mut h_prev = h0.value().data().to_vec();
        saved.states.push(h_prev.clone());
        let (mut ar, mut az, mut ah, mut rh) = (vec![0.0; bh], vec![0.0; bh], vec![0.0; bh], vec![0.0; bh]);
        for t in 0..w {
            let xt = MatRef { data: &x[t..], rows: batch, cols: d, rs: d * w, cs: w };
            let hm = MatRef::row_major(&h_prev, batch, h);
            for (acc, wm, um, bias) in [(&mut ar, w_r, u_r, b_r), (&mut az, w_z, u_z, b_z)] {
                fill_rows(acc, bias);
                gemm(1.0, xt, MatRef::transposed(wm, h, d), 1.0, acc, h, 1);
                gemm(1.0, hm, MatRef::transposed(um, h, h), 1.0, acc, h, 1);
            }
            let r: Vec<f64> = ar.iter().map(|&a| sigmoid(a)).collect();
            let z: Vec<f64> = az.iter().map(|&a| sigmoid(a)).collect();
            rh.iter_mut().zip(r.iter().zip(&h_prev)).for_each(|(o, (a, b))| *o = a * b);
            fill_rows(&mut ah, b_h);
            gemm(1.0, xt, MatRef::transposed(w_h, h, d), 1.0, &mut ah, h, 1);
            gemm(1.0, MatRef::row_major(&rh, batch, h), MatRef::transposed(u_h, h, h), 1.0, &mut ah, h, 1);
            let n: Vec<f64> = ah.iter().map(|a| a.tanh()).collect();
            let next: Vec<f64> = (0..bh).map(|k| (1.0 - z[k]) * h_prev[k] + z[k] * n[k]).collect();
            for b in 0..batch {
                for i in 0..h {
                    out[(b * h + i) * w + t] = next[b * h + i];
                }
            }
            saved.reset.push(r);
            saved.update.push(z);
            saved.candidate.push(n);
            saved.states.push(next.clone());
            h_prev = next;
        }
        let shape = if in_shape.len() == 2 { vec![h, w] } else { vec![batch, h, w] };
        Tensor::new(shape, out)?
    };

    let mut inputs = vec![input, h0];
    inputs.extend(params.as_array());
    Ok(tape.custom(&inputs, out, move |ctx| saved.backward(ctx, batch, d, h, w)))
}

/// Gate activations recorded during the forward sweep.
#[derive(Default)]
struct GruTrace {
    /// h_0 .. h_w, each `[B, H]`.
    states: Vec<Vec<f64>>,
    reset: Vec<Vec<f64>>,
    update: Vec<Vec<f64>>,
    candidate: Vec<Vec<f64>>,
}

impl GruTrace {
    fn backward(&self, ctx: &crate::tensor::BackwardCtx<'_>, batch: usize, d: usize, h: usize, w: usize) -> Vec<Option<Vec<f64>>> {
        let x = ctx.inputs[0].data();
        let [w_r, w_z, w_h, u_r, u_z, u_h] = [2, 3, 4, 5, 6, 7].map(|i| ctx.inputs[i].data());
        let bh = batch * h;
        let mut gx = vec![0.0; x.len()];
        let mut gw = [vec![0.0; h * d], vec![0.0; h * d], vec![0.0; h * d]];
        let mut gu = [vec![0.0; h * h], vec![0.0; h * h], vec![0.0; h * h]];
        let mut gb = [vec![0.0; h], vec![0.0; h], vec![0.0; h]];
        let mut carry = vec![0.0; bh];
        let (mut dar, mut daz, mut dah, mut drh, mut rh) =
            (vec![0.0; bh], vec![0.0; bh], vec![0.0; bh], vec![0.0; bh], vec![0.0; bh]);
        for t in (0..w).rev() {
            let (r, z, n, hp) = (&self.reset[t], &self.update[t], &self.candidate[t], &self.states[t]);
            let mut dh_prev = vec![0.0; bh];
            for b in 0..batch {
                for i in 0..h {
                    let k = b * h + i;
                    let dh = ctx.grad[(b * h + i) * w + t] + carry[k];
                    let dn = dh * z[k];
                    let dz = dh * (n[k] - hp[k]);
                    dh_prev[k] = dh * (1.0 - z[k]);
                    dah[k] = dn * (1.0 - n[k] * n[k]);
                    daz[k] = dz * z[k] * (1.0 - z[k]);
                    rh[k] = r[k] * hp[k];
                }
            }
            // d(r ⊙ h) = dah · U_h
            gemm(1.0, MatRef::row_major(&dah, batch, h), MatRef::row_major(u_h, h, h), 0.0, &mut drh, h, 1);
            for k in 0..bh {
                dh_prev[k] += drh[k] * r[k];
                dar[k] = drh[k] * hp[k] * r[k] * (1.0 - r[k]);
            }
            let hp_m = MatRef::row_major(hp, batch, h);
            gemm(1.0, MatRef::row_major(&dar, batch, h), MatRef::row_major(u_r, h, h), 1.0, &mut dh_prev, h, 1);
            gemm(1.0, MatRef::row_major(&daz, batch, h), MatRef::row_major(u_z, h, h), 1.0, &mut dh_prev, h, 1);

            let xt = MatRef { data: &x[t..], rows: batch, cols: d, rs: d * w, cs: w };
            let grads = [(&dar, w_r, hp_m), (&daz, w_z, hp_m), (&dah, w_h, MatRef::row_major(&rh, batch, h))];
            for (gate, (da, wm, state)) in grads.into_iter().enumerate() {
                let da_t = MatRef::transposed(da, batch, h);
                gemm(1.0, da_t, xt, 1.0, &mut gw[gate], d, 1);
                gemm(1.0, da_t, state, 1.0, &mut gu[gate], h, 1);
                for row in da.chunks_exact(h) {
                    gb[gate].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                gemm(1.0, MatRef::row_major(da, batch, h), MatRef::row_major(wm, h, d), 1.0, &mut gx[t..], d * w, w);
            }
            carry = dh_prev;
        }
        let [gw_r, gw_z, gw_h] = gw;
        let [gu_r, gu_z, gu_h] = gu;
        let [gb_r, gb_z, gb_h] = gb;
        let all = [gx, carry, gw_r, gw_z, gw_h, gu_r, gu_z, gu_h, gb_r, gb_z, gb_h];
        all.into_iter().enumerate().map(|(i, g)| ctx.needs_grad(i).then_some(g)).collect()
    }
}

fn fill_rows(buf: &mut [f64], row: &[f64]) {
    for chunk in buf.chunks_exact_mut(row.len()) {
        chunk.copy_from_slice(row);
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverted dropout: in training each element is zeroed with probability
/// `rate` and survivors are scaled by `1 / (1 - rate)`. Evaluation mode, and
/// `rate == 0`, return `x` itself.
pub fn dropout<'t>(x: Var<'t>, rate: f64, training: bool, rng: &mut impl Rng) -> Result<Var<'t>> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} must lie in [0, 1)")));
    }
    if !training || rate == 0.0 {
        return Ok(x);
    }
    let shape = x.shape();
    let n = shape.iter().product();
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..n)
        .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
        .collect();
    x.mul(x.tape().constant(Tensor::new(shape, mask)?))
}
