//! Taped reverse-mode differentiation over small dense tensors.
//!
//! A [`Graph`] records every operation of one forward pass. Calling
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of
//! a scalar node with respect to every trainable parameter that was read,
//! plus every input registered with [`Graph::input_with_grad`].

use crate::error::{shape_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const SELU_LAMBDA: f64 = 1.050_700_987_355_480_5;
pub const SELU_ALPHA: f64 = 1.673_263_242_354_377_2;

/// Handle to a node on the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// The nine tensors of a GRU cell, read from the tape as [`Var`]s.
#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub w_z: Var,
    pub u_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub u_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub u_h: Var,
    pub b_h: Var,
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScaled(Var, Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Selu(Var),
    Relu(Var),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    TileCols(Var),
    Sum(Var),
    MaskedSse { pred: Var, target: Tensor, mask: Tensor, scale: f64 },
    GruStep(Box<GruCache>),
}

#[derive(Debug)]
struct GruCache {
    x: Var,
    h: Var,
    p: GruVars,
    mask: Option<Vec<f64>>,
    z: Vec<f64>,
    r: Vec<f64>,
    cand: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    params: Vec<Option<Tensor>>,
    inputs: Vec<(Var, Tensor)>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Self {
            params: vec![None; store.len()],
            inputs: Vec::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(id.index()).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to an input created by [`Graph::input_with_grad`].
    pub fn input(&self, v: Var) -> Option<&Tensor> {
        self.inputs.iter().find(|(w, _)| *w == v).map(|(_, t)| t)
    }

    /// Adds `other` into `self` (parameter gradients only).
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (acc, g) in self.params.iter_mut().zip(&other.params) {
            match (acc.as_mut(), g) {
                (Some(a), Some(g)) => a.add_assign(g),
                (None, Some(g)) => *acc = Some(g.clone()),
                _ => {}
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.params.iter_mut().flatten() {
            g.scale_in_place(c);
        }
    }

    /// Euclidean norm over all parameter gradients.
    pub fn norm(&self) -> f64 {
        self.params
            .iter()
            .flatten()
            .flat_map(|t| t.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().flatten().all(|t| t.is_finite())
    }
}

/// One forward pass worth of recorded operations.
pub struct Graph<'a> {
    store: &'a ParamStore,
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn selu(x: f64) -> f64 {
    if x > 0.0 {
        SELU_LAMBDA * x
    } else {
        SELU_LAMBDA * SELU_ALPHA * x.exp_m1()
    }
}

// out[o] += sum_i w[o, i] * x[i]
#[inline]
fn matvec_acc(out: &mut [f64], w: &[f64], x: &[f64]) {
    let n_in = x.len();
    for (o, acc) in out.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        let mut s = 0.0;
        for i in 0..n_in {
            s += row[i] * x[i];
        }
        *acc += s;
    }
}

// dx[i] += sum_o w[o, i] * dy[o]
#[inline]
fn matvec_t_acc(dx: &mut [f64], w: &[f64], dy: &[f64]) {
    let n_in = dx.len();
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &w[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            dx[i] += row[i] * g;
        }
    }
}

// dw[o, i] += dy[o] * x[i]
#[inline]
fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let n_in = x.len();
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &mut dw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            row[i] += g * x[i];
        }
    }
}

impl<'a> Graph<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn d(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant: never differentiated.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    /// An input whose gradient is reported by [`Gradients::input`].
    pub fn input_with_grad(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Reads a parameter. Repeated reads return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.index()] {
            return v;
        }
        let value = self.store.value(id).clone();
        let rg = self.store.is_trainable(id);
        let v = self.push(value, Op::Param(id), rg);
        self.param_vars[id.index()] = Some(v);
        v
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self.store.id(name)?;
        Ok(self.param(id))
    }

    /// `y = x Wᵀ + b` for `x: [B, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        if !xv.is_matrix() || !wv.is_matrix() || xv.cols() != wv.shape()[1] {
            return shape_err(
                "linear",
                format!("x {:?} incompatible with W {:?}", xv.shape(), wv.shape()),
            );
        }
        let (batch, n_in, n_out) = (xv.rows(), xv.cols(), wv.shape()[0]);
        let mut out = vec![0.0; batch * n_out];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != n_out {
                return shape_err("linear", format!("bias {:?} for {} outputs", bv.shape(), n_out));
            }
            for r in 0..batch {
                out[r * n_out..(r + 1) * n_out].copy_from_slice(bv.data());
            }
        }
        for r in 0..batch {
            matvec_acc(
                &mut out[r * n_out..(r + 1) * n_out],
                wv.data(),
                &xv.data()[r * n_in..(r + 1) * n_in],
            );
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(Tensor::matrix(batch, n_out, out)?, Op::Linear { x, w, b }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return shape_err(
                op,
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            );
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        self.push(t, op, rg)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| c * x, Op::Scale(a, c))
    }

    /// `a + c·b`.
    pub fn add_scaled(&mut self, a: Var, b: Var, c: f64) -> Result<Var> {
        self.same_shape("add_scaled", a, b)?;
        Ok(self.zip_map(a, b, |x, y| x + c * y, Op::AddScaled(a, b, c)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, softplus, Op::Softplus(a))
    }

    pub fn selu(&mut self, a: Var) -> Var {
        self.map(a, selu, Op::Selu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    /// Joins `[B, n_i]` blocks along the feature axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::EmptySequence("concat_cols"));
        };
        let batch = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let v = self.value(p);
            if !v.is_matrix() || v.rows() != batch {
                return shape_err("concat_cols", format!("block {:?} with batch {}", v.shape(), batch));
            }
            widths.push(v.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(batch * total);
        for r in 0..batch {
            for &p in parts {
                out.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(batch, total, out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Columns `start..start + len` of a `[B, n]` tensor.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if !v.is_matrix() || start + len > v.cols() {
            return shape_err("slice_cols", format!("{}..{} of {:?}", start, start + len, v.shape()));
        }
        let batch = v.rows();
        let mut out = Vec::with_capacity(batch * len);
        for r in 0..batch {
            out.extend_from_slice(&v.row_slice(r)[start..start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(batch, len, out)?, Op::SliceCols { x, start }, rg))
    }

    /// Replicates a `[B, 1]` column `n` times into `[B, n]`.
    pub fn tile_cols(&mut self, x: Var, n: usize) -> Result<Var> {
        let v = self.value(x);
        if !v.is_matrix() || v.cols() != 1 {
            return shape_err("tile_cols", format!("expected [B, 1], got {:?}", v.shape()));
        }
        let out: Vec<f64> = v.data().iter().flat_map(|&a| std::iter::repeat(a).take(n)).collect();
        let batch = v.rows();
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(batch, n, out)?, Op::TileCols(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `Σ mask·(pred − target)² / Σ mask`.
    pub fn masked_mse(&mut self, pred: Var, target: &Tensor, mask: &Tensor) -> Result<Var> {
        let denom: f64 = mask.data().iter().sum();
        if denom <= 0.0 {
            return Err(Error::NoObservedEntries);
        }
        self.masked_sse_scaled(pred, target, mask, 1.0 / denom)
    }

    /// `scale · Σ mask·(pred − target)²`. Used when the normalizing count spans
    /// several graphs.
    pub fn masked_sse_scaled(&mut self, pred: Var, target: &Tensor, mask: &Tensor, scale: f64) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.shape() != mask.shape() {
            return shape_err(
                "masked_mse",
                format!("pred {:?}, target {:?}, mask {:?}", p.shape(), target.shape(), mask.shape()),
            );
        }
        let mut s = 0.0;
        for ((&pv, &tv), &m) in p.data().iter().zip(target.data()).zip(mask.data()) {
            if m != 0.0 {
                let d = pv - tv;
                s += m * d * d;
            }
        }
        let loss = scale * s;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {loss}")));
        }
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedSse {
                pred,
                target: target.clone(),
                mask: mask.clone(),
                scale,
            },
            rg,
        ))
    }

    /// One GRU update for a batch:
    ///
    /// ```text
    /// z  = σ(W_z x + U_z h + b_z)
    /// r  = σ(W_r x + U_r h + b_r)
    /// h̃  = tanh(W_h x + U_h (r ⊙ h) + b_h)
    /// h' = (1 − z) ⊙ h + z ⊙ h̃
    /// ```
    ///
    /// Rows whose `mask` entry is zero copy `h` through unchanged.
    pub fn gru_step(&mut self, x: Var, h: Var, p: &GruVars, mask: Option<&[f64]>) -> Result<Var> {
        let (xv, hv) = (self.value(x), self.value(h));
        let hidden = hv.cols();
        let n_in = xv.cols();
        let batch = xv.rows();
        if !xv.is_matrix() || !hv.is_matrix() || hv.rows() != batch {
            return shape_err("gru_step", format!("x {:?}, h {:?}", xv.shape(), hv.shape()));
        }
        for (w, u, b) in [(p.w_z, p.u_z, p.b_z), (p.w_r, p.u_r, p.b_r), (p.w_h, p.u_h, p.b_h)] {
            let (w, u, b) = (self.value(w), self.value(u), self.value(b));
            if w.shape() != [hidden, n_in] || u.shape() != [hidden, hidden] || b.len() != hidden {
                return shape_err(
                    "gru_step",
                    format!(
                        "weights {:?}/{:?}/{:?} for input {} hidden {}",
                        w.shape(),
                        u.shape(),
                        b.shape(),
                        n_in,
                        hidden
                    ),
                );
            }
        }
        if let Some(m) = mask {
            if m.len() != batch {
                return shape_err("gru_step", format!("mask of {} for batch {}", m.len(), batch));
            }
        }
        let mut z = vec![0.0; batch * hidden];
        let mut r = vec![0.0; batch * hidden];
        let mut cand = vec![0.0; batch * hidden];
        let mut out = vec![0.0; batch * hidden];
        let mut rh = vec![0.0; hidden];
        for b in 0..batch {
            let xr = &self.d(x)[b * n_in..(b + 1) * n_in];
            let hr = &self.d(h)[b * hidden..(b + 1) * hidden];
            let sl = b * hidden..(b + 1) * hidden;
            if mask.is_some_and(|m| m[b] == 0.0) {
                out[sl].copy_from_slice(hr);
                continue;
            }
            let zb = &mut z[sl.clone()];
            zb.copy_from_slice(self.d(p.b_z));
            matvec_acc(zb, self.d(p.w_z), xr);
            matvec_acc(zb, self.d(p.u_z), hr);
            zb.iter_mut().for_each(|a| *a = sigmoid(*a));
            let rb = &mut r[sl.clone()];
            rb.copy_from_slice(self.d(p.b_r));
            matvec_acc(rb, self.d(p.w_r), xr);
            matvec_acc(rb, self.d(p.u_r), hr);
            rb.iter_mut().for_each(|a| *a = sigmoid(*a));
            for k in 0..hidden {
                rh[k] = rb[k] * hr[k];
            }
            let cb = &mut cand[sl.clone()];
            cb.copy_from_slice(self.d(p.b_h));
            matvec_acc(cb, self.d(p.w_h), xr);
            matvec_acc(cb, self.d(p.u_h), &rh);
            cb.iter_mut().for_each(|a| *a = a.tanh());
            let zb = &z[sl.clone()];
            for k in 0..hidden {
                out[b * hidden + k] = (1.0 - zb[k]) * hr[k] + zb[k] * cb[k];
            }
        }
        let vars = [p.w_z, p.u_z, p.b_z, p.w_r, p.u_r, p.b_r, p.w_h, p.u_h, p.b_h];
        let rg = self.rg(x) || self.rg(h) || vars.iter().any(|&w| self.rg(w));
        let cache = GruCache {
            x,
            h,
            p: *p,
            mask: mask.map(|m| m.to_vec()),
            z,
            r,
            cand,
        };
        Ok(self.push(
            Tensor::matrix(batch, hidden, out)?,
            Op::GruStep(Box::new(cache)),
            rg,
        ))
    }

    /// Reverse pass from the scalar node `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return shape_err("backward", format!("loss must be scalar, got {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);
        let mut out = Gradients::zeros_like(self.store);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Input => out.inputs.push((Var(idx), g)),
                Op::Param(id) => out.params[id.index()] = Some(g),
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let (batch, n_in, n_out) = (xv.rows(), xv.cols(), wv.shape()[0]);
                    if self.rg(*x) {
                        let mut dx = vec![0.0; batch * n_in];
                        for r in 0..batch {
                            matvec_t_acc(
                                &mut dx[r * n_in..(r + 1) * n_in],
                                wv.data(),
                                &g.data()[r * n_out..(r + 1) * n_out],
                            );
                        }
                        self.acc(&mut grads, *x, Tensor::matrix(batch, n_in, dx)?);
                    }
                    if self.rg(*w) {
                        let mut dw = vec![0.0; n_out * n_in];
                        for r in 0..batch {
                            outer_acc(&mut dw, &g.data()[r * n_out..(r + 1) * n_out], xv.row_slice(r));
                        }
                        self.acc(&mut grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                    }
                    if let Some(b) = b.filter(|b| self.rg(*b)) {
                        let mut db = vec![0.0; n_out];
                        for r in 0..batch {
                            for (d, &gv) in db.iter_mut().zip(&g.data()[r * n_out..(r + 1) * n_out]) {
                                *d += gv;
                            }
                        }
                        let shape = self.value(b).shape().to_vec();
                        self.acc(&mut grads, b, Tensor::new(shape, db)?);
                    }
                }
                Op::Add(a, b) => {
                    self.acc_if(&mut grads, *a, || g.clone());
                    self.acc_if(&mut grads, *b, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.acc_if(&mut grads, *a, || g.clone());
                    self.acc_if(&mut grads, *b, || map_t(&g, |v| -v));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    self.acc_if(&mut grads, *a, || zip_t(&g, bv, |gv, y| gv * y));
                    self.acc_if(&mut grads, *b, || zip_t(&g, av, |gv, x| gv * x));
                }
                Op::Scale(a, c) => self.acc_if(&mut grads, *a, || map_t(&g, |v| c * v)),
                Op::AddScaled(a, b, c) => {
                    self.acc_if(&mut grads, *a, || g.clone());
                    self.acc_if(&mut grads, *b, || map_t(&g, |v| c * v));
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    self.acc_if(&mut grads, *a, || zip_t(&g, y, |gv, s| gv * s * (1.0 - s)));
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    self.acc_if(&mut grads, *a, || zip_t(&g, y, |gv, t| gv * (1.0 - t * t)));
                }
                Op::Softplus(a) => {
                    let x = self.value(*a);
                    self.acc_if(&mut grads, *a, || zip_t(&g, x, |gv, xv| gv * sigmoid(xv)));
                }
                Op::Selu(a) => {
                    let x = self.value(*a);
                    self.acc_if(&mut grads, *a, || {
                        zip_t(&g, x, |gv, xv| {
                            if xv > 0.0 {
                                gv * SELU_LAMBDA
                            } else {
                                gv * SELU_LAMBDA * SELU_ALPHA * xv.exp()
                            }
                        })
                    });
                }
                Op::Relu(a) => {
                    let x = self.value(*a);
                    self.acc_if(&mut grads, *a, || zip_t(&g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }));
                }
                Op::ConcatCols(parts) => {
                    let batch = node.value.rows();
                    let total = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.rg(p) {
                            let mut d = Vec::with_capacity(batch * w);
                            for r in 0..batch {
                                d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                            }
                            self.acc(&mut grads, p, Tensor::matrix(batch, w, d)?);
                        }
                        offset += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    if self.rg(*x) {
                        let xv = self.value(*x);
                        let (batch, n) = (xv.rows(), xv.cols());
                        let len = node.value.cols();
                        let mut d = vec![0.0; batch * n];
                        for r in 0..batch {
                            d[r * n + start..r * n + start + len]
                                .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                        }
                        self.acc(&mut grads, *x, Tensor::matrix(batch, n, d)?);
                    }
                }
                Op::TileCols(x) => {
                    let n = node.value.cols();
                    self.acc_if(&mut grads, *x, || {
                        let d = g.data().chunks(n).map(|c| c.iter().sum()).collect();
                        Tensor::new(self.value(*x).shape().to_vec(), d).expect("tile shape")
                    });
                }
                Op::Sum(x) => {
                    let gv = g.data()[0];
                    self.acc_if(&mut grads, *x, || Tensor::full(self.value(*x).shape(), gv));
                }
                Op::MaskedSse {
                    pred,
                    target,
                    mask,
                    scale,
                } => {
                    let gv = g.data()[0] * scale;
                    let p = self.value(*pred);
                    self.acc_if(&mut grads, *pred, || {
                        let d = p
                            .data()
                            .iter()
                            .zip(target.data())
                            .zip(mask.data())
                            .map(|((&pv, &tv), &m)| if m != 0.0 { 2.0 * gv * m * (pv - tv) } else { 0.0 })
                            .collect();
                        Tensor::new(p.shape().to_vec(), d).expect("pred shape")
                    });
                }
                Op::GruStep(cache) => self.gru_backward(cache, &g, &mut grads)?,
            }
        }
        Ok(out)
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&t),
            slot => *slot = Some(t),
        }
    }

    fn acc_if(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce() -> Tensor) {
        if self.rg(v) {
            let t = f();
            self.acc(grads, v, t);
        }
    }

    fn gru_backward(&self, c: &GruCache, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let xv = self.value(c.x);
        let hv = self.value(c.h);
        let (batch, n_in, hidden) = (xv.rows(), xv.cols(), hv.cols());
        let p = &c.p;
        let w = |var: Var| self.value(var).data();
        let want = |var: Var| self.rg(var);

        let mut dx = vec![0.0; batch * n_in];
        let mut dh = vec![0.0; batch * hidden];
        let mut dw_z = vec![0.0; hidden * n_in];
        let mut dw_r = vec![0.0; hidden * n_in];
        let mut dw_h = vec![0.0; hidden * n_in];
        let mut du_z = vec![0.0; hidden * hidden];
        let mut du_r = vec![0.0; hidden * hidden];
        let mut du_h = vec![0.0; hidden * hidden];
        let mut db_z = vec![0.0; hidden];
        let mut db_r = vec![0.0; hidden];
        let mut db_h = vec![0.0; hidden];

        let mut da_z = vec![0.0; hidden];
        let mut da_r = vec![0.0; hidden];
        let mut da_h = vec![0.0; hidden];
        let mut d_rh = vec![0.0; hidden];
        let mut rh = vec![0.0; hidden];
        for b in 0..batch {
            let sl = b * hidden..(b + 1) * hidden;
            let gb = &g.data()[sl.clone()];
            if c.mask.as_ref().is_some_and(|m| m[b] == 0.0) {
                dh[sl].copy_from_slice(gb);
                continue;
            }
            let xr = &xv.data()[b * n_in..(b + 1) * n_in];
            let hr = &hv.data()[sl.clone()];
            let (z, r, cand) = (&c.z[sl.clone()], &c.r[sl.clone()], &c.cand[sl.clone()]);
            for k in 0..hidden {
                let gk = gb[k];
                dh[b * hidden + k] += gk * (1.0 - z[k]);
                da_z[k] = gk * (cand[k] - hr[k]) * z[k] * (1.0 - z[k]);
                da_h[k] = gk * z[k] * (1.0 - cand[k] * cand[k]);
                rh[k] = r[k] * hr[k];
            }
            // candidate path
            d_rh.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_acc(&mut d_rh, w(p.u_h), &da_h);
            for k in 0..hidden {
                dh[b * hidden + k] += d_rh[k] * r[k];
                da_r[k] = d_rh[k] * hr[k] * r[k] * (1.0 - r[k]);
            }
            let dxb = &mut dx[b * n_in..(b + 1) * n_in];
            matvec_t_acc(dxb, w(p.w_z), &da_z);
            matvec_t_acc(dxb, w(p.w_r), &da_r);
            matvec_t_acc(dxb, w(p.w_h), &da_h);
            let dhb = &mut dh[sl];
            matvec_t_acc(dhb, w(p.u_z), &da_z);
            matvec_t_acc(dhb, w(p.u_r), &da_r);
            outer_acc(&mut dw_z, &da_z, xr);
            outer_acc(&mut dw_r, &da_r, xr);
            outer_acc(&mut dw_h, &da_h, xr);
            outer_acc(&mut du_z, &da_z, hr);
            outer_acc(&mut du_r, &da_r, hr);
            outer_acc(&mut du_h, &da_h, &rh);
            for k in 0..hidden {
                db_z[k] += da_z[k];
                db_r[k] += da_r[k];
                db_h[k] += da_h[k];
            }
        }
        if want(c.x) {
            self.acc(grads, c.x, Tensor::matrix(batch, n_in, dx)?);
        }
        if want(c.h) {
            self.acc(grads, c.h, Tensor::matrix(batch, hidden, dh)?);
        }
        for (var, d) in [
            (p.w_z, dw_z),
            (p.u_z, du_z),
            (p.b_z, db_z),
            (p.w_r, dw_r),
            (p.u_r, du_r),
            (p.b_r, db_r),
            (p.w_h, dw_h),
            (p.u_h, du_h),
            (p.b_h, db_h),
        ] {
            if want(var) {
                let shape = self.value(var).shape().to_vec();
                self.acc(grads, var, Tensor::new(shape, d)?);
            }
        }
        Ok(())
    }
}

fn map_t(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
}

fn zip_t(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
    .expect("same shape")
}
