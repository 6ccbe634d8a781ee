//! A matrix-valued reverse-mode tape.
//!
//! Every node stores its forward value, computed by the same routines the
//! untaped encoders use, so a taped forward pass reproduces the plain one
//! bit for bit. [`Tape::backward`] walks the nodes in reverse and
//! accumulates gradients for every node that feeds the loss.

use crate::baselines::{pool_rows, softmax_rows, Activation};
use crate::error::{shape_err, Result};
use crate::scalar::Scalar;
use crate::sse::{attention_weights, order_free_sum, pool_contributions, slot_normalize, AggMode};
use crate::tensor::{add_row_broadcast_in_place, layer_norm, matmul, matmul_nt, matmul_tn, row_moments, sigmoid_scalar, LayerNormParams, Matrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    DivScalar(Var, T),
    Attention(Var),
    SlotNormalize(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, eps: T },
    Reparam { mu: Var, log_sigma: Var, noise: Matrix<T> },
    PoolContrib { w: Var, v: Var, arg: Option<Vec<usize>> },
    PoolRows { x: Var, arg: Option<Vec<usize>> },
    Extremum { a: Var, b: Var, take_b: Vec<bool> },
    Activate { x: Var, act: Activation },
    SoftmaxRows(Var),
    Reshape(Var),
    SqDist { x: Var, target: Matrix<T> },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Matrix<T>,
    op: Op<T>,
}

#[derive(Clone, Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Matrix<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of `var`, or `None` if the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Matrix<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `var` with zeros where the loss does not depend on it.
    pub fn get_or_zeros(&self, var: Var, shape: (usize, usize)) -> Matrix<T> {
        self.get(var).cloned().unwrap_or_else(|| Matrix::zeros(shape.0, shape.1))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Matrix<T>>, g: Matrix<T>) {
    match slot {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += *b;
            }
        }
        None => *slot = Some(g),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A parameter or constant input.
    pub fn leaf(&mut self, value: Matrix<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matmul_nt(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::MatMulNt(a, b)))
    }

    /// Adds a `1 x c` row to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.rows() != 1 || bv.cols() != xv.cols() {
            return shape_err("add_bias", format!("{:?} + {:?}", xv.shape(), bv.shape()));
        }
        let mut value = xv.clone();
        add_row_broadcast_in_place(&mut value, bv);
        Ok(self.push(value, Op::AddBias(x, bias)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).scale(c);
        self.push(value, Op::Scale(x, c))
    }

    pub fn div_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v / c);
        self.push(value, Op::DivScalar(x, c))
    }

    /// Stabilized sigmoid attention, `sigmoid(m) + 1e-8`.
    pub fn attention(&mut self, m: Var) -> Var {
        let value = attention_weights(self.value(m));
        self.push(value, Op::Attention(m))
    }

    pub fn slot_normalize(&mut self, attn: Var) -> Result<Var> {
        let value = slot_normalize(self.value(attn))?;
        Ok(self.push(value, Op::SlotNormalize(attn)))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let params = LayerNormParams::new(self.value(gain).clone(), self.value(bias).clone(), eps)?;
        let value = layer_norm(&params, self.value(x))?;
        Ok(self.push(value, Op::LayerNorm { x, gain, bias, eps }))
    }

    /// `mu + exp(log_sigma) ⊙ noise`, broadcasting the `1 x h` rows over the
    /// rows of `noise`.
    pub fn reparam(&mut self, mu: Var, log_sigma: Var, noise: Matrix<T>) -> Result<Var> {
        let (m, ls) = (self.value(mu), self.value(log_sigma));
        if m.rows() != 1 || ls.shape() != m.shape() || noise.cols() != m.cols() {
            return shape_err("reparam", format!("mu {:?}, log_sigma {:?}, noise {:?}", m.shape(), ls.shape(), noise.shape()));
        }
        let sigma: Vec<T> = ls.data().iter().map(|v| v.exp()).collect();
        let mut value = Matrix::zeros(noise.rows(), noise.cols());
        for r in 0..noise.rows() {
            for c in 0..noise.cols() {
                value.set(r, c, m.get(0, c) + sigma[c] * noise.get(r, c));
            }
        }
        Ok(self.push(value, Op::Reparam { mu, log_sigma, noise }))
    }

    /// Pools `C_i[k, m] = W[i, k] V[i, m]` over elements. `Mean` pools as a sum.
    pub fn pool_contributions(&mut self, w: Var, v: Var, mode: AggMode) -> Result<Var> {
        let (value, arg) = pool_contributions(self.value(w), self.value(v), mode)?;
        Ok(self.push(value, Op::PoolContrib { w, v, arg }))
    }

    /// Pools the rows of `x` into one row. `Mean` pools as a sum.
    pub fn pool_rows(&mut self, x: Var, mode: AggMode) -> Var {
        let (value, arg) = pool_rows(self.value(x), mode);
        self.push(value, Op::PoolRows { x, arg })
    }

    /// Merges two partial aggregates the way [`crate::sse::AggregateState`] does.
    pub fn merge(&mut self, a: Var, b: Var, mode: AggMode) -> Result<Var> {
        match mode {
            AggMode::Sum | AggMode::Mean => self.add(a, b),
            AggMode::Max | AggMode::Min => {
                let (av, bv) = (self.value(a), self.value(b));
                if av.shape() != bv.shape() {
                    return shape_err("merge", format!("{:?} vs {:?}", av.shape(), bv.shape()));
                }
                let mut value = av.clone();
                let mut take_b = vec![false; av.len()];
                for (i, (o, &y)) in value.data_mut().iter_mut().zip(bv.data()).enumerate() {
                    let merged = mode.combine(*o, y);
                    take_b[i] = merged != *o;
                    *o = merged;
                }
                Ok(self.push(value, Op::Extremum { a, b, take_b }))
            }
        }
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        let value = self.value(x).map(|v| act.apply(v));
        self.push(value, Op::Activate { x, act })
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        self.push(value, Op::SoftmaxRows(x))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let value = self.value(x).reshape(rows, cols)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// `Σ (x - target)²` as a `1 x 1` value.
    pub fn squared_distance(&mut self, x: Var, target: Matrix<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != target.shape() {
            return shape_err("squared_distance", format!("{:?} vs {:?}", xv.shape(), target.shape()));
        }
        let value = Matrix::from_vec(1, 1, vec![squared_distance(xv, &target)])?;
        Ok(self.push(value, Op::SqDist { x, target }))
    }

    /// Which branch every piecewise op took: argmax/argmin picks, merge
    /// choices and ReLU activity. Two forward passes with equal signatures
    /// lie on the same smooth piece of the loss.
    pub fn selection_signature(&self) -> Vec<usize> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::PoolContrib { arg: Some(a), .. } | Op::PoolRows { arg: Some(a), .. } => sig.extend_from_slice(a),
                Op::Extremum { take_b, .. } => sig.extend(take_b.iter().map(|&b| b as usize)),
                Op::Activate { x, act: Activation::Relu } => {
                    sig.extend(self.nodes[x.0].value.data().iter().map(|&v| (v > T::zero()) as usize))
                }
                _ => {}
            }
        }
        sig
    }

    /// Reverse sweep from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).shape() != (1, 1) {
            return shape_err("backward", format!("loss must be 1x1, got {:?}", self.value(loss).shape()));
        }
        let mut grads: Vec<Option<Matrix<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => unreachable!("leaves are skipped"),
                Op::MatMul(a, b) => {
                    accumulate(&mut grads[a.0], matmul_nt(&g, val(*b))?);
                    accumulate(&mut grads[b.0], matmul_tn(val(*a), &g)?);
                }
                Op::MatMulNt(a, b) => {
                    accumulate(&mut grads[a.0], matmul(&g, val(*b))?);
                    accumulate(&mut grads[b.0], matmul_tn(&g, val(*a))?);
                }
                Op::AddBias(x, b) => {
                    accumulate(&mut grads[b.0], g.column_sums());
                    accumulate(&mut grads[x.0], g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads[a.0], g.clone());
                    accumulate(&mut grads[b.0], g);
                }
                Op::Scale(x, c) => accumulate(&mut grads[x.0], g.scale(*c)),
                Op::DivScalar(x, c) => accumulate(&mut grads[x.0], g.map(|v| v / *c)),
                Op::Attention(m) => {
                    let gx = g.zip_map(val(*m), "attention'", |gv, mv| {
                        let s = sigmoid_scalar(mv);
                        gv * s * (T::one() - s)
                    })?;
                    accumulate(&mut grads[m.0], gx);
                }
                Op::SlotNormalize(a) => {
                    let (av, w) = (val(*a), &node.value);
                    let mut gx = Matrix::zeros(av.rows(), av.cols());
                    let mut scratch = Vec::with_capacity(av.cols());
                    for r in 0..av.rows() {
                        let s = order_free_sum(av.row(r), &mut scratch);
                        let mut dot = T::zero();
                        for (gj, wj) in g.row(r).iter().zip(w.row(r)) {
                            dot += *gj * *wj;
                        }
                        for (o, gl) in gx.row_mut(r).iter_mut().zip(g.row(r)) {
                            *o = (*gl - dot) / s;
                        }
                    }
                    accumulate(&mut grads[a.0], gx);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let (xv, gainv) = (val(*x), val(*gain));
                    let (rows, h) = xv.shape();
                    let hf = T::of(h as f64);
                    let mut gx = Matrix::zeros(rows, h);
                    let mut ggain = Matrix::zeros(1, h);
                    let mut gbias = Matrix::zeros(1, h);
                    let mut xhat = vec![T::zero(); h];
                    let mut dxhat = vec![T::zero(); h];
                    for r in 0..rows {
                        let row = xv.row(r);
                        let (mean, var) = row_moments(row);
                        let inv = T::one() / (var + *eps).sqrt();
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..h {
                            xhat[c] = (row[c] - mean) * inv;
                            let gv = g.get(r, c);
                            ggain.data_mut()[c] += gv * xhat[c];
                            gbias.data_mut()[c] += gv;
                            dxhat[c] = gv * gainv.get(0, c);
                            mean_d += dxhat[c];
                            mean_dx += dxhat[c] * xhat[c];
                        }
                        mean_d /= hf;
                        mean_dx /= hf;
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = inv * (dxhat[c] - mean_d - xhat[c] * mean_dx);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                    accumulate(&mut grads[gain.0], ggain);
                    accumulate(&mut grads[bias.0], gbias);
                }
                Op::Reparam { mu, log_sigma, noise } => {
                    let ls = val(*log_sigma);
                    let mut gmu = Matrix::zeros(1, ls.cols());
                    let mut gls = Matrix::zeros(1, ls.cols());
                    for r in 0..noise.rows() {
                        for c in 0..noise.cols() {
                            let gv = g.get(r, c);
                            gmu.data_mut()[c] += gv;
                            gls.data_mut()[c] += gv * noise.get(r, c) * ls.get(0, c).exp();
                        }
                    }
                    accumulate(&mut grads[mu.0], gmu);
                    accumulate(&mut grads[log_sigma.0], gls);
                }
                Op::PoolContrib { w, v, arg } => {
                    let (wv, vv) = (val(*w), val(*v));
                    match arg {
                        None => {
                            accumulate(&mut grads[w.0], matmul_nt(vv, &g)?);
                            accumulate(&mut grads[v.0], matmul(wv, &g)?);
                        }
                        Some(arg) => {
                            let dh = vv.cols();
                            let mut gw = Matrix::zeros(wv.rows(), wv.cols());
                            let mut gvv = Matrix::zeros(vv.rows(), dh);
                            for (idx, &i) in arg.iter().enumerate() {
                                let (k, m) = (idx / dh, idx % dh);
                                let gv = g.data()[idx];
                                gw.data_mut()[i * wv.cols() + k] += gv * vv.get(i, m);
                                gvv.data_mut()[i * dh + m] += gv * wv.get(i, k);
                            }
                            accumulate(&mut grads[w.0], gw);
                            accumulate(&mut grads[v.0], gvv);
                        }
                    }
                }
                Op::PoolRows { x, arg } => {
                    let (rows, cols) = val(*x).shape();
                    let mut gx = Matrix::zeros(rows, cols);
                    match arg {
                        None => {
                            for r in 0..rows {
                                gx.row_mut(r).copy_from_slice(g.row(0));
                            }
                        }
                        Some(arg) => {
                            for (c, &i) in arg.iter().enumerate() {
                                gx.set(i, c, g.get(0, c));
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Extremum { a, b, take_b } => {
                    let mut ga = g.clone();
                    let mut gb = g;
                    for (i, &tb) in take_b.iter().enumerate() {
                        if tb {
                            ga.data_mut()[i] = T::zero();
                        } else {
                            gb.data_mut()[i] = T::zero();
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                    accumulate(&mut grads[b.0], gb);
                }
                Op::Activate { x, act } => match act {
                    Activation::Identity => accumulate(&mut grads[x.0], g),
                    Activation::Relu => {
                        let gx = g.zip_map(val(*x), "relu'", |gv, xv| if xv > T::zero() { gv } else { T::zero() })?;
                        accumulate(&mut grads[x.0], gx);
                    }
                },
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let mut dot = T::zero();
                        for (gv, yv) in g.row(r).iter().zip(y.row(r)) {
                            dot += *gv * *yv;
                        }
                        for ((o, gv), yv) in gx.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                            *o = *yv * (*gv - dot);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
                Op::Reshape(x) => {
                    let (r, c) = val(*x).shape();
                    accumulate(&mut grads[x.0], g.reshape(r, c)?);
                }
                Op::SqDist { x, target } => {
                    let two_g = T::of(2.0) * g.get(0, 0);
                    let gx = val(*x).zip_map(target, "sqdist'", |a, b| two_g * (a - b))?;
                    accumulate(&mut grads[x.0], gx);
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// `Σ (a - b)²` in ascending index order.
pub fn squared_distance<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let d = x - y;
        s += d * d;
    }
    s
}
