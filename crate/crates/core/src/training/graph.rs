//! Recording encoder forward passes on a [`Tape`].

use super::tape::{squared_distance, Tape, Var};
use crate::baselines::DenseLayer;
use crate::encoder::SetEncoder;
use crate::error::{shape_err, Error, Result};
use crate::hierarchy::layer_seed;
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::sse::{AggMode, SlotConfig, SseParams};
use crate::tensor::{LinearMap, Matrix};

struct Cursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl Cursor<'_> {
    fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }
}

struct LinearVars {
    weight: Var,
    bias: Option<Var>,
}

fn take_linear<T>(cur: &mut Cursor<'_>, m: &LinearMap<T>) -> LinearVars {
    LinearVars {
        weight: cur.next(),
        bias: m.bias.as_ref().map(|_| cur.next()),
    }
}

fn apply<T: Scalar>(tape: &mut Tape<T>, x: Var, m: &LinearVars) -> Result<Var> {
    let y = tape.matmul(x, m.weight)?;
    match m.bias {
        Some(b) => tape.add_bias(y, b),
        None => Ok(y),
    }
}

fn finish_pool<T: Scalar>(tape: &mut Tape<T>, merged: Option<Var>, mode: AggMode, count: usize) -> Result<Var> {
    let merged = merged.ok_or(Error::EmptySet)?;
    Ok(if mode == AggMode::Mean {
        tape.div_scalar(merged, T::of(count as f64))
    } else {
        merged
    })
}

fn merge_into<T: Scalar>(tape: &mut Tape<T>, acc: Option<Var>, next: Var, mode: AggMode) -> Result<Option<Var>> {
    Ok(Some(match acc {
        None => next,
        Some(a) => tape.merge(a, next, mode)?,
    }))
}

fn record_sse_layer<T: Scalar>(
    tape: &mut Tape<T>,
    p: &SseParams<T>,
    cur: &mut Cursor<'_>,
    inputs: &[Var],
    mode: AggMode,
    seed: u64,
) -> Result<Var> {
    let slots = match &p.slots {
        SlotConfig::Deterministic { .. } => cur.next(),
        SlotConfig::Random { k, mu, .. } => {
            let (mu_v, ls_v) = (cur.next(), cur.next());
            let noise = Rng::new(seed).standard_normals(*k, mu.cols());
            tape.reparam(mu_v, ls_v, noise)?
        }
    };
    let (gain, bias) = (cur.next(), cur.next());
    let q_lin = take_linear(cur, &p.proj_q);
    let k_lin = take_linear(cur, &p.proj_k);
    let v_lin = take_linear(cur, &p.proj_v);

    let normed = tape.layer_norm(slots, gain, bias, p.slot_norm.epsilon)?;
    let queries = apply(tape, normed, &q_lin)?;
    let scale = p.logit_scale();
    let mut merged = None;
    let mut count = 0;
    for &x in inputs {
        let n = tape.value(x).rows();
        if n == 0 {
            continue;
        }
        if tape.value(x).cols() != p.d() {
            return shape_err("record_sse", format!("input has {} columns, layer expects {}", tape.value(x).cols(), p.d()));
        }
        let keys = apply(tape, x, &k_lin)?;
        let m = tape.matmul_nt(keys, queries)?;
        let m = tape.scale(m, scale);
        let attn = tape.attention(m);
        let w = tape.slot_normalize(attn)?;
        let v = apply(tape, x, &v_lin)?;
        let pooled = tape.pool_contributions(w, v, mode)?;
        merged = merge_into(tape, merged, pooled, mode)?;
        count += n;
    }
    finish_pool(tape, merged, mode, count)
}

fn record_dense<T: Scalar>(tape: &mut Tape<T>, layers: &[DenseLayer<T>], cur: &mut Cursor<'_>, x: Var) -> Result<Var> {
    let mut h = x;
    for l in layers {
        let lin = take_linear(cur, &l.map);
        let y = apply(tape, h, &lin)?;
        h = tape.activate(y, l.activation);
    }
    Ok(h)
}

impl<T: Scalar> SetEncoder<T> {
    /// Pushes every parameter onto `tape` as a leaf, in
    /// [`parameters`](Self::parameters) order.
    pub fn register_params(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.parameters().into_iter().map(|(_, m)| tape.leaf(m.clone())).collect()
    }

    /// Records the partitioned forward pass of one set. The output node is
    /// bitwise equal to [`encode_partitioned`](Self::encode_partitioned).
    pub fn record(&self, tape: &mut Tape<T>, params: &[Var], batches: &[Matrix<T>], seed: u64) -> Result<Var> {
        if params.len() != self.parameters().len() {
            return Err(Error::Parameter(format!("expected {} parameter nodes, got {}", self.parameters().len(), params.len())));
        }
        if batches.iter().all(|b| b.rows() == 0) {
            return Err(Error::EmptySet);
        }
        let inputs: Vec<Var> = batches.iter().filter(|b| b.rows() > 0).map(|b| tape.leaf(b.clone())).collect();
        let mut cur = Cursor { vars: params, pos: 0 };
        match self {
            SetEncoder::Sse(stack) => {
                let mut current = None;
                for (t, layer) in stack.layers().iter().enumerate() {
                    let layer_inputs = match current {
                        None => inputs.clone(),
                        Some(prev) => vec![prev],
                    };
                    current = Some(record_sse_layer(tape, &layer.params, &mut cur, &layer_inputs, layer.mode, layer_seed(seed, t))?);
                }
                Ok(current.expect("validated stacks have a layer"))
            }
            SetEncoder::DeepSets(ds) => {
                let start = cur.pos;
                let mut merged = None;
                let mut count = 0;
                for &x in &inputs {
                    cur.pos = start;
                    let feats = record_dense(tape, &ds.phi, &mut cur, x)?;
                    let pooled = tape.pool_rows(feats, ds.pool);
                    merged = merge_into(tape, merged, pooled, ds.pool)?;
                    count += tape.value(x).rows();
                }
                let pooled = finish_pool(tape, merged, ds.pool, count)?;
                record_dense(tape, &ds.rho, &mut cur, pooled)
            }
            SetEncoder::SoftmaxPool { pool, combine } => {
                let query = cur.next();
                let k_lin = take_linear(&mut cur, &pool.proj_k);
                let v_lin = take_linear(&mut cur, &pool.proj_v);
                let mut merged = None;
                for &x in &inputs {
                    let keys = apply(tape, x, &k_lin)?;
                    let logits = tape.matmul_nt(query, keys)?;
                    let logits = tape.scale(logits, pool.logit_scale());
                    let attn = tape.softmax_rows(logits);
                    let v = apply(tape, x, &v_lin)?;
                    let out = tape.matmul(attn, v)?;
                    merged = merge_into(tape, merged, out, *combine)?;
                }
                finish_pool(tape, merged, *combine, inputs.len())
            }
        }
    }
}

/// One supervised set: its batches, the target encoding (any shape with
/// `output_len` entries) and the slot seed used to encode it.
#[derive(Clone, Debug)]
pub struct Example<T> {
    pub batches: Vec<Matrix<T>>,
    pub target: Matrix<T>,
    pub seed: u64,
}

impl<T: Scalar> Example<T> {
    pub fn single(set: Matrix<T>, target: Matrix<T>, seed: u64) -> Self {
        Self {
            batches: vec![set],
            target,
            seed,
        }
    }
}

/// A recorded loss and the parameter leaves it depends on.
#[derive(Clone, Debug)]
pub struct LossGraph<T> {
    pub tape: Tape<T>,
    pub params: Vec<Var>,
    pub loss: Var,
}

impl<T: Scalar> LossGraph<T> {
    pub fn loss_value(&self) -> T {
        self.tape.value(self.loss).get(0, 0)
    }
}

fn flat_target<T: Scalar>(encoder: &SetEncoder<T>, ex: &Example<T>) -> Result<Matrix<T>> {
    let (r, c) = encoder.output_shape();
    if ex.target.len() != r * c {
        return shape_err("forward_loss", format!("target has {} values, encoding has {}", ex.target.len(), r * c));
    }
    ex.target.reshape(1, r * c)
}

/// Mean over examples of the squared Euclidean distance between each
/// encoding and its target, recorded for differentiation.
pub fn forward_loss<T: Scalar>(encoder: &SetEncoder<T>, examples: &[Example<T>]) -> Result<LossGraph<T>> {
    if examples.is_empty() {
        return Err(Error::Parameter("a loss needs at least one example".into()));
    }
    let mut tape = Tape::new();
    let params = encoder.register_params(&mut tape);
    let len = encoder.output_len();
    let mut total: Option<Var> = None;
    for ex in examples {
        let target = flat_target(encoder, ex)?;
        let enc = encoder.record(&mut tape, &params, &ex.batches, ex.seed)?;
        let flat = tape.reshape(enc, 1, len)?;
        let d = tape.squared_distance(flat, target)?;
        total = Some(match total {
            None => d,
            Some(t) => tape.add(t, d)?,
        });
    }
    let inv = T::one() / T::of(examples.len() as f64);
    let loss = tape.scale(total.expect("nonempty"), inv);
    Ok(LossGraph { tape, params, loss })
}

/// The same loss as [`forward_loss`] without a tape.
pub fn loss_value<T: Scalar>(encoder: &SetEncoder<T>, examples: &[Example<T>]) -> Result<T> {
    if examples.is_empty() {
        return Err(Error::Parameter("a loss needs at least one example".into()));
    }
    let mut total: Option<T> = None;
    for ex in examples {
        let target = flat_target(encoder, ex)?;
        let enc = encoder.encode_partitioned(&ex.batches, ex.seed)?;
        let d = squared_distance(&enc.reshape(1, encoder.output_len())?, &target);
        total = Some(match total {
            None => d,
            Some(t) => t + d,
        });
    }
    Ok(total.expect("nonempty") * (T::one() / T::of(examples.len() as f64)))
}

/// Reverse sweep; returns the gradient flattened in parameter order.
pub fn backward<T: Scalar>(graph: &LossGraph<T>) -> Result<Vec<T>> {
    let grads = graph.tape.backward(graph.loss)?;
    let mut flat = Vec::new();
    for &p in &graph.params {
        let shape = graph.tape.value(p).shape();
        flat.extend_from_slice(grads.get_or_zeros(p, shape).data());
    }
    Ok(flat)
}
