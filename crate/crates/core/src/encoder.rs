//! One type over every set encoder in the crate, with a uniform view of its
//! trainable parameters.

use crate::baselines::{softmax_pool_full, softmax_pool_minibatch, DeepSets, SoftmaxPool};
use crate::error::{Error, Result};
use crate::hierarchy::EncoderStack;
use crate::scalar::Scalar;
use crate::sse::{AggMode, SlotConfig, SseParams};
use crate::tensor::{LinearMap, Matrix};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EncoderKind {
    Sse,
    DeepSets,
    SoftmaxPool,
}

impl EncoderKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EncoderKind::Sse => "sse",
            EncoderKind::DeepSets => "deepsets",
            EncoderKind::SoftmaxPool => "softmax_pool",
        }
    }
}

impl fmt::Display for EncoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EncoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sse" => Ok(EncoderKind::Sse),
            "deepsets" => Ok(EncoderKind::DeepSets),
            "softmax_pool" => Ok(EncoderKind::SoftmaxPool),
            other => Err(Error::Parameter(format!("unknown encoder kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SetEncoder<T> {
    Sse(EncoderStack<T>),
    DeepSets(DeepSets<T>),
    /// Attention pooling; partitions are combined with `combine`.
    SoftmaxPool { pool: SoftmaxPool<T>, combine: AggMode },
}

fn linear_params<'a, T>(out: &mut Vec<(String, &'a Matrix<T>)>, prefix: &str, m: &'a LinearMap<T>) {
    out.push((format!("{prefix}.weight"), &m.weight));
    if let Some(b) = &m.bias {
        out.push((format!("{prefix}.bias"), b));
    }
}

fn linear_params_mut<'a, T>(out: &mut Vec<&'a mut Matrix<T>>, m: &'a mut LinearMap<T>) {
    out.push(&mut m.weight);
    if let Some(b) = &mut m.bias {
        out.push(b);
    }
}

pub(crate) fn sse_params<'a, T>(out: &mut Vec<(String, &'a Matrix<T>)>, prefix: &str, p: &'a SseParams<T>) {
    match &p.slots {
        SlotConfig::Deterministic { slots } => out.push((format!("{prefix}.slots"), slots)),
        SlotConfig::Random { mu, log_sigma, .. } => {
            out.push((format!("{prefix}.slot_mu"), mu));
            out.push((format!("{prefix}.slot_log_sigma"), log_sigma));
        }
    }
    out.push((format!("{prefix}.slot_norm.gain"), &p.slot_norm.gain));
    out.push((format!("{prefix}.slot_norm.bias"), &p.slot_norm.bias));
    linear_params(out, &format!("{prefix}.proj_q"), &p.proj_q);
    linear_params(out, &format!("{prefix}.proj_k"), &p.proj_k);
    linear_params(out, &format!("{prefix}.proj_v"), &p.proj_v);
}

fn sse_params_mut<'a, T>(out: &mut Vec<&'a mut Matrix<T>>, p: &'a mut SseParams<T>) {
    match &mut p.slots {
        SlotConfig::Deterministic { slots } => out.push(slots),
        SlotConfig::Random { mu, log_sigma, .. } => {
            out.push(mu);
            out.push(log_sigma);
        }
    }
    out.push(&mut p.slot_norm.gain);
    out.push(&mut p.slot_norm.bias);
    linear_params_mut(out, &mut p.proj_q);
    linear_params_mut(out, &mut p.proj_k);
    linear_params_mut(out, &mut p.proj_v);
}

impl<T: Scalar> SetEncoder<T> {
    pub fn kind(&self) -> EncoderKind {
        match self {
            SetEncoder::Sse(_) => EncoderKind::Sse,
            SetEncoder::DeepSets(_) => EncoderKind::DeepSets,
            SetEncoder::SoftmaxPool { .. } => EncoderKind::SoftmaxPool,
        }
    }

    /// Whether partitioned evaluation is guaranteed to match single-pass evaluation.
    pub fn is_mini_batch_consistent(&self) -> bool {
        !matches!(self, SetEncoder::SoftmaxPool { .. })
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            SetEncoder::Sse(stack) => stack.validate().map(|_| ()),
            SetEncoder::DeepSets(ds) => ds.validate(ds.input_dim()).map(|_| ()),
            SetEncoder::SoftmaxPool { pool, .. } => pool.validate(),
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            SetEncoder::Sse(stack) => stack.input_dim(),
            SetEncoder::DeepSets(ds) => ds.input_dim(),
            SetEncoder::SoftmaxPool { pool, .. } => pool.input_dim(),
        }
    }

    pub fn output_shape(&self) -> (usize, usize) {
        match self {
            SetEncoder::Sse(stack) => stack.output_shape(),
            SetEncoder::DeepSets(ds) => (1, ds.output_dim()),
            SetEncoder::SoftmaxPool { pool, .. } => (pool.k(), pool.d_hat()),
        }
    }

    /// Length of the flattened encoding.
    pub fn output_len(&self) -> usize {
        let (r, c) = self.output_shape();
        r * c
    }

    /// Aggregation mode applied to the raw set (layer 1 for stacks).
    pub fn stream_mode(&self) -> AggMode {
        match self {
            SetEncoder::Sse(stack) => stack.layers()[0].mode,
            SetEncoder::DeepSets(ds) => ds.pool,
            SetEncoder::SoftmaxPool { combine, .. } => *combine,
        }
    }

    /// Changes the aggregation mode applied to the raw set.
    pub fn set_stream_mode(&mut self, mode: AggMode) {
        match self {
            SetEncoder::Sse(stack) => stack.layers_mut()[0].mode = mode,
            SetEncoder::DeepSets(ds) => ds.pool = mode,
            SetEncoder::SoftmaxPool { combine, .. } => *combine = mode,
        }
    }

    /// Named trainable parameters in a fixed order.
    pub fn parameters(&self) -> Vec<(String, &Matrix<T>)> {
        let mut out = Vec::new();
        match self {
            SetEncoder::Sse(stack) => {
                for (t, layer) in stack.layers().iter().enumerate() {
                    sse_params(&mut out, &format!("layer{t}"), &layer.params);
                }
            }
            SetEncoder::DeepSets(ds) => {
                for (i, l) in ds.phi.iter().enumerate() {
                    linear_params(&mut out, &format!("phi{i}"), &l.map);
                }
                for (i, l) in ds.rho.iter().enumerate() {
                    linear_params(&mut out, &format!("rho{i}"), &l.map);
                }
            }
            SetEncoder::SoftmaxPool { pool, .. } => {
                out.push(("query".to_string(), &pool.query));
                linear_params(&mut out, "proj_k", &pool.proj_k);
                linear_params(&mut out, "proj_v", &pool.proj_v);
            }
        }
        out
    }

    /// Mutable parameters, in the same order as [`parameters`](Self::parameters).
    pub fn parameters_mut(&mut self) -> Vec<&mut Matrix<T>> {
        let mut out = Vec::new();
        match self {
            SetEncoder::Sse(stack) => {
                for layer in stack.layers_mut() {
                    sse_params_mut(&mut out, &mut layer.params);
                }
            }
            SetEncoder::DeepSets(ds) => {
                for l in ds.phi.iter_mut().chain(ds.rho.iter_mut()) {
                    linear_params_mut(&mut out, &mut l.map);
                }
            }
            SetEncoder::SoftmaxPool { pool, .. } => {
                out.push(&mut pool.query);
                linear_params_mut(&mut out, &mut pool.proj_k);
                linear_params_mut(&mut out, &mut pool.proj_v);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn flat_params(&self) -> Vec<T> {
        self.parameters().iter().flat_map(|(_, m)| m.data().iter().copied()).collect()
    }

    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Parameter(format!("expected {} parameters, got {}", self.param_count(), flat.len())));
        }
        let mut pos = 0;
        for m in self.parameters_mut() {
            let n = m.len();
            m.data_mut().copy_from_slice(&flat[pos..pos + n]);
            pos += n;
        }
        Ok(())
    }

    /// Single-pass encoding of a whole set.
    pub fn encode_full(&self, x: &Matrix<T>, seed: u64) -> Result<Matrix<T>> {
        if x.rows() == 0 {
            return Err(Error::EmptySet);
        }
        match self {
            SetEncoder::Sse(stack) => stack.encode_full(x, seed),
            SetEncoder::DeepSets(ds) => ds.encode(x),
            SetEncoder::SoftmaxPool { pool, .. } => softmax_pool_full(x, pool),
        }
    }

    /// Batch-by-batch encoding. Equal to [`encode_full`](Self::encode_full)
    /// on the concatenation for mini-batch consistent encoders only.
    pub fn encode_partitioned(&self, batches: &[Matrix<T>], seed: u64) -> Result<Matrix<T>> {
        if batches.iter().all(|b| b.rows() == 0) {
            return Err(Error::EmptySet);
        }
        match self {
            SetEncoder::Sse(stack) => stack.encode_stream(batches, seed),
            SetEncoder::DeepSets(ds) => ds.encode_stream(batches),
            SetEncoder::SoftmaxPool { pool, combine } => softmax_pool_minibatch(batches, pool, *combine),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use crate::sse::SseShape;

    fn sse(random_slots: bool, bias: bool) -> SetEncoder<f64> {
        let p = SseParams::init(
            &mut Rng::new(1),
            SseShape {
                d: 3,
                h: 4,
                d_hat: 2,
                k: 5,
                random_slots,
                bias,
            },
        )
        .unwrap();
        SetEncoder::Sse(EncoderStack::single(p, AggMode::Sum).unwrap())
    }

    #[test]
    fn parameter_counts() {
        // slots 5*4, norm 2*4, q 4*2, k 3*2, v 3*2
        assert_eq!(sse(false, false).param_count(), 20 + 8 + 8 + 6 + 6);
        // mu, log_sigma 2*4 plus three biases of 2
        assert_eq!(sse(true, true).param_count(), 8 + 8 + 8 + 6 + 6 + 6);
        let names: Vec<String> = sse(true, false).parameters().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names[0], "layer0.slot_mu");
        assert_eq!(names.last().unwrap(), "layer0.proj_v.weight");
    }

    #[test]
    fn flat_round_trip() {
        let mut e = sse(true, true);
        let flat = e.flat_params();
        let bumped: Vec<f64> = flat.iter().map(|v| v + 1.0).collect();
        e.set_flat_params(&bumped).unwrap();
        assert_eq!(e.flat_params(), bumped);
        assert!(e.set_flat_params(&bumped[1..]).is_err());
    }

    #[test]
    fn kind_names() {
        for k in [EncoderKind::Sse, EncoderKind::DeepSets, EncoderKind::SoftmaxPool] {
            assert_eq!(k.as_str().parse::<EncoderKind>().unwrap(), k);
        }
    }
}
