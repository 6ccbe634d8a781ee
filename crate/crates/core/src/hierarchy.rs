//! Stacks of slot set encoders.
//!
//! Layer 1 streams over the raw set. Every later layer takes the previous
//! layer's finalized `K x d̂` slot matrix as its input set, which always fits
//! in memory, so only layer 1 ever sees a partition.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sse::{sample_slots, AggMode, AggregateState, SlotSample, SlotSetEncoder, SseParams};
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct StackLayer<T> {
    pub params: SseParams<T>,
    pub mode: AggMode,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStack<T> {
    layers: Vec<StackLayer<T>>,
}

/// Seed for the slots of layer `index` (0-based) in a session seeded with `seed`.
pub fn layer_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add(index as u64)
}

impl<T: Scalar> EncoderStack<T> {
    pub fn new(layers: Vec<StackLayer<T>>) -> Result<Self> {
        let stack = Self { layers };
        stack.validate()?;
        Ok(stack)
    }

    pub fn single(params: SseParams<T>, mode: AggMode) -> Result<Self> {
        Self::new(vec![StackLayer { params, mode }])
    }

    pub fn layers(&self) -> &[StackLayer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [StackLayer<T>] {
        &mut self.layers
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Element dimension accepted by layer 1.
    pub fn input_dim(&self) -> usize {
        self.layers[0].params.d()
    }

    /// Checks the dimension chain and returns the output shape `K_T x d̂_T`.
    pub fn validate(&self) -> Result<(usize, usize)> {
        let last = self.layers.last().ok_or_else(|| Error::Parameter("an encoder stack needs at least one layer".into()))?;
        for (i, layer) in self.layers.iter().enumerate() {
            layer.params.validate().map_err(|e| Error::Config {
                upper: i,
                lower: i,
                detail: e.to_string(),
            })?;
        }
        for (t, pair) in self.layers.windows(2).enumerate() {
            let (prev, next) = (&pair[0].params, &pair[1].params);
            if next.d() != prev.d_hat() {
                return Err(Error::Config {
                    upper: t + 1,
                    lower: t,
                    detail: format!("layer {} outputs d̂ = {} but layer {} expects d = {}", t, prev.d_hat(), t + 1, next.d()),
                });
            }
        }
        Ok((last.params.k(), last.params.d_hat()))
    }

    /// Like [`validate`](Self::validate), additionally requiring `K_T = 1`
    /// so the stack produces a single vector.
    pub fn validate_single_vector(&self) -> Result<usize> {
        let (k, d_hat) = self.validate()?;
        if k != 1 {
            let last = self.layers.len() - 1;
            return Err(Error::Config {
                upper: last,
                lower: last,
                detail: format!("final layer has K = {k}; a single-vector encoding needs K = 1"),
            });
        }
        Ok(d_hat)
    }

    pub fn output_shape(&self) -> (usize, usize) {
        let last = &self.layers[self.layers.len() - 1].params;
        (last.k(), last.d_hat())
    }

    /// Slots for layer 1 of a session.
    pub fn first_layer_slots(&self, seed: u64) -> Result<SlotSample<T>> {
        sample_slots(&self.layers[0].params.slots, layer_seed(seed, 0), None)
    }

    pub fn first_layer_encoder(&self, seed: u64) -> Result<SlotSetEncoder<'_, T>> {
        SlotSetEncoder::new(&self.layers[0].params, self.first_layer_slots(seed)?)
    }

    /// Runs layers 2..T on layer 1's finalized slots.
    pub fn encode_upper(&self, first: Matrix<T>, seed: u64) -> Result<Matrix<T>> {
        let mut current = first;
        for (t, layer) in self.layers.iter().enumerate().skip(1) {
            let enc = SlotSetEncoder::seeded(&layer.params, layer_seed(seed, t))?;
            current = enc.encode_full(&current, layer.mode)?;
        }
        Ok(current)
    }

    /// Finalizes a layer-1 state and runs the remaining layers.
    pub fn finish(&self, state: &AggregateState<T>, seed: u64) -> Result<Matrix<T>> {
        self.encode_upper(state.finalize()?, seed)
    }

    /// Streams `batches` through layer 1, then runs the rest of the stack.
    /// Empty batches are skipped; an entirely empty stream is an error.
    pub fn encode_stream<'a, I>(&self, batches: I, seed: u64) -> Result<Matrix<T>>
    where
        I: IntoIterator<Item = &'a Matrix<T>>,
    {
        let enc = self.first_layer_encoder(seed)?;
        let mode = self.layers[0].mode;
        let mut state = enc.init_state(mode);
        for b in batches.into_iter().filter(|b| b.rows() > 0) {
            state = state.merge(&enc.encode_batch(b, mode)?)?;
        }
        self.finish(&state, seed)
    }

    /// Single-pass reference evaluation.
    pub fn encode_full(&self, x: &Matrix<T>, seed: u64) -> Result<Matrix<T>> {
        self.encode_stream(std::iter::once(x), seed)
    }
}
