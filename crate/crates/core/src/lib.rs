//! Mini-batch consistent set encoders.
//!
//! A slot set encoder attends from a fixed set of learned (or sampled) slots
//! to the elements of a set. Because the attention weights are normalized
//! over slots rather than over elements, the encoding of a set can be built
//! one batch at a time and merged in any order with the same result as a
//! single pass over the whole set.
//!
//! ```
//! use slotset_core::{encode_full, encode_partitioned, AggMode, Rng, SseParams, SseShape};
//!
//! let mut rng = Rng::new(7);
//! let shape = SseShape { d: 3, h: 8, d_hat: 4, k: 5, random_slots: true, bias: false };
//! let params = SseParams::<f64>::init(&mut rng, shape).unwrap();
//! let x = rng.standard_normals(40, 3);
//! let full = encode_full(&x, &params, AggMode::Mean, 11).unwrap();
//! let parts = vec![x.select_rows(&(0..25).collect::<Vec<_>>()), x.select_rows(&(25..40).collect::<Vec<_>>())];
//! let streamed = encode_partitioned(&parts, &params, AggMode::Mean, 11).unwrap();
//! assert!(slotset_core::relative_discrepancy(&streamed, &full) < 1e-12);
//! ```

pub mod baselines;
pub mod encoder;
pub mod error;
pub mod hierarchy;
pub mod partition;
pub mod rng;
pub mod scalar;
pub mod sse;
pub mod tensor;
pub mod training;

pub use baselines::{deepsets_encode, softmax_pool_full, softmax_pool_minibatch, Activation, DeepSets, DenseLayer, SoftmaxPool};
pub use encoder::{EncoderKind, SetEncoder};
pub use error::{Error, Result};
pub use hierarchy::{layer_seed, EncoderStack, StackLayer};
pub use partition::{partition_suite, random_partition, relative_discrepancy, split_rows};
pub use rng::{sample_gaussian, Rng};
pub use scalar::Scalar;
pub use sse::{
    attention_logits, attention_weights, encode_batch, encode_full, encode_partitioned, mean_slots, sample_slots, slot_normalize, AggMode, AggregateState,
    PartialEncoding, SlotConfig, SlotSample, SlotSetEncoder, SseParams, SseShape, ATTENTION_STABILIZER,
};
pub use tensor::{layer_norm, sigmoid, LayerNormParams, LinearMap, Matrix, DEFAULT_LAYER_NORM_EPS};

pub type Matrix64 = Matrix<f64>;
pub type Matrix32 = Matrix<f32>;
pub type SseParams64 = SseParams<f64>;
pub type SseParams32 = SseParams<f32>;
pub type AggregateState64 = AggregateState<f64>;
pub type AggregateState32 = AggregateState<f32>;
pub type EncoderStack64 = EncoderStack<f64>;
pub type EncoderStack32 = EncoderStack<f32>;
pub type SetEncoder64 = SetEncoder<f64>;
pub type SetEncoder32 = SetEncoder<f32>;
