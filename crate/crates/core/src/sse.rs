//! The slot set encoder.
//!
//! A set `X` (n x d) is encoded against `K` slots (K x h). Each element
//! attends to the slots through a sigmoid, its attention row is normalized
//! across slots, and its contribution to slot `k` is `W[i,k] · v(x_i)`.
//! Nothing in that pipeline looks at any other element, so the encoding of a
//! set is an aggregate of independent per-element contributions and can be
//! computed batch by batch.
//!
//! Aggregation is defined at the level of those per-element contributions:
//!
//! * `Sum`: `Σ_i C_i` (equals `Wᵀ · v(X)`),
//! * `Mean`: the sum divided by the element count carried in the state,
//! * `Max` / `Min`: elementwise extremum over all `C_i`.
//!
//! Under this definition every mode gives the same answer for every
//! partition of the input, exactly for `Max`/`Min` and up to summation
//! reassociation for `Sum`/`Mean`.

use crate::error::{shape_err, Error, Result};
use crate::rng::{sample_gaussian, Rng};
use crate::scalar::Scalar;
use crate::tensor::{apply_linear, layer_norm, matmul_nt, matmul_tn, sigmoid_scalar, LayerNormParams, LinearMap, Matrix};
use rayon::prelude::*;
use std::fmt;
use std::str::FromStr;

/// Added to every sigmoid attention weight so slot normalization never divides by zero.
pub const ATTENTION_STABILIZER: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AggMode {
    Sum,
    Mean,
    Max,
    Min,
}

impl AggMode {
    pub const ALL: [AggMode; 4] = [AggMode::Sum, AggMode::Mean, AggMode::Max, AggMode::Min];

    pub fn as_str(self) -> &'static str {
        match self {
            AggMode::Sum => "sum",
            AggMode::Mean => "mean",
            AggMode::Max => "max",
            AggMode::Min => "min",
        }
    }

    /// Whether merging is exact (no floating-point reassociation).
    pub fn is_exact(self) -> bool {
        matches!(self, AggMode::Max | AggMode::Min)
    }

    /// Identity element of the merge.
    pub fn identity<T: Scalar>(self) -> T {
        match self {
            AggMode::Sum | AggMode::Mean => T::zero(),
            AggMode::Max => T::neg_infinity(),
            AggMode::Min => T::infinity(),
        }
    }

    /// Binary merge. On ties the left operand wins, which keeps the
    /// lowest-index element selected when folding in arrival order.
    #[inline]
    pub fn combine<T: Scalar>(self, a: T, b: T) -> T {
        match self {
            AggMode::Sum | AggMode::Mean => a + b,
            AggMode::Max => {
                if b > a {
                    b
                } else {
                    a
                }
            }
            AggMode::Min => {
                if b < a {
                    b
                } else {
                    a
                }
            }
        }
    }
}

impl fmt::Display for AggMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AggMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "sum" => Ok(AggMode::Sum),
            "mean" => Ok(AggMode::Mean),
            "max" => Ok(AggMode::Max),
            "min" => Ok(AggMode::Min),
            other => Err(Error::Parameter(format!("unknown aggregation mode `{other}`"))),
        }
    }
}

/// How slots are initialized.
#[derive(Clone, Debug, PartialEq)]
pub enum SlotConfig<T> {
    /// Learned slots used as-is.
    Deterministic { slots: Matrix<T> },
    /// `k` slots drawn i.i.d. from `N(mu, diag(exp(log_sigma)²))`; `mu` and
    /// `log_sigma` are `1 x h` and shared by all slots.
    Random {
        k: usize,
        mu: Matrix<T>,
        log_sigma: Matrix<T>,
    },
}

impl<T: Scalar> SlotConfig<T> {
    pub fn validate(&self) -> Result<()> {
        match self {
            SlotConfig::Deterministic { slots } => {
                if slots.rows() == 0 || slots.cols() == 0 {
                    return Err(Error::Parameter(format!(
                        "deterministic slots must be at least 1x1, got {:?}",
                        slots.shape()
                    )));
                }
                slots.ensure_finite("deterministic slots")
            }
            SlotConfig::Random { k, mu, log_sigma } => {
                if *k == 0 || mu.cols() == 0 {
                    return Err(Error::Parameter(format!("random slots need k >= 1 and h >= 1 (k = {k}, h = {})", mu.cols())));
                }
                if mu.rows() != 1 || log_sigma.shape() != mu.shape() {
                    return shape_err(
                        "SlotConfig",
                        format!("mu {:?} and log_sigma {:?} must both be 1 x h", mu.shape(), log_sigma.shape()),
                    );
                }
                mu.ensure_finite("slot mu")?;
                log_sigma.ensure_finite("slot log_sigma")
            }
        }
    }

    pub fn k(&self) -> usize {
        match self {
            SlotConfig::Deterministic { slots } => slots.rows(),
            SlotConfig::Random { k, .. } => *k,
        }
    }

    pub fn h(&self) -> usize {
        match self {
            SlotConfig::Deterministic { slots } => slots.cols(),
            SlotConfig::Random { mu, .. } => mu.cols(),
        }
    }

    pub fn is_random(&self) -> bool {
        matches!(self, SlotConfig::Random { .. })
    }

    fn resolve_k(&self, k_override: Option<usize>) -> Result<usize> {
        match (self, k_override) {
            (_, None) => Ok(self.k()),
            (_, Some(0)) => Err(Error::Parameter("slot count must be at least 1".into())),
            (SlotConfig::Random { .. }, Some(k)) => Ok(k),
            (SlotConfig::Deterministic { slots }, Some(k)) if k == slots.rows() => Ok(k),
            (SlotConfig::Deterministic { slots }, Some(k)) => Err(Error::Parameter(format!(
                "deterministic slots are fixed at K = {}, cannot use K = {k}",
                slots.rows()
            ))),
        }
    }
}

/// The slots used for one encoding session. Every batch of a set must be
/// encoded against the same sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotSample<T> {
    pub slots: Matrix<T>,
    /// `None` for deterministic (or frozen-to-mean) slots.
    pub seed: Option<u64>,
}

/// Draws the slots for a session. `k_override` changes the slot count of a
/// random-slot model; a deterministic model only accepts its stored count.
pub fn sample_slots<T: Scalar>(config: &SlotConfig<T>, seed: u64, k_override: Option<usize>) -> Result<SlotSample<T>> {
    config.validate()?;
    let k = config.resolve_k(k_override)?;
    match config {
        SlotConfig::Deterministic { slots } => Ok(SlotSample {
            slots: slots.clone(),
            seed: None,
        }),
        SlotConfig::Random { mu, log_sigma, .. } => {
            let sigma: Vec<T> = log_sigma.data().iter().map(|ls| ls.exp()).collect();
            let slots = sample_gaussian(&mut Rng::new(seed), k, mu.cols(), mu.data(), &sigma)?;
            Ok(SlotSample { slots, seed: Some(seed) })
        }
    }
}

/// Evaluation-time alternative to sampling: every random slot is set to `mu`.
pub fn mean_slots<T: Scalar>(config: &SlotConfig<T>, k_override: Option<usize>) -> Result<SlotSample<T>> {
    config.validate()?;
    let k = config.resolve_k(k_override)?;
    match config {
        SlotConfig::Deterministic { slots } => Ok(SlotSample {
            slots: slots.clone(),
            seed: None,
        }),
        SlotConfig::Random { mu, .. } => {
            let rows: Vec<&[T]> = (0..k).map(|_| mu.row(0)).collect();
            Ok(SlotSample {
                slots: Matrix::from_rows(&rows)?,
                seed: None,
            })
        }
    }
}

/// Parameters of one slot set encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SseParams<T> {
    pub slots: SlotConfig<T>,
    pub slot_norm: LayerNormParams<T>,
    /// h -> d̂
    pub proj_q: LinearMap<T>,
    /// d -> d̂
    pub proj_k: LinearMap<T>,
    /// d -> d̂
    pub proj_v: LinearMap<T>,
}

/// Dimensions for [`SseParams::init`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SseShape {
    pub d: usize,
    pub h: usize,
    pub d_hat: usize,
    pub k: usize,
    pub random_slots: bool,
    pub bias: bool,
}

impl<T: Scalar> SseParams<T> {
    pub fn new(
        slots: SlotConfig<T>,
        slot_norm: LayerNormParams<T>,
        proj_q: LinearMap<T>,
        proj_k: LinearMap<T>,
        proj_v: LinearMap<T>,
    ) -> Result<Self> {
        let p = Self {
            slots,
            slot_norm,
            proj_q,
            proj_k,
            proj_v,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        self.slots.validate()?;
        let h = self.slots.h();
        let d_hat = self.proj_q.d_out();
        let checks = [
            (self.slot_norm.dim() == h, "slot norm width must equal h"),
            (self.proj_q.d_in() == h, "q projection input must equal h"),
            (self.proj_k.d_in() == self.proj_v.d_in(), "k and v projections must share the input dimension"),
            (self.proj_k.d_out() == d_hat && self.proj_v.d_out() == d_hat, "q, k, v must share the output dimension"),
            (d_hat >= 1 && self.proj_k.d_in() >= 1, "dimensions must be at least 1"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return shape_err("SseParams", msg);
            }
        }
        Ok(())
    }

    /// Random initialization: projection weights `N(0, 1/d_in)`,
    /// deterministic slots and `mu` standard normal, `log_sigma` zero.
    pub fn init(rng: &mut Rng, shape: SseShape) -> Result<Self> {
        let SseShape {
            d,
            h,
            d_hat,
            k,
            random_slots,
            bias,
        } = shape;
        if d == 0 || h == 0 || d_hat == 0 || k == 0 {
            return Err(Error::Parameter(format!("all dimensions must be positive: {shape:?}")));
        }
        let slots = if random_slots {
            SlotConfig::Random {
                k,
                mu: rng.standard_normals(1, h),
                log_sigma: Matrix::zeros(1, h),
            }
        } else {
            SlotConfig::Deterministic {
                slots: rng.standard_normals(k, h),
            }
        };
        let mut linear = |d_in: usize| -> LinearMap<T> {
            let scale = T::of(1.0 / (d_in as f64).sqrt());
            let weight = rng.standard_normals::<T>(d_in, d_hat).scale(scale);
            let bias = bias.then(|| rng.standard_normals::<T>(1, d_hat).scale(T::of(0.1)));
            LinearMap { weight, bias }
        };
        let proj_q = linear(h);
        let proj_k = linear(d);
        let proj_v = linear(d);
        Self::new(slots, LayerNormParams::standard(h), proj_q, proj_k, proj_v)
    }

    /// Element dimension.
    pub fn d(&self) -> usize {
        self.proj_k.d_in()
    }

    pub fn h(&self) -> usize {
        self.slots.h()
    }

    pub fn d_hat(&self) -> usize {
        self.proj_q.d_out()
    }

    pub fn k(&self) -> usize {
        self.slots.k()
    }

    pub(crate) fn logit_scale(&self) -> T {
        T::one() / T::of(self.d_hat() as f64).sqrt()
    }
}

/// `M = k(X) · q(S)ᵀ / √d̂` for already normalized slots.
pub fn attention_logits<T: Scalar>(x: &Matrix<T>, slots_normed: &Matrix<T>, params: &SseParams<T>) -> Result<Matrix<T>> {
    if slots_normed.cols() != params.h() {
        return shape_err(
            "attention_logits",
            format!("slots have {} columns, expected h = {}", slots_normed.cols(), params.h()),
        );
    }
    let queries = apply_linear(&params.proj_q, slots_normed)?;
    logits_against(x, &queries, params)
}

fn logits_against<T: Scalar>(x: &Matrix<T>, queries: &Matrix<T>, params: &SseParams<T>) -> Result<Matrix<T>> {
    if x.cols() != params.d() {
        return shape_err(
            "attention_logits",
            format!("set elements have {} columns, expected d = {}", x.cols(), params.d()),
        );
    }
    let keys = apply_linear(&params.proj_k, x)?;
    Ok(matmul_nt(&keys, queries)?.scale(params.logit_scale()))
}

/// `sigmoid(M) + 1e-8`, elementwise.
pub fn attention_weights<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let eps = T::of(ATTENTION_STABILIZER);
    m.map(|x| sigmoid_scalar(x) + eps)
}

/// Sum of a row of positive weights, independent of the order of the row.
///
/// The terms are added in ascending value order, so permuting the slots
/// leaves the normalizer bitwise unchanged.
pub(crate) fn order_free_sum<T: Scalar>(row: &[T], scratch: &mut Vec<T>) -> T {
    scratch.clear();
    scratch.extend_from_slice(row);
    scratch.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite attention weights"));
    let mut s = T::zero();
    for &x in scratch.iter() {
        s += x;
    }
    s
}

/// Divides every attention row by its sum over the slots.
pub fn slot_normalize<T: Scalar>(attn: &Matrix<T>) -> Result<Matrix<T>> {
    if let Some(bad) = attn.data().iter().find(|x| !(**x > T::zero()) || !x.is_finite()) {
        return Err(Error::Numeric(format!("attention weights must be positive and finite, found {bad}")));
    }
    let mut out = attn.clone();
    let mut scratch = Vec::with_capacity(attn.cols());
    for r in 0..attn.rows() {
        let s = order_free_sum(attn.row(r), &mut scratch);
        for x in out.row_mut(r) {
            *x = *x / s;
        }
    }
    Ok(out)
}

/// Pools per-element contributions `C_i[k, m] = W[i, k] · V[i, m]` over the
/// elements of one batch. Returns the `K x d̂` result and, for `Max`/`Min`,
/// the winning element index of every entry (lowest index on ties).
pub(crate) fn pool_contributions<T: Scalar>(
    w: &Matrix<T>,
    v: &Matrix<T>,
    mode: AggMode,
) -> Result<(Matrix<T>, Option<Vec<usize>>)> {
    match mode {
        AggMode::Sum | AggMode::Mean => Ok((matmul_tn(w, v)?, None)),
        AggMode::Max | AggMode::Min => {
            if w.rows() != v.rows() {
                return shape_err("pool", format!("{} weight rows vs {} value rows", w.rows(), v.rows()));
            }
            let (k, dh) = (w.cols(), v.cols());
            let mut out = Matrix::filled(k, dh, mode.identity::<T>());
            let mut arg = vec![0usize; k * dh];
            for i in 0..w.rows() {
                let wr = w.row(i);
                let vr = v.row(i);
                for s in 0..k {
                    for m in 0..dh {
                        let c = wr[s] * vr[m];
                        let idx = s * dh + m;
                        let cur = out.data()[idx];
                        let better = if i == 0 {
                            true
                        } else if mode == AggMode::Max {
                            c > cur
                        } else {
                            c < cur
                        };
                        if better {
                            out.data_mut()[idx] = c;
                            arg[idx] = i;
                        }
                    }
                }
            }
            Ok((out, Some(arg)))
        }
    }
}

/// One batch's contribution to the set encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct PartialEncoding<T> {
    /// `K x d̂`; for `Mean` this is the undivided sum.
    pub values: Matrix<T>,
    pub count: usize,
}

/// The streaming state: everything retained between batches.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateState<T> {
    mode: AggMode,
    partial: Matrix<T>,
    count: usize,
}

impl<T: Scalar> AggregateState<T> {
    /// The identity state for `mode`.
    pub fn init(mode: AggMode, k: usize, d_hat: usize) -> Self {
        Self {
            mode,
            partial: Matrix::filled(k, d_hat, mode.identity()),
            count: 0,
        }
    }

    /// Reassembles a state from stored parts (e.g. a session file).
    pub fn from_parts(mode: AggMode, partial: Matrix<T>, count: usize) -> Result<Self> {
        if partial.data().iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric("aggregate state contains NaN".into()));
        }
        if count == 0 && partial != Matrix::filled(partial.rows(), partial.cols(), mode.identity()) {
            return Err(Error::Parameter("an empty aggregate state must hold the identity element".into()));
        }
        if count > 0 && !partial.is_finite() {
            return Err(Error::Numeric("a non-empty aggregate state must be finite".into()));
        }
        Ok(Self { mode, partial, count })
    }

    pub fn mode(&self) -> AggMode {
        self.mode
    }

    pub fn partial(&self) -> &Matrix<T> {
        &self.partial
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn is_initialized(&self) -> bool {
        self.count > 0
    }

    fn absorb(mut self, values: &Matrix<T>, count: usize, op: &'static str) -> Result<Self> {
        if values.shape() != self.partial.shape() {
            return shape_err(op, format!("state {:?} vs incoming {:?}", self.partial.shape(), values.shape()));
        }
        let mode = self.mode;
        for (a, &b) in self.partial.data_mut().iter_mut().zip(values.data()) {
            *a = mode.combine(*a, b);
        }
        self.count += count;
        Ok(self)
    }

    /// Folds one batch into the state.
    pub fn merge(self, partial: &PartialEncoding<T>) -> Result<Self> {
        self.absorb(&partial.values, partial.count, "merge")
    }

    /// Combines two states built from disjoint parts of the same set.
    pub fn merge_states(self, other: &Self) -> Result<Self> {
        if self.mode != other.mode {
            return Err(Error::Parameter(format!(
                "cannot merge a {} state with a {} state",
                self.mode, other.mode
            )));
        }
        self.absorb(&other.partial, other.count, "merge_states")
    }

    /// The encoding of everything merged so far.
    pub fn finalize(&self) -> Result<Matrix<T>> {
        if self.count == 0 {
            return Err(Error::EmptySet);
        }
        Ok(match self.mode {
            AggMode::Mean => {
                let n = T::of(self.count as f64);
                self.partial.map(|x| x / n)
            }
            _ => self.partial.clone(),
        })
    }
}

/// An encoder bound to one slot sample. The slot LayerNorm and the query
/// projection run once here, not once per batch.
#[derive(Clone, Debug)]
pub struct SlotSetEncoder<'p, T> {
    params: &'p SseParams<T>,
    sample: SlotSample<T>,
    queries: Matrix<T>,
}

impl<'p, T: Scalar> SlotSetEncoder<'p, T> {
    pub fn new(params: &'p SseParams<T>, sample: SlotSample<T>) -> Result<Self> {
        if sample.slots.cols() != params.h() || sample.slots.rows() == 0 {
            return shape_err(
                "SlotSetEncoder::new",
                format!("slot sample {:?} for h = {}", sample.slots.shape(), params.h()),
            );
        }
        let normed = layer_norm(&params.slot_norm, &sample.slots)?;
        let queries = apply_linear(&params.proj_q, &normed)?;
        Ok(Self { params, sample, queries })
    }

    /// Samples slots with `seed` (ignored by deterministic slots).
    pub fn seeded(params: &'p SseParams<T>, seed: u64) -> Result<Self> {
        Self::new(params, sample_slots(&params.slots, seed, None)?)
    }

    pub fn params(&self) -> &SseParams<T> {
        self.params
    }

    pub fn sample(&self) -> &SlotSample<T> {
        &self.sample
    }

    pub fn k(&self) -> usize {
        self.queries.rows()
    }

    pub fn d_hat(&self) -> usize {
        self.params.d_hat()
    }

    pub fn logits(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        logits_against(x, &self.queries, self.params)
    }

    /// Slot-normalized attention `W` (n x K).
    pub fn weights(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        slot_normalize(&attention_weights(&self.logits(x)?))
    }

    pub fn init_state(&self, mode: AggMode) -> AggregateState<T> {
        AggregateState::init(mode, self.k(), self.d_hat())
    }

    pub fn encode_batch(&self, x: &Matrix<T>, mode: AggMode) -> Result<PartialEncoding<T>> {
        if x.rows() == 0 {
            return Err(Error::Parameter("cannot encode an empty batch".into()));
        }
        x.ensure_finite("set batch")?;
        let w = self.weights(x)?;
        let v = apply_linear(&self.params.proj_v, x)?;
        let (values, _) = pool_contributions(&w, &v, mode)?;
        Ok(PartialEncoding { values, count: x.rows() })
    }

    /// Streams `batches` through one state, in order.
    pub fn encode_batches<'a, I>(&self, batches: I, mode: AggMode) -> Result<Matrix<T>>
    where
        I: IntoIterator<Item = &'a Matrix<T>>,
    {
        let mut state = self.init_state(mode);
        for b in batches {
            state = state.merge(&self.encode_batch(b, mode)?)?;
        }
        state.finalize()
    }

    /// Encodes batches concurrently and reduces the states as a tree.
    pub fn encode_batches_parallel(&self, batches: &[Matrix<T>], mode: AggMode) -> Result<Matrix<T>> {
        let state = batches
            .par_iter()
            .map(|b| self.encode_batch(b, mode).and_then(|p| self.init_state(mode).merge(&p)))
            .try_reduce(|| self.init_state(mode), |a, b| a.merge_states(&b))?;
        state.finalize()
    }

    /// Single-pass reference path: the whole set as one batch.
    pub fn encode_full(&self, x: &Matrix<T>, mode: AggMode) -> Result<Matrix<T>> {
        if x.rows() == 0 {
            return Err(Error::EmptySet);
        }
        self.encode_batches(std::iter::once(x), mode)
    }
}

/// Free-function form of [`SlotSetEncoder::encode_batch`]; applies the slot
/// LayerNorm itself, so prefer the encoder when streaming many batches.
pub fn encode_batch<T: Scalar>(
    x: &Matrix<T>,
    sample: &SlotSample<T>,
    params: &SseParams<T>,
    mode: AggMode,
) -> Result<PartialEncoding<T>> {
    SlotSetEncoder::new(params, sample.clone())?.encode_batch(x, mode)
}

/// Encodes `x` in one pass with slots drawn from `seed`.
pub fn encode_full<T: Scalar>(x: &Matrix<T>, params: &SseParams<T>, mode: AggMode, seed: u64) -> Result<Matrix<T>> {
    SlotSetEncoder::seeded(params, seed)?.encode_full(x, mode)
}

/// Encodes a partitioned set batch by batch with slots drawn from `seed`.
pub fn encode_partitioned<T: Scalar>(
    batches: &[Matrix<T>],
    params: &SseParams<T>,
    mode: AggMode,
    seed: u64,
) -> Result<Matrix<T>> {
    if batches.iter().all(|b| b.rows() == 0) {
        return Err(Error::EmptySet);
    }
    let enc = SlotSetEncoder::seeded(params, seed)?;
    enc.encode_batches(batches.iter().filter(|b| b.rows() > 0), mode)
}
