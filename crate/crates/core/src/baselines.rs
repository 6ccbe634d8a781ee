//! Reference encoders.
//!
//! [`DeepSets`] pools row-wise features and is mini-batch consistent.
//! [`SoftmaxPool`] is a single attention-pooling block whose softmax runs
//! over the elements, so its output depends on which elements share a
//! batch; it exists to show what breaks when that normalizer is present.

use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::sse::{AggMode, AggregateState, PartialEncoding};
use crate::tensor::{apply_linear, matmul, matmul_nt, LinearMap, Matrix};
use std::fmt;
use std::str::FromStr;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
}

impl Activation {
    #[inline]
    pub fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Identity => x,
            Activation::Relu => {
                if x > T::zero() {
                    x
                } else {
                    T::zero()
                }
            }
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Relu => "relu",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::Parameter(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer<T> {
    pub map: LinearMap<T>,
    pub activation: Activation,
}

impl<T: Scalar> DenseLayer<T> {
    pub fn init(rng: &mut Rng, d_in: usize, d_out: usize, activation: Activation) -> Self {
        let scale = T::of((2.0 / d_in as f64).sqrt());
        Self {
            map: LinearMap {
                weight: rng.standard_normals::<T>(d_in, d_out).scale(scale),
                bias: Some(Matrix::zeros(1, d_out)),
            },
            activation,
        }
    }

    pub fn forward(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        let act = self.activation;
        Ok(apply_linear(&self.map, x)?.map(|v| act.apply(v)))
    }
}

fn run_layers<T: Scalar>(layers: &[DenseLayer<T>], x: &Matrix<T>) -> Result<Matrix<T>> {
    let mut cur = x.clone();
    for l in layers {
        cur = l.forward(&cur)?;
    }
    Ok(cur)
}

fn check_chain<T: Scalar>(layers: &[DenseLayer<T>], d_in: usize, what: &str) -> Result<usize> {
    let mut d = d_in;
    for (i, l) in layers.iter().enumerate() {
        if l.map.d_in() != d {
            return shape_err("DeepSets", format!("{what} layer {i} expects {} inputs, receives {d}", l.map.d_in()));
        }
        d = l.map.d_out();
    }
    Ok(d)
}

/// Pools the rows of `features` (n x c) into a `1 x c` row; `Mean` is left
/// undivided. Also returns the winning row per column for `Max`/`Min`.
pub(crate) fn pool_rows<T: Scalar>(features: &Matrix<T>, mode: AggMode) -> (Matrix<T>, Option<Vec<usize>>) {
    match mode {
        AggMode::Sum | AggMode::Mean => (features.column_sums(), None),
        AggMode::Max | AggMode::Min => {
            let mut out = Matrix::filled(1, features.cols(), mode.identity::<T>());
            let mut arg = vec![0usize; features.cols()];
            for (i, row) in features.iter_rows().enumerate() {
                for (c, &x) in row.iter().enumerate() {
                    let cur = out.get(0, c);
                    let better = i == 0 || if mode == AggMode::Max { x > cur } else { x < cur };
                    if better {
                        out.set(0, c, x);
                        arg[c] = i;
                    }
                }
            }
            (out, Some(arg))
        }
    }
}

/// `ρ(pool(φ(x_1), ..., φ(x_n)))` with row-wise `φ`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeepSets<T> {
    pub phi: Vec<DenseLayer<T>>,
    pub pool: AggMode,
    pub rho: Vec<DenseLayer<T>>,
}

impl<T: Scalar> DeepSets<T> {
    pub fn new(d: usize, phi: Vec<DenseLayer<T>>, pool: AggMode, rho: Vec<DenseLayer<T>>) -> Result<Self> {
        let ds = Self { phi, pool, rho };
        ds.validate(d)?;
        Ok(ds)
    }

    /// Validates the layer chain for inputs of width `d`; returns the output width.
    pub fn validate(&self, d: usize) -> Result<usize> {
        let feat = check_chain(&self.phi, d, "phi")?;
        check_chain(&self.rho, feat, "rho")
    }

    /// `φ = [Linear(d, width) → ReLU, Linear(width, d_out)]`, no `ρ`.
    pub fn init(rng: &mut Rng, d: usize, width: usize, d_out: usize, pool: AggMode) -> Self {
        Self {
            phi: vec![DenseLayer::init(rng, d, width, Activation::Relu), DenseLayer::init(rng, width, d_out, Activation::Identity)],
            pool,
            rho: Vec::new(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.phi.first().or(self.rho.first()).map_or(0, |l| l.map.d_in())
    }

    pub fn feature_dim(&self) -> usize {
        self.phi.last().map_or(self.input_dim(), |l| l.map.d_out())
    }

    pub fn output_dim(&self) -> usize {
        self.rho.last().map_or(self.feature_dim(), |l| l.map.d_out())
    }

    pub fn features(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        run_layers(&self.phi, x)
    }

    pub fn init_state(&self) -> AggregateState<T> {
        AggregateState::init(self.pool, 1, self.feature_dim())
    }

    pub fn encode_batch(&self, x: &Matrix<T>) -> Result<PartialEncoding<T>> {
        if x.rows() == 0 {
            return Err(Error::Parameter("cannot encode an empty batch".into()));
        }
        x.ensure_finite("set batch")?;
        let (values, _) = pool_rows(&self.features(x)?, self.pool);
        Ok(PartialEncoding { values, count: x.rows() })
    }

    /// Applies `ρ` to a finalized pooled state.
    pub fn head(&self, state: &AggregateState<T>) -> Result<Matrix<T>> {
        run_layers(&self.rho, &state.finalize()?)
    }

    /// Streaming evaluation over batches (empty batches skipped).
    pub fn encode_stream<'a, I>(&self, batches: I) -> Result<Matrix<T>>
    where
        I: IntoIterator<Item = &'a Matrix<T>>,
    {
        let mut state = self.init_state();
        for b in batches.into_iter().filter(|b| b.rows() > 0) {
            state = state.merge(&self.encode_batch(b)?)?;
        }
        self.head(&state)
    }

    pub fn encode(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        self.encode_stream(std::iter::once(x))
    }
}

/// Free-function alias for [`DeepSets::encode_stream`].
pub fn deepsets_encode<T: Scalar>(batches: &[Matrix<T>], params: &DeepSets<T>) -> Result<Matrix<T>> {
    params.encode_stream(batches)
}

/// One attention-pooling block with learned queries and a softmax over elements.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxPool<T> {
    /// `K x d̂` learned seed vectors.
    pub query: Matrix<T>,
    pub proj_k: LinearMap<T>,
    pub proj_v: LinearMap<T>,
}

impl<T: Scalar> SoftmaxPool<T> {
    pub fn new(query: Matrix<T>, proj_k: LinearMap<T>, proj_v: LinearMap<T>) -> Result<Self> {
        let p = Self { query, proj_k, proj_v };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let dh = self.query.cols();
        if self.proj_k.d_out() != dh || self.proj_v.d_out() != dh || self.proj_k.d_in() != self.proj_v.d_in() || self.query.rows() == 0 {
            return shape_err(
                "SoftmaxPool",
                format!(
                    "query {:?}, k {:?}, v {:?}",
                    self.query.shape(),
                    self.proj_k.weight.shape(),
                    self.proj_v.weight.shape()
                ),
            );
        }
        Ok(())
    }

    pub fn init(rng: &mut Rng, d: usize, d_hat: usize, k: usize) -> Self {
        let s = T::of(1.0 / (d as f64).sqrt());
        Self {
            query: rng.standard_normals(k, d_hat),
            proj_k: LinearMap {
                weight: rng.standard_normals::<T>(d, d_hat).scale(s),
                bias: None,
            },
            proj_v: LinearMap {
                weight: rng.standard_normals::<T>(d, d_hat).scale(s),
                bias: None,
            },
        }
    }

    pub fn input_dim(&self) -> usize {
        self.proj_k.d_in()
    }

    pub fn d_hat(&self) -> usize {
        self.query.cols()
    }

    pub fn k(&self) -> usize {
        self.query.rows()
    }

    pub(crate) fn logit_scale(&self) -> T {
        T::one() / T::of(self.d_hat() as f64).sqrt()
    }

    /// Softmax over elements of `query · k(X)ᵀ / √d̂` (K x n).
    pub fn attention(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        if x.rows() == 0 {
            return Err(Error::EmptySet);
        }
        let keys = apply_linear(&self.proj_k, x)?;
        let logits = matmul_nt(&self.query, &keys)?.scale(self.logit_scale());
        Ok(softmax_rows(&logits))
    }
}

/// Row-wise softmax with the row maximum subtracted first.
pub fn softmax_rows<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let mut total = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v = *v / total;
        }
    }
    out
}

/// Attention-pools the whole set in one pass.
pub fn softmax_pool_full<T: Scalar>(x: &Matrix<T>, params: &SoftmaxPool<T>) -> Result<Matrix<T>> {
    let attn = params.attention(x)?;
    matmul(&attn, &apply_linear(&params.proj_v, x)?)
}

/// Pools each partition independently and combines the results with
/// `combine`; `Mean` averages the per-partition outputs. Not equal to
/// [`softmax_pool_full`] in general.
pub fn softmax_pool_minibatch<T: Scalar>(partitions: &[Matrix<T>], params: &SoftmaxPool<T>, combine: AggMode) -> Result<Matrix<T>> {
    let mut state = AggregateState::init(combine, params.k(), params.d_hat());
    for part in partitions.iter().filter(|p| p.rows() > 0) {
        state = state.merge(&PartialEncoding {
            values: softmax_pool_full(part, params)?,
            count: 1,
        })?;
    }
    state.finalize()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::relative_discrepancy;

    #[test]
    fn linear_deepsets_is_column_sum() {
        let mut rng = Rng::new(1);
        let ds = DeepSets::new(
            3,
            vec![DenseLayer {
                map: LinearMap::identity(3),
                activation: Activation::Identity,
            }],
            AggMode::Sum,
            vec![],
        )
        .unwrap();
        let x: Matrix<f64> = rng.standard_normals(12, 3);
        assert_eq!(ds.encode(&x).unwrap(), x.column_sums());
    }

    #[test]
    fn deepsets_partitions_agree() {
        let mut rng = Rng::new(2);
        let x: Matrix<f64> = rng.standard_normals(30, 4);
        for mode in AggMode::ALL {
            let ds = DeepSets::init(&mut rng, 4, 8, 3, mode);
            let full = ds.encode(&x).unwrap();
            let groups = crate::partition::random_partition(30, 4, &mut rng);
            let part = deepsets_encode(&crate::partition::split_rows(&x, &groups), &ds).unwrap();
            if mode.is_exact() {
                assert_eq!(part, full);
            } else {
                assert!(relative_discrepancy(&part, &full) <= 1e-12);
            }
        }
    }

    #[test]
    fn deepsets_rejects_bad_chain_and_empty() {
        let mut rng = Rng::new(3);
        let ds = DeepSets::<f64>::init(&mut rng, 4, 8, 3, AggMode::Sum);
        assert!(ds.validate(5).is_err());
        assert_eq!(ds.encode_stream(std::iter::empty()), Err(Error::EmptySet));
    }

    #[test]
    fn softmax_singleton_and_uniform() {
        let mut rng = Rng::new(4);
        let p = SoftmaxPool::<f64>::init(&mut rng, 3, 4, 2);
        let x: Matrix<f64> = rng.standard_normals(1, 3);
        let out = softmax_pool_full(&x, &p).unwrap();
        let v = apply_linear(&p.proj_v, &x).unwrap();
        for r in out.iter_rows() {
            assert_eq!(r, v.row(0));
        }

        let same = Matrix::from_rows(&vec![x.row(0); 5]).unwrap();
        let attn = p.attention(&same).unwrap();
        assert!(attn.data().iter().all(|&a| (a - 0.2).abs() < 1e-15));
        let out = softmax_pool_full(&same, &p).unwrap();
        for r in out.iter_rows() {
            for (a, b) in r.iter().zip(v.row(0)) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = Rng::new(5);
        let p = SoftmaxPool::<f64>::init(&mut rng, 3, 4, 3);
        let x: Matrix<f64> = rng.standard_normals(17, 3).scale(3.0);
        for r in p.attention(&x).unwrap().iter_rows() {
            assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-15);
        }
    }

    #[test]
    fn softmax_minibatch_trivial_partition_and_violation() {
        let mut rng = Rng::new(6);
        let p = SoftmaxPool::<f64>::init(&mut rng, 3, 4, 2);
        let x: Matrix<f64> = rng.standard_normals(20, 3);
        let full = softmax_pool_full(&x, &p).unwrap();
        for mode in AggMode::ALL {
            assert_eq!(softmax_pool_minibatch(std::slice::from_ref(&x), &p, mode).unwrap(), full);
        }
        let parts = crate::partition::split_rows(&x, &[(0..6).collect(), (6..20).collect()]);
        let split = softmax_pool_minibatch(&parts, &p, AggMode::Mean).unwrap();
        assert!(relative_discrepancy(&split, &full) > 1e-3);

        let same = Matrix::from_rows(&vec![x.row(0); 9]).unwrap();
        let parts = crate::partition::split_rows(&same, &[(0..2).collect(), (2..9).collect()]);
        let split = softmax_pool_minibatch(&parts, &p, AggMode::Mean).unwrap();
        assert!(relative_discrepancy(&split, &softmax_pool_full(&same, &p).unwrap()) <= 1e-14);
    }
}
