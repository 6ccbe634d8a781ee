//! Dense row-major matrices and the handful of row-wise operators the
//! encoders are built from.
//!
//! All reductions accumulate in ascending index order starting from zero.
//! Nothing here is tuned for speed; it is tuned for reproducibility, so that
//! a result computed row by row is bitwise identical to the same rows
//! computed inside a larger matrix.

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return shape_err(
                "from_vec",
                format!("{} values for a {rows}x{cols} matrix", data.len()),
            );
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally sized rows. An empty slice yields a 0x0 matrix.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return shape_err("from_rows", format!("row {i} has {} values, expected {cols}", r.len()));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn filled(rows: usize, cols: usize, value: T) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, T::zero())
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = T::one();
        }
        m
    }

    /// A single-row matrix.
    pub fn row_vector(values: &[T]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }

    pub fn iter_rows(&self) -> impl Iterator<Item = &[T]> + '_ {
        (0..self.rows).map(move |r| self.row(r))
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Gathers rows by index. Doubles as row permutation and subset selection.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks matrices with equal column counts on top of each other.
    pub fn vstack(parts: &[&Matrix<T>]) -> Result<Self> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols {
                return shape_err("vstack", format!("{} columns vs {cols}", p.cols));
            }
            rows += p.rows;
            data.extend_from_slice(&p.data);
        }
        Ok(Self { rows, cols, data })
    }

    /// Same data, new shape.
    pub fn reshape(&self, rows: usize, cols: usize) -> Result<Self> {
        Self::from_vec(rows, cols, self.data.clone())
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, op: &'static str, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape() != other.shape() {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(), other.shape()));
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: T) -> Self {
        self.map(|x| x * c)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|x| !x.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::Numeric(format!(
                "{what} has a non-finite entry at ({}, {})",
                i / self.cols.max(1),
                i % self.cols.max(1)
            ))),
        }
    }

    /// Column sums in ascending row order, as a 1 x cols matrix.
    pub fn column_sums(&self) -> Self {
        let mut out = Self::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, &x) in out.data.iter_mut().zip(self.row(r)) {
                *o += x;
            }
        }
        out
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
    }
}

/// `a · b`, accumulating over the inner index in ascending order.
pub fn matmul<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.rows {
        return shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for j in 0..b.cols {
            let mut acc = T::zero();
            for k in 0..a.cols {
                acc += a.data[i * a.cols + k] * b.data[k * b.cols + j];
            }
            out.data[i * b.cols + j] = acc;
        }
    }
    Ok(out)
}

/// `a · bᵀ` without materializing the transpose.
pub fn matmul_nt<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.cols != b.cols {
        return shape_err("matmul_nt", format!("{:?} x {:?}ᵀ", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.rows, b.rows);
    for i in 0..a.rows {
        let ar = a.row(i);
        for j in 0..b.rows {
            let br = b.row(j);
            let mut acc = T::zero();
            for k in 0..a.cols {
                acc += ar[k] * br[k];
            }
            out.data[i * b.rows + j] = acc;
        }
    }
    Ok(out)
}

/// `aᵀ · b`, accumulating over rows of `a` and `b` in ascending order.
pub fn matmul_tn<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    if a.rows != b.rows {
        return shape_err("matmul_tn", format!("{:?}ᵀ x {:?}", a.shape(), b.shape()));
    }
    let mut out = Matrix::zeros(a.cols, b.cols);
    for r in 0..a.rows {
        let ar = a.row(r);
        let br = b.row(r);
        for (i, &x) in ar.iter().enumerate() {
            let orow = &mut out.data[i * b.cols..(i + 1) * b.cols];
            for (o, &y) in orow.iter_mut().zip(br) {
                *o += x * y;
            }
        }
    }
    Ok(out)
}

/// A row-wise affine map `x ↦ x·W (+ b)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearMap<T> {
    /// `d_in x d_out`
    pub weight: Matrix<T>,
    /// `1 x d_out`
    pub bias: Option<Matrix<T>>,
}

impl<T: Scalar> LinearMap<T> {
    pub fn new(weight: Matrix<T>, bias: Option<Matrix<T>>) -> Result<Self> {
        if let Some(b) = &bias {
            if b.shape() != (1, weight.cols) {
                return shape_err(
                    "LinearMap::new",
                    format!("bias {:?} for weight {:?}", b.shape(), weight.shape()),
                );
            }
        }
        Ok(Self { weight, bias })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            weight: Matrix::identity(d),
            bias: None,
        }
    }

    #[inline]
    pub fn d_in(&self) -> usize {
        self.weight.rows
    }

    #[inline]
    pub fn d_out(&self) -> usize {
        self.weight.cols
    }

    pub fn apply(&self, x: &Matrix<T>) -> Result<Matrix<T>> {
        apply_linear(self, x)
    }
}

pub fn apply_linear<T: Scalar>(m: &LinearMap<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    if x.cols != m.d_in() {
        return shape_err(
            "apply_linear",
            format!("input has {} columns, map expects {}", x.cols, m.d_in()),
        );
    }
    let mut out = matmul(x, &m.weight)?;
    if let Some(b) = &m.bias {
        add_row_broadcast_in_place(&mut out, b);
    }
    Ok(out)
}

pub(crate) fn add_row_broadcast_in_place<T: Scalar>(m: &mut Matrix<T>, b: &Matrix<T>) {
    for r in 0..m.rows {
        for (o, &x) in m.row_mut(r).iter_mut().zip(&b.data) {
            *o += x;
        }
    }
}

pub const DEFAULT_LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNormParams<T> {
    /// `1 x h`
    pub gain: Matrix<T>,
    /// `1 x h`
    pub bias: Matrix<T>,
    pub epsilon: T,
}

impl<T: Scalar> LayerNormParams<T> {
    pub fn new(gain: Matrix<T>, bias: Matrix<T>, epsilon: T) -> Result<Self> {
        if gain.rows != 1 || bias.shape() != gain.shape() {
            return shape_err(
                "LayerNormParams::new",
                format!("gain {:?}, bias {:?}", gain.shape(), bias.shape()),
            );
        }
        if !(epsilon > T::zero()) {
            return Err(Error::Parameter(format!("layer norm epsilon must be positive, got {epsilon}")));
        }
        Ok(Self { gain, bias, epsilon })
    }

    /// Unit gain, zero bias, default epsilon.
    pub fn standard(h: usize) -> Self {
        Self {
            gain: Matrix::filled(1, h, T::one()),
            bias: Matrix::zeros(1, h),
            epsilon: T::of(DEFAULT_LAYER_NORM_EPS),
        }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.gain.cols
    }
}

/// Per-row moments: mean and population variance (divisor = cols).
pub(crate) fn row_moments<T: Scalar>(row: &[T]) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mut sum = T::zero();
    for &x in row {
        sum += x;
    }
    let mean = sum / n;
    let mut sq = T::zero();
    for &x in row {
        let c = x - mean;
        sq += c * c;
    }
    (mean, sq / n)
}

pub fn layer_norm<T: Scalar>(p: &LayerNormParams<T>, x: &Matrix<T>) -> Result<Matrix<T>> {
    if x.cols != p.dim() {
        return shape_err("layer_norm", format!("input has {} columns, norm expects {}", x.cols, p.dim()));
    }
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let row = x.row(r);
        let (mean, var) = row_moments(row);
        let inv_std = T::one() / (var + p.epsilon).sqrt();
        for (c, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = (row[c] - mean) * inv_std * p.gain.data[c] + p.bias.data[c];
        }
    }
    Ok(out)
}

/// Logistic function, branching on sign so neither tail overflows.
#[inline]
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Scalar>(x: &Matrix<T>) -> Matrix<T> {
    x.map(sigmoid_scalar)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random(rng: &mut Rng, r: usize, c: usize) -> Matrix<f64> {
        rng.standard_normals(r, c)
    }

    fn naive_matmul(a: &Matrix<f64>, b: &Matrix<f64>) -> Matrix<f64> {
        let mut out = vec![0.0; a.rows() * b.cols()];
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                out[i * b.cols() + j] = s;
            }
        }
        Matrix::from_vec(a.rows(), b.cols(), out).unwrap()
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]).unwrap();
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
        let z = Matrix::zeros(2, 1);
        assert_eq!(matmul(&a, &z).unwrap(), Matrix::zeros(2, 1));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(7);
        let a = random(&mut rng, 7, 5);
        let b = random(&mut rng, 5, 3);
        assert_eq!(matmul(&a, &b).unwrap(), naive_matmul(&a, &b));
        assert_eq!(matmul_nt(&a, &b.transpose()).unwrap(), naive_matmul(&a, &b));
        assert_eq!(matmul_tn(&a.transpose(), &b).unwrap(), naive_matmul(&a, &b));
    }

    #[test]
    fn matmul_shape_error() {
        let a = Matrix::<f64>::zeros(2, 3);
        assert!(matches!(matmul(&a, &a), Err(Error::Shape { .. })));
    }

    #[test]
    fn matmul_associative_within_tolerance() {
        let mut rng = Rng::new(11);
        let a = random(&mut rng, 6, 4);
        let b = random(&mut rng, 4, 5);
        let c = random(&mut rng, 5, 3);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        let scale = left.max_abs().max(1.0);
        for (x, y) in left.data().iter().zip(right.data()) {
            assert!((x - y).abs() <= 1e-10 * scale);
        }
    }

    #[test]
    fn linear_identity_and_bias() {
        let mut rng = Rng::new(3);
        let x = random(&mut rng, 4, 3);
        assert_eq!(LinearMap::identity(3).apply(&x).unwrap(), x);

        let b = Matrix::row_vector(&[1.0, -2.0]);
        let m = LinearMap::new(random(&mut rng, 3, 2), Some(b.clone())).unwrap();
        let out = m.apply(&Matrix::zeros(5, 3)).unwrap();
        for r in out.iter_rows() {
            assert_eq!(r, b.row(0));
        }
    }

    #[test]
    fn linear_is_row_local() {
        let mut rng = Rng::new(5);
        let x = random(&mut rng, 9, 4);
        let m = LinearMap::new(random(&mut rng, 4, 3), Some(random(&mut rng, 1, 3))).unwrap();
        let perm = [3, 0, 8, 1, 5, 7, 2, 6, 4];
        let a = m.apply(&x.select_rows(&perm)).unwrap();
        let b = m.apply(&x).unwrap().select_rows(&perm);
        assert_eq!(a, b);
    }

    #[test]
    fn layer_norm_cases() {
        let p = LayerNormParams::<f64>::standard(4);
        let out = layer_norm(&p, &Matrix::filled(1, 4, 3.25)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        let mut tiny = LayerNormParams::<f64>::standard(2);
        tiny.epsilon = 1e-300;
        let out = layer_norm(&tiny, &Matrix::row_vector(&[-1.0, 1.0])).unwrap();
        assert!((out.get(0, 0) + 1.0).abs() < 1e-12 && (out.get(0, 1) - 1.0).abs() < 1e-12);

        assert!(LayerNormParams::new(Matrix::filled(1, 2, 1.0), Matrix::zeros(1, 2), 0.0).is_err());
        assert!(layer_norm(&p, &Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn layer_norm_moments() {
        let mut rng = Rng::new(19);
        let x = random(&mut rng, 4, 8).scale(3.0);
        let mut p = LayerNormParams::<f64>::standard(8);
        p.epsilon = 1e-300;
        let out = layer_norm(&p, &x).unwrap();
        for r in out.iter_rows() {
            let mean: f64 = r.iter().sum::<f64>() / 8.0;
            let var: f64 = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10);
            assert!((var - 1.0).abs() < 1e-10);
        }
        // Affine part applied after normalization.
        p.gain = Matrix::filled(1, 8, 2.0);
        p.bias = Matrix::filled(1, 8, 0.5);
        let affine = layer_norm(&p, &x).unwrap();
        for (a, o) in affine.data().iter().zip(out.data()) {
            assert!((a - (2.0 * o + 0.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_is_row_local() {
        let mut rng = Rng::new(23);
        let x = random(&mut rng, 5, 6);
        let p = LayerNormParams::new(random(&mut rng, 1, 6), random(&mut rng, 1, 6), 1e-5).unwrap();
        let perm = [4, 2, 0, 1, 3];
        assert_eq!(
            layer_norm(&p, &x.select_rows(&perm)).unwrap(),
            layer_norm(&p, &x).unwrap().select_rows(&perm)
        );
    }

    #[test]
    fn sigmoid_cases() {
        assert_eq!(sigmoid_scalar(0.0f64), 0.5);
        for &x in &[0.1f64, 1.0, 3.7, 17.0, 40.0, 1e-9] {
            let s = sigmoid_scalar(x);
            let t = sigmoid_scalar(-x);
            assert!((t - (1.0 - s)).abs() <= 1e-15, "x = {x}");
        }
        for &x in &[100.0f64, -100.0, 800.0, -800.0] {
            let s = sigmoid_scalar(x);
            assert!(s.is_finite() && (0.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn column_sums_ascending() {
        let m = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
        assert_eq!(m.column_sums(), Matrix::row_vector(&[9.0, 12.0]));
    }
}
