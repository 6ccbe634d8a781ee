//! Seeded, platform-independent random numbers.
//!
//! Uniforms come from ChaCha8 (a counter-based stream cipher, so the
//! sequence is fixed by the seed on every platform). Normals use the
//! Box–Muller transform with both outputs consumed in order.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Clone, Debug)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
    spare: Option<f64>,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on the open interval (0, 1).
    pub fn uniform(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `0..n`. `n` must be nonzero.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.uniform() * n as f64) as usize).min(n - 1)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * std::f64::consts::PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// A `rows x cols` matrix of standard normals, drawn in row-major order.
    pub fn standard_normals<T: Scalar>(&mut self, rows: usize, cols: usize) -> Matrix<T> {
        let data = (0..rows * cols).map(|_| T::of(self.standard_normal())).collect();
        Matrix::from_vec(rows, cols, data).expect("length matches shape")
    }

    pub fn uniform_matrix<T: Scalar>(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix<T> {
        let data = (0..rows * cols).map(|_| T::of(lo + (hi - lo) * self.uniform())).collect();
        Matrix::from_vec(rows, cols, data).expect("length matches shape")
    }

    pub fn shuffle<E>(&mut self, items: &mut [E]) {
        items.shuffle(&mut self.inner);
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    /// `k` distinct indices from `0..n`, in random order.
    pub fn subset(&mut self, n: usize, k: usize) -> Vec<usize> {
        rand::seq::index::sample(&mut self.inner, n, k).into_vec()
    }
}

/// Draws `rows` i.i.d. rows from `N(mu, diag(sigma²))`.
///
/// Entry `(r, c)` is `mu[c] + sigma[c] * z` with `z` the next standard
/// normal in row-major order.
pub fn sample_gaussian<T: Scalar>(
    rng: &mut Rng,
    rows: usize,
    cols: usize,
    mu: &[T],
    sigma: &[T],
) -> Result<Matrix<T>> {
    if mu.len() != cols || sigma.len() != cols {
        return Err(Error::Shape {
            op: "sample_gaussian",
            detail: format!("mu {} / sigma {} for {cols} columns", mu.len(), sigma.len()),
        });
    }
    if let Some(s) = sigma.iter().find(|s| !(**s > T::zero()) || !s.is_finite()) {
        return Err(Error::Parameter(format!("sigma must be positive and finite, got {s}")));
    }
    let mut out = Matrix::zeros(rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let z = T::of(rng.standard_normal());
            out.set(r, c, mu[c] + sigma[c] * z);
        }
    }
    Ok(out)
}
