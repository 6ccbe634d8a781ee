//! Synthetic centroid prediction: encode a class's support set and land on
//! the class centre.

use super::graph::Example;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CentroidTask {
    /// Classes per episode.
    pub way: usize,
    /// Support points per class.
    pub shot: usize,
    pub d: usize,
    /// Standard deviation of points around their centre.
    pub spread: f64,
    /// Standard deviation of the centres around the origin.
    pub separation: f64,
    /// Query points per class, used for nearest-centroid accuracy.
    pub queries: usize,
}

/// One draw of the task.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode<T> {
    /// `way x d`.
    pub centers: Matrix<T>,
    /// One `shot x d` matrix per class.
    pub support: Vec<Matrix<T>>,
    /// One `queries x d` matrix per class.
    pub query: Vec<Matrix<T>>,
}

impl CentroidTask {
    pub fn validate(&self) -> Result<()> {
        if self.way < 2 || self.shot < 1 || self.d < 1 {
            return Err(Error::Parameter(format!("centroid task needs way >= 2, shot >= 1, d >= 1 (got {}, {}, {})", self.way, self.shot, self.d)));
        }
        if !(self.spread >= 0.0 && self.spread.is_finite() && self.separation > 0.0 && self.separation.is_finite()) {
            return Err(Error::Parameter(format!("bad spread {} or separation {}", self.spread, self.separation)));
        }
        Ok(())
    }

    pub fn sample<T: Scalar>(&self, rng: &mut Rng) -> Result<Episode<T>> {
        self.validate()?;
        let centers: Matrix<T> = rng.standard_normals::<T>(self.way, self.d).scale(T::of(self.separation));
        let mut cloud = |c: usize, n: usize| -> Matrix<T> {
            let center = centers.row(c).to_vec();
            let mut m = rng.standard_normals::<T>(n, self.d).scale(T::of(self.spread));
            for r in 0..n {
                for (v, &ctr) in m.row_mut(r).iter_mut().zip(&center) {
                    *v += ctr;
                }
            }
            m
        };
        let support = (0..self.way).map(|c| cloud(c, self.shot)).collect();
        let query = (0..self.way).map(|c| cloud(c, self.queries)).collect();
        Ok(Episode { centers, support, query })
    }
}

impl<T: Scalar> Episode<T> {
    pub fn way(&self) -> usize {
        self.centers.rows()
    }

    pub fn target(&self, class: usize) -> Matrix<T> {
        Matrix::row_vector(self.centers.row(class))
    }

    /// One example per class using the first `size` support points, split
    /// into consecutive batches of at most `batch` rows.
    pub fn prefix_examples(&self, size: usize, batch: usize, seed: u64) -> Vec<Example<T>> {
        let batch = batch.max(1);
        (0..self.way())
            .map(|c| {
                let n = size.min(self.support[c].rows());
                let batches = (0..n)
                    .step_by(batch)
                    .map(|start| self.support[c].select_rows(&(start..(start + batch).min(n)).collect::<Vec<_>>()))
                    .collect();
                Example {
                    batches,
                    target: self.target(c),
                    seed,
                }
            })
            .collect()
    }

    /// One example per class on a random `size`-subset of the support set.
    pub fn subset_examples(&self, size: usize, rng: &mut Rng, seed: u64) -> Vec<Example<T>> {
        (0..self.way())
            .map(|c| {
                let idx = rng.subset(self.support[c].rows(), size.min(self.support[c].rows()));
                Example::single(self.support[c].select_rows(&idx), self.target(c), seed)
            })
            .collect()
    }

    /// Fraction of query points whose nearest predicted centre is their own
    /// class. `predicted` holds one `1 x d` row per class.
    pub fn nearest_centroid_accuracy(&self, predicted: &[Matrix<T>]) -> f64 {
        let mut hits = 0usize;
        let mut total = 0usize;
        for (c, q) in self.query.iter().enumerate() {
            for row in q.iter_rows() {
                let dist = |p: &Matrix<T>| -> T { row.iter().zip(p.data()).map(|(&a, &b)| (a - b) * (a - b)).sum() };
                let best = (0..predicted.len()).min_by(|&a, &b| dist(&predicted[a]).partial_cmp(&dist(&predicted[b])).unwrap_or(std::cmp::Ordering::Equal));
                hits += usize::from(best == Some(c));
                total += 1;
            }
        }
        if total == 0 {
            0.0
        } else {
            hits as f64 / total as f64
        }
    }
}
