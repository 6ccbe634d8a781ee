//! Random partitions of a set and the discrepancy measure used to compare
//! partitioned encodings with single-pass ones.

use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

/// Splits `0..n` into `p` nonempty groups: the indices are shuffled and cut
/// at `p - 1` distinct random points. Requires `1 <= p <= n`.
pub fn random_partition(n: usize, p: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    assert!(p >= 1 && p <= n, "need 1 <= p <= n (p = {p}, n = {n})");
    let order = rng.permutation(n);
    let mut cuts = rng.subset(n - 1, p - 1);
    cuts.iter_mut().for_each(|c| *c += 1);
    cuts.sort_unstable();
    cuts.push(n);
    let mut groups = Vec::with_capacity(p);
    let mut start = 0;
    for end in cuts {
        groups.push(order[start..end].to_vec());
        start = end;
    }
    groups
}

/// `count` partitions of `0..n`: the trivial one, the all-singletons one,
/// and random ones with a uniformly drawn number of parts.
pub fn partition_suite(n: usize, count: usize, rng: &mut Rng) -> Vec<Vec<Vec<usize>>> {
    let mut out = Vec::with_capacity(count.max(2));
    out.push(vec![(0..n).collect()]);
    if n > 1 || count > 1 {
        out.push((0..n).map(|i| vec![i]).collect());
    }
    while out.len() < count {
        let p = 1 + rng.below(n);
        out.push(random_partition(n, p, rng));
    }
    out
}

/// Materializes the batches of a partition.
pub fn split_rows<T: Scalar>(x: &Matrix<T>, groups: &[Vec<usize>]) -> Vec<Matrix<T>> {
    groups.iter().map(|g| x.select_rows(g)).collect()
}

/// `max |a - b| / (1 + |b|)` over all entries, with `b` the reference.
/// Infinite when the shapes differ or a value is NaN.
pub fn relative_discrepancy<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.to_f64_lossy(), y.to_f64_lossy());
            if x == y {
                0.0
            } else {
                let d = (x - y).abs() / (1.0 + y.abs());
                if d.is_nan() {
                    f64::INFINITY
                } else {
                    d
                }
            }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partitions_cover_every_index_once() {
        let mut rng = Rng::new(5);
        for n in [1usize, 2, 7, 50] {
            for p in [1, n / 2 + 1, n] {
                let groups = random_partition(n, p, &mut rng);
                assert_eq!(groups.len(), p);
                assert!(groups.iter().all(|g| !g.is_empty()));
                let mut all: Vec<usize> = groups.concat();
                all.sort_unstable();
                assert_eq!(all, (0..n).collect::<Vec<_>>());
            }
        }
    }

    #[test]
    fn suite_contains_extremes() {
        let suite = partition_suite(9, 10, &mut Rng::new(1));
        assert_eq!(suite.len(), 10);
        assert_eq!(suite[0].len(), 1);
        assert_eq!(suite[1].len(), 9);
    }

    #[test]
    fn discrepancy_measure() {
        let a = Matrix::row_vector(&[1.0, f64::INFINITY]);
        assert_eq!(relative_discrepancy(&a, &a), 0.0);
        let b = Matrix::row_vector(&[1.5, f64::INFINITY]);
        assert_eq!(relative_discrepancy(&b, &a), 0.25);
        assert_eq!(relative_discrepancy(&Matrix::<f64>::zeros(1, 1), &a), f64::INFINITY);
    }
}
