//! Lloyd's K-means with k-means++ seeding.

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Matrix;

#[derive(Clone, Debug)]
pub struct KMeansFit<T> {
    pub centroids: Matrix<T>,
    pub assignments: Vec<usize>,
    pub inertia: T,
    pub iterations: usize,
}

fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lower index.
pub fn nearest<T: Scalar>(point: &[T], centroids: &Matrix<T>) -> (usize, T) {
    let mut best = (0, T::infinity());
    for c in 0..centroids.rows() {
        let d = sq_dist(point, centroids.row(c));
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn seed_centroids<T: Scalar>(data: &Matrix<T>, k: usize, rng: &mut rng::Rng) -> Matrix<T> {
    let n = data.rows();
    let mut chosen = vec![rng.random_range(0..n)];
    let mut dist: Vec<T> = (0..n).map(|i| sq_dist(data.row(i), data.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().map(|d| d.as_f64()).sum();
        let next = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (i, d) in dist.iter().enumerate() {
                u -= d.as_f64();
                if u < 0.0 && d.as_f64() > 0.0 {
                    pick = i;
                    break;
                }
            }
            if dist[pick] == T::zero() {
                // Rounding walked past the last positive weight.
                pick = dist.iter().rposition(|d| *d > T::zero()).unwrap_or(pick);
            }
            pick
        } else {
            // Every point coincides with a chosen centroid.
            (0..n).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, d) in dist.iter_mut().enumerate() {
            let nd = sq_dist(data.row(i), data.row(next));
            if nd < *d {
                *d = nd;
            }
        }
    }
    let d = data.cols();
    let mut centroids = Matrix::zeros(k, d);
    for (c, &i) in chosen.iter().enumerate() {
        centroids.row_mut(c).copy_from_slice(data.row(i));
    }
    centroids
}

/// Clusters the rows of `data` into `k` groups.
///
/// Stops when assignments no longer change or after `max_iter` Lloyd steps.
/// Empty clusters keep their previous centroid.
pub fn kmeans<T: Scalar>(data: &Matrix<T>, k: usize, max_iter: usize, seed: u64) -> Result<KMeansFit<T>> {
    let n = data.rows();
    if n == 0 {
        return Err(Error::Degenerate("k-means on an empty data set".into()));
    }
    if k == 0 || k > n {
        return Err(Error::Config(format!("cannot form {k} clusters from {n} points")));
    }
    let mut rng = rng::sub_stream(seed, rng::stream::KMEANS);
    let mut centroids = seed_centroids(data, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut iterations = 0;
    let d = data.cols();
    for _ in 0..max_iter {
        iterations += 1;
        let mut changed = false;
        for (i, a) in assignments.iter_mut().enumerate() {
            let (c, _) = nearest(data.row(i), &centroids);
            if *a != c {
                *a = c;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = Matrix::<T>::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, &v) in sums.row_mut(a).iter_mut().zip(data.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = T::one() / T::of_usize(counts[c]);
                for (dst, &s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
            }
        }
    }
    let inertia = (0..n)
        .map(|i| sq_dist(data.row(i), centroids.row(assignments[i])))
        .sum();
    Ok(KMeansFit {
        centroids,
        assignments,
        inertia,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cluster_labels_everything_zero() {
        let data = Matrix::from_fn(7, 2, |r, c| (r * 3 + c) as f64);
        let fit = kmeans(&data, 1, 100, 0).unwrap();
        assert!(fit.assignments.iter().all(|&a| a == 0));
    }

    #[test]
    fn k_distinct_points_map_bijectively() {
        let data = Matrix::from_fn(5, 3, |r, c| (r as f64).powi(2) + c as f64 * 0.1);
        let fit = kmeans(&data, 5, 100, 3).unwrap();
        let mut sorted = fit.assignments.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        assert_eq!(fit.inertia, 0.0);
    }

    #[test]
    fn separated_blobs_match_brute_force_partition() {
        // Two planted blobs of ten 2-D points each.
        let mut r = crate::rng::sub_stream(11, "blobs");
        let data = Matrix::from_fn(20, 2, |i, _| {
            let centre = if i < 10 { -5.0 } else { 5.0 };
            centre + r.random_range(-1.0..1.0)
        });
        let fit = kmeans(&data, 2, 100, 1).unwrap();
        // Oracle: nearest-centroid assignment under the planted means.
        let planted: Vec<usize> = (0..20).map(|i| usize::from(i >= 10)).collect();
        let mut means = Matrix::<f64>::zeros(2, 2);
        for (i, &p) in planted.iter().enumerate() {
            for c in 0..2 {
                let v = means.get(p, c) + data.get(i, c) / 10.0;
                means.set(p, c, v);
            }
        }
        let oracle: Vec<usize> = (0..20).map(|i| nearest(data.row(i), &means).0).collect();
        assert_eq!(oracle, planted);
        let same = fit.assignments == oracle;
        let swapped = fit.assignments.iter().zip(&oracle).all(|(a, b)| a != b);
        assert!(same || swapped, "{:?}", fit.assignments);
    }

    #[test]
    fn rejects_impossible_requests() {
        let data = Matrix::<f64>::zeros(3, 2);
        assert!(kmeans(&data, 4, 10, 0).is_err());
        assert!(kmeans(&Matrix::<f64>::zeros(0, 2), 1, 10, 0).is_err());
    }

    #[test]
    fn deterministic_given_seed() {
        let data = Matrix::from_fn(50, 3, |r, c| ((r * 7 + c * 13) % 11) as f64);
        let a = kmeans(&data, 4, 100, 9).unwrap();
        let b = kmeans(&data, 4, 100, 9).unwrap();
        assert_eq!(a.assignments, b.assignments);
        assert_eq!(a.centroids, b.centroids);
    }
}
