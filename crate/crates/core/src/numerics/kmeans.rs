//! Lloyd's K-means with D²-weighted (k-means++) seeding.

use super::{squared_distance, Matrix, NumericsError, Result, Rng, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult<T> {
    pub centroids: Matrix<T>,
    pub assignments: Vec<usize>,
    /// Within-cluster sum of squares after seeding and after every iteration.
    pub wcss_history: Vec<f64>,
}

impl<T: Scalar> KMeansResult<T> {
    pub fn wcss(&self) -> f64 {
        *self.wcss_history.last().unwrap_or(&0.0)
    }
}

/// Index of the closest row of `centroids` to `point`; ties go to the lowest index.
pub fn nearest_row<T: Scalar>(centroids: &Matrix<T>, point: &[T]) -> (usize, T) {
    let mut best = 0;
    let mut best_d = T::infinity();
    for k in 0..centroids.rows() {
        let d = squared_distance(centroids.row(k), point);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    (best, best_d)
}

fn assign<T: Scalar>(points: &Matrix<T>, centroids: &Matrix<T>, out: &mut [usize]) -> f64 {
    let mut wcss = 0.0;
    for (i, slot) in out.iter_mut().enumerate() {
        let (k, d) = nearest_row(centroids, points.row(i));
        *slot = k;
        wcss += d.as_f64();
    }
    wcss
}

fn seed_centroids<T: Scalar>(points: &Matrix<T>, k: usize, rng: &mut Rng) -> Matrix<T> {
    let n = points.rows();
    let mut centroids = Matrix::zeros(k, points.cols());
    let first = rng.below(n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut d2: Vec<f64> = (0..n)
        .map(|i| squared_distance(points.row(i), points.row(first)).as_f64())
        .collect();
    let mut chosen = vec![false; n];
    chosen[first] = true;
    for c in 1..k {
        // duplicates leave every remaining distance at zero; fall back to the first unused point
        let pick = rng
            .weighted_index(&d2)
            .unwrap_or_else(|| chosen.iter().position(|&u| !u).unwrap_or(0));
        chosen[pick] = true;
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            let nd = squared_distance(points.row(i), points.row(pick)).as_f64();
            if nd < *d {
                *d = nd;
            }
        }
    }
    centroids
}

/// Clusters the rows of `points` into `k` groups.
///
/// Empty clusters keep their previous centroid, which keeps the objective
/// non-increasing. Stops early once assignments no longer change.
pub fn kmeans<T: Scalar>(
    points: &Matrix<T>,
    k: usize,
    iters: usize,
    rng: &mut Rng,
) -> Result<KMeansResult<T>> {
    if k == 0 || k > points.rows() {
        return Err(NumericsError::Argument(format!(
            "kmeans needs 1 <= k <= points ({}), got k = {k}",
            points.rows()
        )));
    }
    let dim = points.cols();
    let mut centroids = seed_centroids(points, k, rng);
    let mut assignments = vec![0usize; points.rows()];
    let mut wcss_history = vec![assign(points, &centroids, &mut assignments)];
    for _ in 0..iters {
        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for (s, v) in sums[a * dim..(a + 1) * dim].iter_mut().zip(points.row(i)) {
                *s += v.as_f64();
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                continue;
            }
            let inv = 1.0 / counts[c] as f64;
            for (dst, s) in centroids.row_mut(c).iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                *dst = T::lit(s * inv);
            }
        }
        let before = assignments.clone();
        let w = assign(points, &centroids, &mut assignments);
        wcss_history.push(w);
        if before == assignments {
            break;
        }
    }
    Ok(KMeansResult {
        centroids,
        assignments,
        wcss_history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(rng: &mut Rng, per: usize) -> (Matrix<f64>, Vec<usize>) {
        let centers = [[-5.0, -5.0, 0.0], [5.0, 5.0, 1.0]];
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..per * 2 {
            let c = i % 2;
            rows.push(centers[c].iter().map(|&m| m + 0.3 * rng.normal()).collect());
            labels.push(c);
        }
        (Matrix::from_rows(&rows).unwrap(), labels)
    }

    #[test]
    fn square_corners_are_their_own_clusters() {
        let pts = Matrix::from_rows(&[
            vec![0.0f64, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![1.0, 1.0],
        ])
        .unwrap();
        let r = kmeans(&pts, 4, 10, &mut Rng::new(3)).unwrap();
        assert_eq!(r.wcss(), 0.0);
        let mut a = r.assignments.clone();
        a.sort_unstable();
        assert_eq!(a, vec![0, 1, 2, 3]);
    }

    #[test]
    fn single_cluster_is_the_mean() {
        let pts = Matrix::from_rows(&[vec![1.0f64, 2.0], vec![3.0, 6.0], vec![5.0, 1.0]]).unwrap();
        let r = kmeans(&pts, 1, 5, &mut Rng::new(0)).unwrap();
        assert!((r.centroids.get(0, 0) - 3.0).abs() < 1e-12);
        assert!((r.centroids.get(0, 1) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn planted_blobs_recovered() {
        let mut rng = Rng::new(17);
        let (pts, labels) = blobs(&mut rng, 100);
        let r = kmeans(&pts, 2, 50, &mut rng).unwrap();
        // cluster ids are arbitrary: map through the first point
        let flip = r.assignments[0] != labels[0];
        let correct = r
            .assignments
            .iter()
            .zip(&labels)
            .filter(|(&a, &l)| (a != l) == flip)
            .count();
        assert_eq!(correct, labels.len());
    }

    #[test]
    fn wcss_never_increases_and_seed_is_reproducible() {
        let mut rng = Rng::new(23);
        let pts = Matrix::from_fn(300, 5, |_, _| rng.normal());
        let a = kmeans(&pts, 7, 30, &mut Rng::new(4)).unwrap();
        for w in a.wcss_history.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", a.wcss_history);
        }
        let b = kmeans(&pts, 7, 30, &mut Rng::new(4)).unwrap();
        assert_eq!(a.assignments, b.assignments);
    }

    #[test]
    fn too_many_clusters_is_an_error() {
        let pts = Matrix::<f32>::zeros(3, 2);
        assert!(matches!(
            kmeans(&pts, 4, 1, &mut Rng::new(0)),
            Err(NumericsError::Argument(_))
        ));
    }

    #[test]
    fn nearest_ties_go_low() {
        let c = Matrix::from_rows(&[vec![1.0f32], vec![-1.0]]).unwrap();
        assert_eq!(nearest_row(&c, &[0.0]).0, 0);
    }
}
