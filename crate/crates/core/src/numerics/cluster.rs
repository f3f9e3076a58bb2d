//! k-means (k-means++ seeding, Lloyd iterations), silhouette scores and
//! medoids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::matrix::{dist, sq_dist, Matrix};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub k: usize,
    pub assignment: Vec<usize>,
    pub centroids: Matrix,
    /// Within-cluster sum of squared distances after the final update.
    pub sse: f64,
    /// SSE after every centroid update, in order.
    pub sse_trace: Vec<f64>,
    pub iterations: usize,
}

impl Clustering {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| (a == cluster).then_some(i))
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }
}

fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter_rows().enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn sse_of(points: &Matrix, centroids: &Matrix, assignment: &[usize]) -> f64 {
    points
        .iter_rows()
        .zip(assignment)
        .map(|(p, &a)| sq_dist(p, centroids.row(a)))
        .sum()
}

fn kmeans_pp(points: &Matrix, k: usize, rng: &mut ChaCha8Rng) -> Matrix {
    let m = points.rows();
    let mut chosen = Vec::with_capacity(k);
    chosen.push(rng.random_range(0..m));
    let mut d2: Vec<f64> = points
        .iter_rows()
        .map(|p| sq_dist(p, points.row(chosen[0])))
        .collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = None;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 {
                    if target < w {
                        pick = Some(i);
                        break;
                    }
                    target -= w;
                }
            }
            // rounding can exhaust `target`; take the last positive-weight point
            pick.unwrap_or_else(|| d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // every point coincides with a chosen center
            (0..m).find(|i| !chosen.contains(i)).unwrap_or(0)
        };
        chosen.push(next);
        for (i, p) in points.iter_rows().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, points.row(next)));
        }
    }
    points.select_rows(&chosen)
}

/// Lloyd's algorithm from a k-means++ start. Empty clusters are re-seeded
/// with the point farthest from its current centroid, so the result always
/// has exactly `k` non-empty clusters.
pub fn kmeans_cluster(points: &Matrix, k: usize, seed: u64, max_iters: usize) -> Result<Clustering> {
    let m = points.rows();
    if k == 0 || k > m {
        return Err(Error::invalid(format!("k = {k} must lie in [1, {m}]")));
    }
    points.ensure_finite("k-means input")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(points, k, &mut rng);
    let mut assignment: Vec<usize> = points.iter_rows().map(|p| nearest(p, &centroids).0).collect();
    let mut sse_trace = Vec::new();
    let mut iterations = 0;

    loop {
        repair_empty(points, &mut centroids, &mut assignment, k);
        update_centroids(points, &mut centroids, &assignment);
        sse_trace.push(sse_of(points, &centroids, &assignment));
        iterations += 1;
        if iterations >= max_iters.max(1) {
            break;
        }
        let mut changed = false;
        for (i, p) in points.iter_rows().enumerate() {
            let (j, d) = nearest(p, &centroids);
            // only move on strict improvement, which keeps SSE monotone and
            // avoids flip-flopping between equidistant centroids
            if j != assignment[i] && d < sq_dist(p, centroids.row(assignment[i])) {
                assignment[i] = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let sse = *sse_trace.last().unwrap();
    Ok(Clustering {
        k,
        assignment,
        centroids,
        sse,
        sse_trace,
        iterations,
    })
}

fn repair_empty(points: &Matrix, centroids: &mut Matrix, assignment: &mut [usize], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignment.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        // farthest point among clusters that can spare one
        let mut best: Option<(usize, f64)> = None;
        for (i, p) in points.iter_rows().enumerate() {
            if sizes[assignment[i]] < 2 {
                continue;
            }
            let d = sq_dist(p, centroids.row(assignment[i]));
            if best.is_none_or(|(_, bd)| d > bd) {
                best = Some((i, d));
            }
        }
        let (i, _) = best.expect("k <= number of points guarantees a donor cluster");
        assignment[i] = empty;
        centroids.row_mut(empty).copy_from_slice(points.row(i));
    }
}

fn update_centroids(points: &Matrix, centroids: &mut Matrix, assignment: &[usize]) {
    let k = centroids.rows();
    let mut sums = Matrix::zeros(k, points.cols());
    let mut counts = vec![0usize; k];
    for (p, &a) in points.iter_rows().zip(assignment) {
        counts[a] += 1;
        for (s, v) in sums.row_mut(a).iter_mut().zip(p) {
            *s += v;
        }
    }
    for j in 0..k {
        if counts[j] > 0 {
            let inv = 1.0 / counts[j] as f64;
            for (c, s) in centroids.row_mut(j).iter_mut().zip(sums.row(j)) {
                *c = s * inv;
            }
        }
    }
}

/// Full pairwise Euclidean distance matrix (`M x M`).
pub fn pairwise_distances(points: &Matrix) -> Matrix {
    let m = points.rows();
    let mut out = Matrix::zeros(m, m);
    for i in 0..m {
        for j in (i + 1)..m {
            let d = dist(points.row(i), points.row(j));
            out.set(i, j, d);
            out.set(j, i, d);
        }
    }
    out
}

/// Mean silhouette over all points, Euclidean metric.
pub fn silhouette_score(points: &Matrix, clustering: &Clustering) -> Result<f64> {
    if points.rows() != clustering.assignment.len() {
        return Err(Error::invalid("clustering does not match the point set"));
    }
    silhouette_from_distances(&pairwise_distances(points), &clustering.assignment, clustering.k)
}

/// Silhouette computed from a precomputed distance matrix; lets a caller
/// scoring many values of k reuse one `O(M^2)` distance pass.
pub fn silhouette_from_distances(distances: &Matrix, assignment: &[usize], k: usize) -> Result<f64> {
    let m = assignment.len();
    if k < 2 {
        return Err(Error::invalid("silhouette needs at least two clusters"));
    }
    if m < 3 {
        return Err(Error::invalid("silhouette needs at least three points"));
    }
    if distances.rows() != m || distances.cols() != m {
        return Err(Error::invalid("distance matrix does not match assignment"));
    }
    let mut sizes = vec![0usize; k];
    for &a in assignment {
        if a >= k {
            return Err(Error::invalid(format!("assignment {a} out of range for k = {k}")));
        }
        sizes[a] += 1;
    }
    if sizes.contains(&0) {
        return Err(Error::invalid("silhouette needs every cluster non-empty"));
    }

    let mut total = 0.0;
    let mut sums = vec![0.0; k];
    for i in 0..m {
        sums.iter_mut().for_each(|s| *s = 0.0);
        for (j, &d) in distances.row(i).iter().enumerate() {
            sums[assignment[j]] += d;
        }
        let own = assignment[i];
        if sizes[own] == 1 {
            continue; // singleton clusters score 0
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / m as f64)
}

/// Member of `subset` closest to the subset's centroid; ties go to the
/// lowest point index.
pub fn medoid_of(points: &Matrix, subset: &[usize]) -> Result<usize> {
    if subset.is_empty() {
        return Err(Error::invalid("medoid of an empty subset"));
    }
    let mut centroid = vec![0.0; points.cols()];
    for &i in subset {
        for (c, v) in centroid.iter_mut().zip(points.row(i)) {
            *c += v;
        }
    }
    let inv = 1.0 / subset.len() as f64;
    centroid.iter_mut().for_each(|c| *c *= inv);
    let mut best = (usize::MAX, f64::INFINITY);
    for &i in subset {
        let d = sq_dist(points.row(i), &centroid);
        if d < best.1 || (d == best.1 && i < best.0) {
            best = (i, d);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn col(values: &[f64]) -> Matrix {
        Matrix::from_vec(values.len(), 1, values.to_vec()).unwrap()
    }

    /// Exhaustive search over all 2-partitions for the SSE minimizer.
    fn best_two_partition(values: &[f64]) -> (Vec<usize>, f64) {
        let n = values.len();
        let mut best = (vec![], f64::INFINITY);
        for mask in 1u32..(1 << n) - 1 {
            let mut sse = 0.0;
            for side in [0, 1] {
                let members: Vec<f64> = (0..n)
                    .filter(|&i| ((mask >> i) & 1) as usize == side)
                    .map(|i| values[i])
                    .collect();
                let mean = members.iter().sum::<f64>() / members.len() as f64;
                sse += members.iter().map(|v| (v - mean).powi(2)).sum::<f64>();
            }
            if sse < best.1 {
                best = ((0..n).map(|i| ((mask >> i) & 1) as usize).collect(), sse);
            }
        }
        best
    }

    #[test]
    fn two_clusters_on_a_line() {
        let values = [0.0, 0.1, 10.0, 10.1];
        let (oracle, oracle_sse) = best_two_partition(&values);
        let c = kmeans_cluster(&col(&values), 2, 3, 100).unwrap();
        // same partition up to label swap
        let same = c.assignment.iter().zip(&oracle).all(|(a, b)| a == b)
            || c.assignment.iter().zip(&oracle).all(|(a, b)| a != b);
        assert!(same, "{:?} vs {:?}", c.assignment, oracle);
        assert!((c.sse - oracle_sse).abs() < 1e-12);
        let mut cents: Vec<f64> = c.centroids.as_slice().to_vec();
        cents.sort_by(f64::total_cmp);
        assert!((cents[0] - 0.05).abs() < 1e-12);
        assert!((cents[1] - 10.05).abs() < 1e-12);
    }

    #[test]
    fn k_equals_m_and_k_one() {
        let pts = Matrix::from_vec(4, 2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 3.0, 5.0, 5.0]).unwrap();
        let c = kmeans_cluster(&pts, 4, 0, 50).unwrap();
        assert_eq!(c.sse, 0.0);
        let mut a = c.assignment.clone();
        a.sort();
        assert_eq!(a, vec![0, 1, 2, 3]);

        let c = kmeans_cluster(&pts, 1, 0, 50).unwrap();
        assert_eq!(c.centroids.row(0), &pts.col_means()[..]);
    }

    #[test]
    fn duplicate_points_keep_k_clusters() {
        let pts = col(&[1.0, 1.0, 1.0, 2.0]);
        let c = kmeans_cluster(&pts, 3, 9, 20).unwrap();
        assert!(c.sizes().iter().all(|&s| s > 0));
    }

    #[test]
    fn kmeans_errors() {
        let pts = col(&[1.0, 2.0]);
        assert!(matches!(kmeans_cluster(&pts, 3, 0, 10), Err(Error::InvalidArgument(_))));
        assert!(matches!(kmeans_cluster(&pts, 0, 0, 10), Err(Error::InvalidArgument(_))));
        let bad = col(&[1.0, f64::NAN]);
        assert!(matches!(kmeans_cluster(&bad, 1, 0, 10), Err(Error::NumericInput(_))));
    }

    fn fixed(assignment: Vec<usize>, k: usize, points: &Matrix) -> Clustering {
        Clustering {
            k,
            centroids: Matrix::zeros(k, points.cols()),
            assignment,
            sse: 0.0,
            sse_trace: vec![],
            iterations: 0,
        }
    }

    #[test]
    fn silhouette_examples() {
        let pts = col(&[0.0, 0.0, 10.0, 10.0]);
        let s = silhouette_score(&pts, &fixed(vec![0, 0, 1, 1], 2, &pts)).unwrap();
        assert!((s - 1.0).abs() < 1e-12);

        // two clusters of identical point sets at one location: a = b = 0
        let pts = col(&[3.0, 3.0, 3.0, 3.0]);
        let s = silhouette_score(&pts, &fixed(vec![0, 1, 0, 1], 2, &pts)).unwrap();
        assert_eq!(s, 0.0);

        assert!(silhouette_score(&pts, &fixed(vec![0; 4], 1, &pts)).is_err());
    }

    #[test]
    fn medoid_examples() {
        let pts = Matrix::from_vec(3, 2, vec![0.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        // distances to (1/3, 1/3): 0.471, 0.745, 0.745
        let c = [1.0 / 3.0, 1.0 / 3.0];
        assert!((dist(pts.row(0), &c) - 0.4714).abs() < 1e-4);
        assert!((dist(pts.row(1), &c) - 0.7454).abs() < 1e-4);
        assert_eq!(medoid_of(&pts, &[0, 1, 2]).unwrap(), 0);
        assert_eq!(medoid_of(&pts, &[2]).unwrap(), 2);
        // 1 and 2 are equidistant from their midpoint
        assert_eq!(medoid_of(&pts, &[2, 1]).unwrap(), 1);
        assert!(medoid_of(&pts, &[]).is_err());
    }

    fn point_set() -> impl Strategy<Value = (Matrix, usize, u64)> {
        (3usize..30, 1usize..4).prop_flat_map(|(m, d)| {
            (
                proptest::collection::vec(-10.0f64..10.0, m * d),
                2usize..=m.min(6),
                any::<u64>(),
            )
                .prop_map(move |(v, k, seed)| (Matrix::from_vec(m, d, v).unwrap(), k, seed))
        })
    }

    proptest! {
        #[test]
        fn silhouette_in_range((pts, k, seed) in point_set()) {
            let c = kmeans_cluster(&pts, k, seed, 50).unwrap();
            let s = silhouette_score(&pts, &c).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }

        #[test]
        fn sse_never_increases((pts, k, seed) in point_set()) {
            let c = kmeans_cluster(&pts, k, seed, 100).unwrap();
            for w in c.sse_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9 * w[0].abs().max(1.0));
            }
            prop_assert!(c.assignment.iter().all(|&a| a < k));
            prop_assert!(c.sizes().iter().all(|&s| s > 0));
        }

        #[test]
        fn medoid_is_member((pts, _k, seed) in point_set()) {
            let subset: Vec<usize> = (0..pts.rows()).filter(|i| (seed >> (i % 64)) & 1 == 1).collect();
            if !subset.is_empty() {
                prop_assert!(subset.contains(&medoid_of(&pts, &subset).unwrap()));
            }
        }
    }
}
