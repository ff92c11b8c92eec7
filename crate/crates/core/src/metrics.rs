//! Cluster statistics on logit-space point clouds.

use crate::matrix::Matrix;

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Mean silhouette coefficient with Euclidean distance.
///
/// Points in singleton clusters score 0. Returns 0 when fewer than two
/// clusters are present.
pub fn silhouette(points: &Matrix, labels: &[usize]) -> f64 {
    let n = points.rows();
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut counts = vec![0usize; k];
    for &l in labels {
        counts[l] += 1;
    }
    if counts.iter().filter(|&&c| c > 0).count() < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if i != j {
                sums[labels[j]] += dist(points.row(i), points.row(j));
            }
        }
        let own = labels[i];
        if counts[own] <= 1 {
            continue;
        }
        let a = sums[own] / (counts[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / n as f64
}

/// Mean pairwise angle (radians) between the directions of per-class
/// centroids.
pub fn centroid_angular_spread(points: &Matrix, labels: &[usize]) -> f64 {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let d = points.cols();
    let mut sums = vec![vec![0.0; d]; k];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(points.row(i)) {
            *s += v;
        }
    }
    let centroids: Vec<Vec<f64>> = (0..k)
        .filter(|&c| counts[c] > 0)
        .map(|c| sums[c].iter().map(|s| s / counts[c] as f64).collect())
        .collect();
    let mut total = 0.0;
    let mut pairs = 0;
    for a in 0..centroids.len() {
        for b in a + 1..centroids.len() {
            let (u, v) = (&centroids[a], &centroids[b]);
            let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if nu == 0.0 || nv == 0.0 {
                continue;
            }
            let cos = u.iter().zip(v).map(|(x, y)| x * y).sum::<f64>() / (nu * nv);
            total += cos.clamp(-1.0, 1.0).acos();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}
