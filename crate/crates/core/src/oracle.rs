//! Scalar-loop reference implementations.
//!
//! Nothing here touches the tape. These are written straight from the
//! defining sums so that they can check the vectorised graph code.

use crate::matrix::Matrix;

pub fn matmul_loop(a: &Matrix, b: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for j in 0..b.cols() {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            out.set(i, j, s);
        }
    }
    out
}

fn softmax_row(row: &[f64], t: f64) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| ((v - m) / t).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean negative log-likelihood of the labelled class.
pub fn cross_entropy_loop(logits: &Matrix, labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / labels.len() as f64
}

/// `-mean log d_s - mean log(1 - d_t)`.
pub fn adversarial_loop(src: &[f64], tgt: &[f64]) -> f64 {
    let mut a = 0.0;
    for &p in src {
        a += p.ln();
    }
    let mut b = 0.0;
    for &p in tgt {
        b += (1.0 - p).ln();
    }
    -a / src.len() as f64 - b / tgt.len() as f64
}

/// `|Σ_{i≠j} Σ_k Σ_l t1[i,k]·m[k,l]·t2[j,l]|`.
pub fn transport_loss_loop(t1: &Matrix, m: &Matrix, t2: &Matrix) -> f64 {
    let b = t1.rows();
    let c = t1.cols();
    let mut off = 0.0;
    for i in 0..b {
        for j in 0..b {
            if i == j {
                continue;
            }
            let mut y = 0.0;
            for k in 0..c {
                for l in 0..c {
                    y += t1.get(i, k) * m.get(k, l) * t2.get(j, l);
                }
            }
            off += y;
        }
    }
    off.abs()
}

/// Off-diagonal absolute sum of pairwise cosines, norms padded by `eps`.
pub fn transport_cos_loop(t1: &Matrix, t2: &Matrix, eps: f64) -> f64 {
    let norm = |r: &[f64]| r.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut off = 0.0;
    for i in 0..t1.rows() {
        for j in 0..t2.rows() {
            if i == j {
                continue;
            }
            let (a, b) = (t1.row(i), t2.row(j));
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            off += dot / ((norm(a) + eps) * (norm(b) + eps));
        }
    }
    off.abs()
}

/// Minimum-class-confusion loss computed step by step:
/// temperature softmax, per-sample entropy, certainty weights
/// `B·softmax(-H)`, weighted class correlation, row normalisation,
/// off-diagonal mean over classes. `eps` is added to each row total.
pub fn mcc_loop(logits: &Matrix, t: f64, eps: f64) -> f64 {
    let b = logits.rows();
    let c = logits.cols();
    let probs: Vec<Vec<f64>> = (0..b).map(|i| softmax_row(logits.row(i), t)).collect();

    let mut neg_entropy = vec![0.0; b];
    for i in 0..b {
        let mut h = 0.0;
        for j in 0..c {
            let p = probs[i][j];
            if p > 0.0 {
                h -= p * p.ln();
            }
        }
        neg_entropy[i] = -h;
    }
    let m = neg_entropy
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = neg_entropy.iter().map(|v| (v - m).exp()).sum();
    let w: Vec<f64> = neg_entropy
        .iter()
        .map(|v| b as f64 * (v - m).exp() / z)
        .collect();

    let mut conf = vec![vec![0.0; c]; c];
    for j in 0..c {
        for k in 0..c {
            let mut s = 0.0;
            for i in 0..b {
                s += probs[i][j] * w[i] * probs[i][k];
            }
            conf[j][k] = s;
        }
    }
    let mut loss = 0.0;
    for j in 0..c {
        let row_total: f64 = conf[j].iter().sum::<f64>() + eps;
        for k in 0..c {
            if k != j {
                loss += (conf[j][k] / row_total).abs();
            }
        }
    }
    loss / c as f64
}

pub fn accuracy_loop(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    for i in 0..truth.len() {
        if pred[i] == truth[i] {
            hits += 1;
        }
    }
    hits as f64 / truth.len() as f64
}

/// Central finite differences of `f` at `x` with step `h`.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let fp = f(&probe);
        probe[i] = orig - h;
        let fm = f(&probe);
        probe[i] = orig;
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Relative error with an absolute floor: differences below `abs_floor`
/// count as zero error. Non-finite inputs give an infinite error.
pub fn relative_error(a: f64, b: f64, abs_floor: f64) -> f64 {
    let diff = (a - b).abs();
    if !diff.is_finite() {
        return f64::INFINITY;
    }
    if diff <= abs_floor {
        return 0.0;
    }
    diff / a.abs().max(b.abs())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_difference_of_quadratic() {
        let g = central_difference(|x| x[0] * x[0] + 3.0 * x[1], &[2.0, -1.0], 1e-5);
        assert!((g[0] - 4.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1e-9, 2e-9, 1e-7), 0.0);
        assert!((relative_error(1.0, 1.1, 1e-7) - 0.1 / 1.1).abs() < 1e-12);
        assert_eq!(relative_error(f64::NAN, 1.0, 1e-7), f64::INFINITY);
    }
}
