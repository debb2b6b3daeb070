//! Independent oracles shared by the integration tests and the acceptance gate.
#![allow(dead_code)]

use dsu_core::matrix::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Collapse repeats, then drop blanks (label 0).
pub fn collapse(path: &[usize]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut prev = None;
    for &p in path {
        if Some(p) != prev && p != 0 {
            out.push(p);
        }
        prev = Some(p);
    }
    out
}

/// Negative log-likelihood of `target` by summing over every V^T path.
/// `None` when no path collapses to the target.
pub fn ctc_nll_bruteforce(logits: &Matrix<f64>, target: &[usize]) -> Option<f64> {
    let (t, v) = (logits.rows(), logits.cols());
    let probs: Vec<Vec<f64>> = (0..t)
        .map(|i| {
            let row = logits.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            row.iter().map(|x| (x - m).exp() / z).collect()
        })
        .collect();
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    for code in 0..v.pow(t as u32) {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % v;
            c /= v;
        }
        if collapse(&path) == target {
            total += path.iter().enumerate().map(|(i, &p)| probs[i][p]).product::<f64>();
        }
    }
    (total > 0.0).then(|| -total.ln())
}

/// Every sequence over `1..vocab` of length `0..=max_len`.
pub fn all_targets(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for seq in &frontier {
            for s in 1..vocab {
                let mut e: Vec<usize> = seq.clone();
                e.push(s);
                next.push(e);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Central finite-difference gradient of `f` at `x`.
pub fn central_diff(x: &[f64], step: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Largest distance from any true mean to its nearest centroid.
pub fn worst_recovery(means: &[Vec<f64>], centroids: &Matrix<f64>) -> f64 {
    means
        .iter()
        .map(|m| {
            centroids
                .iter_rows()
                .map(|c| sq_dist(m, c).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max)
}
