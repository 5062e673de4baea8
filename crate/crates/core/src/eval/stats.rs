//! Welch's t-test and a linear-probe separability measure.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p_value: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Welch's unequal-variance t-test with a two-sided p-value.
pub fn two_sample_ttest(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::invalid("t-test needs at least two samples per group"));
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::invalid("t-test samples must be finite"));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        let same = ma == mb;
        return Ok(TTest {
            t: if same { 0.0 } else { (ma - mb).signum() * f64::INFINITY },
            df: na + nb - 2.0,
            p_value: if same { 1.0 } else { 0.0 },
        });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| Error::invalid(e.to_string()))?;
    let p = 2.0 * dist.cdf(-t.abs());
    Ok(TTest {
        t,
        df,
        p_value: p.clamp(0.0, 1.0),
    })
}

/// Mean held-out accuracy of a softmax-regression classifier over `folds`
/// stratified folds. Features are standardized using training-fold statistics.
pub fn linear_probe_accuracy(features: &[Vec<f64>], labels: &[usize], folds: usize, seed: u64) -> Result<f64> {
    let n = features.len();
    if n != labels.len() || n == 0 {
        return Err(Error::invalid("probe needs one label per feature vector"));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::shape("probe features have mixed lengths"));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let folds = folds.clamp(2, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0usize; n];
    for c in 0..classes {
        let mut idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        idx.shuffle(&mut rng);
        for (j, i) in idx.into_iter().enumerate() {
            fold_of[i] = j % folds;
        }
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
        if train.is_empty() || test.is_empty() {
            continue;
        }
        let mut mu = vec![0.0; dim];
        let mut sd = vec![0.0; dim];
        for &i in &train {
            for d in 0..dim {
                mu[d] += features[i][d];
            }
        }
        mu.iter_mut().for_each(|m| *m /= train.len() as f64);
        for &i in &train {
            for d in 0..dim {
                sd[d] += (features[i][d] - mu[d]).powi(2);
            }
        }
        sd.iter_mut().for_each(|s| {
            *s = (*s / train.len() as f64).sqrt();
            if *s < 1e-12 {
                *s = 1.0;
            }
        });
        let z = |i: usize| -> Vec<f64> { (0..dim).map(|d| (features[i][d] - mu[d]) / sd[d]).collect() };
        let xs: Vec<Vec<f64>> = train.iter().map(|&i| z(i)).collect();
        let w = fit_softmax(&xs, &train.iter().map(|&i| labels[i]).collect::<Vec<_>>(), classes);
        for &i in &test {
            let x = z(i);
            let scores = scores(&w, &x);
            let pred = argmax(&scores);
            correct += (pred == labels[i]) as usize;
            total += 1;
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

fn scores(w: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| row[0] + row[1..].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
        .collect()
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in v.iter().enumerate() {
        if s > v[best] {
            best = i;
        }
    }
    best
}

/// Full-batch gradient descent on L2-regularized softmax cross-entropy.
fn fit_softmax(xs: &[Vec<f64>], ys: &[usize], classes: usize) -> Vec<Vec<f64>> {
    let dim = xs[0].len();
    let mut w = vec![vec![0.0; dim + 1]; classes];
    let lr = 0.5;
    let l2 = 1e-3;
    let n = xs.len() as f64;
    for _ in 0..500 {
        let mut grad = vec![vec![0.0; dim + 1]; classes];
        for (x, &y) in xs.iter().zip(ys) {
            let s = scores(&w, x);
            let m = s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..classes {
                let d = e[c] / z - f64::from(c == y);
                grad[c][0] += d;
                for j in 0..dim {
                    grad[c][j + 1] += d * x[j];
                }
            }
        }
        for c in 0..classes {
            for j in 0..=dim {
                let reg = if j == 0 { 0.0 } else { l2 * w[c][j] };
                w[c][j] -= lr * (grad[c][j] / n + reg);
            }
        }
    }
    w
}
