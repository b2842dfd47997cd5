use sha2::{Digest, Sha256};

use crate::linalg::{logsumexp, softmax, Matrix};
use crate::{Error, Result};

use super::ClassMetrics;

pub const LABEL_FRACTIONS: [f64; 3] = [0.01, 0.1, 1.0];

/// L2 strengths searched on a validation split, and the number of CV folds.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeGrid {
    pub lambdas: Vec<f64>,
    pub folds: usize,
    /// Z-score features with training-subset statistics before fitting.
    pub standardize: bool,
}

impl Default for ProbeGrid {
    /// 45 log-spaced strengths from 1e-6 to 1e5, 10 folds.
    fn default() -> Self {
        let lambdas = (0..45).map(|i| 10f64.powf(-6.0 + 11.0 * i as f64 / 44.0)).collect();
        Self { lambdas, folds: 10, standardize: false }
    }
}

/// Multinomial logistic regression on standardized inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticModel {
    pub classes: usize,
    /// `[classes, dim]` followed by `classes` intercepts.
    pub theta: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl LogisticModel {
    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let d = self.mean.len();
        let z: Vec<f64> = x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect();
        (0..self.classes)
            .map(|c| self.theta[self.classes * d + c] + self.theta[c * d..(c + 1) * d].iter().zip(&z).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn predict_proba(&self, x: &Matrix) -> Vec<Vec<f64>> {
        (0..x.rows).map(|i| softmax(&self.logits(x.row(i)))).collect()
    }

    /// Mean cross-entropy on `rows` of `x`.
    pub fn log_loss(&self, x: &Matrix, y: &[usize], rows: &[usize]) -> f64 {
        rows.iter().map(|&i| {
            let l = self.logits(x.row(i));
            logsumexp(&l) - l[y[i]]
        }).sum::<f64>() / rows.len() as f64
    }
}

fn standardizer(x: &Matrix, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let mut mean = vec![0.0; x.cols];
    for &r in rows {
        mean.iter_mut().zip(x.row(r)).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; x.cols];
    for &r in rows {
        var.iter_mut().zip(x.row(r)).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
    }
    let scale = var.into_iter().map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 }).collect();
    (mean, scale)
}

/// Mean cross-entropy plus `lambda / 2 * |W|^2` and its gradient.
fn objective(z: &[Vec<f64>], y: &[usize], k: usize, lambda: f64, theta: &[f64], grad: &mut [f64]) -> f64 {
    let d = z.first().map_or(0, Vec::len);
    let n = z.len() as f64;
    grad.iter_mut().for_each(|g| *g = 0.0);
    let mut f = 0.0;
    for (row, &yi) in z.iter().zip(y) {
        let logits: Vec<f64> =
            (0..k).map(|c| theta[k * d + c] + theta[c * d..(c + 1) * d].iter().zip(row).map(|(w, v)| w * v).sum::<f64>()).collect();
        f += (logsumexp(&logits) - logits[yi]) / n;
        let mut p = softmax(&logits);
        p[yi] -= 1.0;
        for c in 0..k {
            let pc = p[c] / n;
            grad[k * d + c] += pc;
            grad[c * d..(c + 1) * d].iter_mut().zip(row).for_each(|(g, v)| *g += pc * v);
        }
    }
    for i in 0..k * d {
        f += 0.5 * lambda * theta[i] * theta[i];
        grad[i] += lambda * theta[i];
    }
    f
}

/// Limited-memory BFGS with Armijo backtracking.
fn lbfgs(mut f: impl FnMut(&[f64], &mut [f64]) -> f64, x0: Vec<f64>, max_iter: usize) -> Vec<f64> {
    const MEMORY: usize = 10;
    let n = x0.len();
    let mut x = x0;
    let mut g = vec![0.0; n];
    let mut fx = f(&x, &mut g);
    let mut hist: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::new();
    let mut g_new = vec![0.0; n];
    for _ in 0..max_iter {
        if g.iter().fold(0.0f64, |m, v| m.max(v.abs())) < 1e-7 {
            break;
        }
        let mut q = g.clone();
        let mut alpha = vec![0.0; hist.len()];
        for (i, (s, y, rho)) in hist.iter().enumerate().rev() {
            alpha[i] = rho * s.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
            q.iter_mut().zip(y).for_each(|(q, y)| *q -= alpha[i] * y);
        }
        if let Some((s, y, _)) = hist.last() {
            let gamma = s.iter().zip(y).map(|(a, b)| a * b).sum::<f64>() / y.iter().map(|v| v * v).sum::<f64>();
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for (i, (s, y, rho)) in hist.iter().enumerate() {
            let beta = rho * y.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
            q.iter_mut().zip(s).for_each(|(q, s)| *q += (alpha[i] - beta) * s);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope: f64 = dir.iter().zip(&g).map(|(a, b)| a * b).sum();
        if slope >= 0.0 {
            dir = g.iter().map(|v| -v).collect();
            slope = -g.iter().map(|v| v * v).sum::<f64>();
            hist.clear();
        }
        let mut step = 1.0;
        let mut x_new;
        let mut f_new;
        loop {
            x_new = x.iter().zip(&dir).map(|(a, d)| a + step * d).collect::<Vec<_>>();
            f_new = f(&x_new, &mut g_new);
            if f_new <= fx + 1e-4 * step * slope || step < 1e-12 {
                break;
            }
            step *= 0.5;
        }
        let s: Vec<f64> = x_new.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
        let done = (fx - f_new).abs() <= 1e-12 * fx.abs().max(1.0);
        x = x_new;
        fx = f_new;
        g.copy_from_slice(&g_new);
        if sy > 1e-12 {
            hist.push((s, y, 1.0 / sy));
            if hist.len() > MEMORY {
                hist.remove(0);
            }
        }
        if done {
            break;
        }
    }
    x
}

/// Fits on `rows` of `x`; `warm` seeds the parameters.
pub fn fit_logistic(
    x: &Matrix,
    y: &[usize],
    rows: &[usize],
    classes: usize,
    lambda: f64,
    standardize: bool,
    warm: Option<&LogisticModel>,
) -> LogisticModel {
    let (mean, scale) = if standardize { standardizer(x, rows) } else { (vec![0.0; x.cols], vec![1.0; x.cols]) };
    let z: Vec<Vec<f64>> =
        rows.iter().map(|&r| x.row(r).iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect()).collect();
    let ys: Vec<usize> = rows.iter().map(|&r| y[r]).collect();
    let dim = (x.cols + 1) * classes;
    let x0 = warm.filter(|w| w.theta.len() == dim).map_or_else(|| vec![0.0; dim], |w| w.theta.clone());
    let theta = lbfgs(|t, g| objective(&z, &ys, classes, lambda, t, g), x0, 500);
    LogisticModel { classes, theta, mean, scale }
}

/// Deals each class's members round-robin over `folds` in the given order.
pub fn stratified_folds(y: &[usize], idx: &[usize], folds: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); folds];
    let k = idx.iter().map(|&i| y[i]).max().map_or(0, |m| m + 1);
    let mut slot = 0;
    for c in 0..k {
        for &i in idx.iter().filter(|&&i| y[i] == c) {
            out[slot % folds].push(i);
            slot += 1;
        }
    }
    out
}

/// The first `max(min_per_class, round(fraction * n_c))` members of each
/// class (capped at `n_c`), in the given order.
pub fn stratified_subsample(y: &[usize], pool: &[usize], fraction: f64, min_per_class: usize) -> Vec<usize> {
    let k = pool.iter().map(|&i| y[i]).max().map_or(0, |m| m + 1);
    let mut out = Vec::new();
    for c in 0..k {
        let members: Vec<usize> = pool.iter().copied().filter(|&i| y[i] == c).collect();
        let take = ((fraction * members.len() as f64).round() as usize).max(min_per_class).min(members.len());
        out.extend_from_slice(&members[..take]);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeResult {
    pub balanced_accuracy: f64,
    pub auroc: Option<f64>,
    pub f1: f64,
    pub folds: Vec<ClassMetrics>,
    /// Selected strength per fold.
    pub lambdas: Vec<f64>,
}

fn sample_key(seed: u64, row: &[f64], label: usize) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label as u64).to_le_bytes());
    for v in row {
        h.update(v.to_bits().to_le_bytes());
    }
    h.finalize().into()
}

/// Cross-validated probe. In each fold the held-out part is the test set; a
/// stratified `label_fraction` of the remainder is split 80/20 into
/// train/validation, the strength with the best validation balanced
/// accuracy (then lowest validation loss) is refit on train+validation and
/// scored on the test fold. Sample order is fixed by a seeded hash of each
/// row, so permuting the inputs does not change the result.
pub fn linear_probe(x: &Matrix, y: &[usize], label_fraction: f64, grid: &ProbeGrid, seed: u64) -> Result<ProbeResult> {
    if x.rows != y.len() {
        return Err(Error::ShapeMismatch { what: "probe labels".into(), expected: x.rows, actual: y.len() });
    }
    if !(label_fraction > 0.0 && label_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("label fraction {label_fraction} outside (0, 1]")));
    }
    let k = y.iter().copied().max().map_or(0, |m| m + 1);
    if (0..k).filter(|c| y.contains(c)).count() < 2 {
        return Err(Error::Degenerate("linear probe needs at least two classes".into()));
    }
    let mut order: Vec<usize> = (0..x.rows).collect();
    let keys: Vec<[u8; 32]> = (0..x.rows).map(|i| sample_key(seed, x.row(i), y[i])).collect();
    order.sort_by(|&a, &b| keys[a].cmp(&keys[b]));
    let mut lambdas_desc = grid.lambdas.clone();
    lambdas_desc.sort_by(|a, b| b.total_cmp(a));
    let folds = stratified_folds(y, &order, grid.folds.max(2));
    let mut results = Vec::new();
    let mut chosen = Vec::new();
    for (f, test) in folds.iter().enumerate() {
        if test.is_empty() {
            continue;
        }
        let pool: Vec<usize> = order.iter().copied().filter(|i| !folds[f].contains(i)).collect();
        let sub = stratified_subsample(y, &pool, label_fraction, 2);
        let mut train = Vec::new();
        let mut val = Vec::new();
        for c in 0..k {
            let members: Vec<usize> = sub.iter().copied().filter(|&i| y[i] == c).collect();
            let n_val = if members.len() >= 2 { ((0.2 * members.len() as f64).round() as usize).max(1) } else { 0 };
            val.extend_from_slice(&members[..n_val]);
            train.extend_from_slice(&members[n_val..]);
        }
        let present = |rows: &[usize]| (0..k).filter(|c| rows.iter().any(|&i| y[i] == *c)).count();
        if present(&train) < 2 {
            return Err(Error::Degenerate(format!("fold {f}: fewer than two classes in the training subsample")));
        }
        let mut best: Option<(f64, f64, f64)> = None;
        let mut warm: Option<LogisticModel> = None;
        for &lambda in &lambdas_desc {
            let m = fit_logistic(x, y, &train, k, lambda, grid.standardize, warm.as_ref());
            if !val.is_empty() {
                let probs = m.predict_proba(&sub_matrix(x, &val));
                let truth: Vec<usize> = val.iter().map(|&i| y[i]).collect();
                let acc = ClassMetrics::from_scores(&truth, &probs).balanced_accuracy;
                let loss = m.log_loss(x, y, &val);
                let better = best.is_none_or(|(a, l, _)| acc > a || (acc == a && loss < l));
                if better {
                    best = Some((acc, loss, lambda));
                }
            }
            warm = Some(m);
        }
        let lambda = best.map_or(1.0, |b| b.2);
        let all: Vec<usize> = train.iter().chain(&val).copied().collect();
        let m = fit_logistic(x, y, &all, k, lambda, grid.standardize, None);
        let truth: Vec<usize> = test.iter().map(|&i| y[i]).collect();
        results.push(ClassMetrics::from_scores(&truth, &m.predict_proba(&sub_matrix(x, test))));
        chosen.push(lambda);
    }
    let n = results.len() as f64;
    let aurocs: Vec<f64> = results.iter().filter_map(|r| r.auroc).collect();
    Ok(ProbeResult {
        balanced_accuracy: results.iter().map(|r| r.balanced_accuracy).sum::<f64>() / n,
        auroc: (!aurocs.is_empty()).then(|| aurocs.iter().sum::<f64>() / aurocs.len() as f64),
        f1: results.iter().map(|r| r.f1).sum::<f64>() / n,
        folds: results,
        lambdas: chosen,
    })
}

fn sub_matrix(x: &Matrix, rows: &[usize]) -> Matrix {
    Matrix::from_rows(&rows.iter().map(|&r| x.row(r).to_vec()).collect::<Vec<_>>())
}
