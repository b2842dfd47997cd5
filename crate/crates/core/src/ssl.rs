//! EEG-only self-supervised objectives and the augmentation suite they use.
//!
//! Losses work on `f64` matrices and return gradients with respect to every
//! non-frozen input so the trainer can push them back through the encoder.

use rand::Rng;

use crate::eegprep::{Crop, CLIP_UV, TARGET_RATE};
use crate::linalg::{dot, logsumexp, normalize_rows, normalize_rows_backward, softmax, Matrix};
use crate::losses::LossGrad;
use crate::{Error, Result};

pub const AMPLITUDE_SCALE: (f64, f64) = (0.5, 1.5);
pub const TIME_SHIFT_SAMPLES: (i64, i64) = (-60, 60);
pub const DC_SHIFT_UV: (f64, f64) = (-10.0, 10.0);
pub const ZERO_MASK_SAMPLES: (usize, usize) = (0, 200);
pub const GAUSSIAN_SIGMA: (f64, f64) = (0.0, 0.2);
pub const BANDSTOP_CENTER_HZ: (f64, f64) = (2.8, 47.0);
pub const BANDSTOP_WIDTH_HZ: f64 = 5.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentationParams {
    pub amplitude_scale: f64,
    pub time_shift_samples: i64,
    pub dc_shift_uv: f64,
    pub zero_mask_samples: usize,
    pub zero_mask_start: usize,
    /// Noise standard deviation relative to each channel's standard deviation.
    pub gaussian_sigma: f64,
    pub bandstop_center_hz: Option<f64>,
    pub noise_seed: u64,
}

impl AugmentationParams {
    pub fn identity() -> Self {
        Self {
            amplitude_scale: 1.0,
            time_shift_samples: 0,
            dc_shift_uv: 0.0,
            zero_mask_samples: 0,
            zero_mask_start: 0,
            gaussian_sigma: 0.0,
            bandstop_center_hz: None,
            noise_seed: 0,
        }
    }

    /// Uniform draw of every transform for a crop of `len` samples.
    pub fn sample<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        let zero_mask_samples = rng.random_range(ZERO_MASK_SAMPLES.0..=ZERO_MASK_SAMPLES.1).min(len);
        Self {
            amplitude_scale: rng.random_range(AMPLITUDE_SCALE.0..=AMPLITUDE_SCALE.1),
            time_shift_samples: rng.random_range(TIME_SHIFT_SAMPLES.0..=TIME_SHIFT_SAMPLES.1),
            dc_shift_uv: rng.random_range(DC_SHIFT_UV.0..=DC_SHIFT_UV.1),
            zero_mask_samples,
            zero_mask_start: rng.random_range(0..=len - zero_mask_samples),
            gaussian_sigma: rng.random_range(GAUSSIAN_SIGMA.0..=GAUSSIAN_SIGMA.1),
            bandstop_center_hz: Some(rng.random_range(BANDSTOP_CENTER_HZ.0..=BANDSTOP_CENTER_HZ.1)),
            noise_seed: rng.random(),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
}

impl Biquad {
    fn notch(fs: f64, f0: f64, q: f64) -> Self {
        let w0 = 2.0 * std::f64::consts::PI * f0 / fs;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        let c = -2.0 * w0.cos();
        Self { b: [1.0 / a0, c / a0, 1.0 / a0], a: [c / a0, (1.0 - alpha) / a0] }
    }

    fn run(&self, x: &mut [f64]) {
        let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
        for v in x.iter_mut() {
            let y = self.b[0] * *v + self.b[1] * x1 + self.b[2] * x2 - self.a[0] * y1 - self.a[1] * y2;
            x2 = x1;
            x1 = *v;
            y2 = y1;
            y1 = y;
            *v = y;
        }
    }
}

/// Notches at the centre and at ±40% of the band width, clipped below Nyquist.
fn bandstop_cascade(fs: f64, center: f64) -> Vec<Biquad> {
    let nyq = fs / 2.0;
    [-0.4, 0.0, 0.4]
        .iter()
        .map(|k| center + k * BANDSTOP_WIDTH_HZ)
        .filter(|f| *f > 0.0 && *f < nyq * 0.98)
        .map(|f| Biquad::notch(fs, f, f / 2.0))
        .collect()
}

/// Applies `p` to every channel of `crop`, then re-applies the ±800 µV clip.
pub fn augment_with(crop: &Crop, p: &AugmentationParams) -> Crop {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    let len = crop.len;
    let mut out = crop.clone();
    let mut noise_rng = rand_chacha::ChaCha8Rng::seed_from_u64(p.noise_seed);
    let notches = p.bandstop_center_hz.map(|c| bandstop_cascade(TARGET_RATE, c)).unwrap_or_default();
    let mut x = vec![0.0f64; len];
    for ch in 0..crop.channels {
        let src = &crop.data[ch * len..(ch + 1) * len];
        for (t, v) in x.iter_mut().enumerate() {
            let s = (t as i64 - p.time_shift_samples).rem_euclid(len as i64) as usize;
            *v = src[s] as f64 * p.amplitude_scale + p.dc_shift_uv;
        }
        for v in x.iter_mut().skip(p.zero_mask_start).take(p.zero_mask_samples) {
            *v = 0.0;
        }
        if p.gaussian_sigma > 0.0 {
            let mean = x.iter().sum::<f64>() / len as f64;
            let sd = (x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / len as f64).sqrt();
            for v in x.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut noise_rng);
                *v += p.gaussian_sigma * sd * z;
            }
        }
        for n in &notches {
            n.run(&mut x);
        }
        let clip = CLIP_UV as f64;
        for (d, v) in out.data[ch * len..(ch + 1) * len].iter_mut().zip(&x) {
            *d = v.clamp(-clip, clip) as f32;
        }
    }
    out
}

pub fn augment<R: Rng + ?Sized>(crop: &Crop, rng: &mut R) -> Crop {
    let p = AugmentationParams::sample(crop.len, rng);
    augment_with(crop, &p)
}

fn check_same_shape(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows != b.rows || a.cols != b.cols {
        return Err(Error::ShapeMismatch {
            what: "paired embeddings".into(),
            expected: a.rows * a.cols,
            actual: b.rows * b.cols,
        });
    }
    Ok(())
}

fn normalized(m: &Matrix, side: &'static str) -> Result<(Matrix, Vec<f64>)> {
    let (hat, norms) = normalize_rows(m);
    if let Some(row) = norms.iter().position(|n| *n == 0.0) {
        return Err(Error::ZeroNorm { side, row });
    }
    Ok((hat, norms))
}

/// Mean of `2 - 2 cos(p_i, z_i)`; the gradient is with respect to `p` only.
pub fn byol_loss(pred: &Matrix, target: &Matrix) -> Result<LossGrad> {
    check_same_shape(pred, target)?;
    let b = pred.rows as f64;
    let (p_hat, p_norms) = normalized(pred, "online")?;
    let (z_hat, _) = normalized(target, "target")?;
    let mut loss = 0.0;
    let mut dp_hat = Matrix::zeros(pred.rows, pred.cols);
    for r in 0..pred.rows {
        loss += 2.0 - 2.0 * dot(p_hat.row(r), z_hat.row(r));
        for (d, z) in dp_hat.row_mut(r).iter_mut().zip(z_hat.row(r)) {
            *d = -2.0 * z / b;
        }
    }
    Ok(LossGrad { loss: loss / b, grad: normalize_rows_backward(&p_hat, &p_norms, &dp_hat) })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VicregWeights {
    pub invariance: f64,
    pub variance: f64,
    pub covariance: f64,
}

impl Default for VicregWeights {
    fn default() -> Self {
        Self { invariance: 25.0, variance: 25.0, covariance: 1.0 }
    }
}

#[derive(Debug, Clone)]
pub struct PairLoss {
    pub loss: f64,
    pub d_a: Matrix,
    pub d_b: Matrix,
}

const VICREG_EPS: f64 = 1e-4;

/// Variance hinge and covariance penalty of one branch, with gradient.
fn vicreg_branch(z: &Matrix, w: &VicregWeights, out: &mut Matrix) -> (f64, f64) {
    let (b, d) = (z.rows, z.cols);
    let bf = b as f64;
    let mut mean = vec![0.0; d];
    for r in 0..b {
        for (m, v) in mean.iter_mut().zip(z.row(r)) {
            *m += v / bf;
        }
    }
    let mut zc = z.clone();
    for r in 0..b {
        for (v, m) in zc.row_mut(r).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    let cov = zc.transpose().matmul(&zc);
    let denom = bf - 1.0;
    let mut var_term = 0.0;
    let mut dvar = vec![0.0; d];
    for j in 0..d {
        let var = cov.get(j, j) / denom;
        let sd = (var + VICREG_EPS).sqrt();
        if sd < 1.0 {
            var_term += (1.0 - sd) / d as f64;
            // d/dvar of -(sd)/d
            dvar[j] = -0.5 / sd / d as f64;
        }
    }
    let mut cov_term = 0.0;
    let mut dcov = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            if i != j {
                let c = cov.get(i, j) / denom;
                cov_term += c * c / d as f64;
                dcov.set(i, j, 2.0 * c / d as f64);
            }
        }
    }
    for j in 0..d {
        dcov.set(j, j, dvar[j] * w.variance * 0.5);
    }
    for i in 0..d {
        for j in 0..d {
            if i != j {
                dcov.set(i, j, dcov.get(i, j) * w.covariance);
            }
        }
    }
    // C = zcᵀ zc / (B-1) and the centring projection is absorbed by zc.
    let mut g = zc.matmul(&dcov.transpose());
    g.add_assign(&zc.matmul(&dcov));
    g.scale(1.0 / denom);
    let mut gmean = vec![0.0; d];
    for r in 0..b {
        for (m, v) in gmean.iter_mut().zip(g.row(r)) {
            *m += v / bf;
        }
    }
    for r in 0..b {
        for ((o, v), m) in out.row_mut(r).iter_mut().zip(g.row(r)).zip(&gmean) {
            *o += v - m;
        }
    }
    (var_term, cov_term)
}

/// Invariance (mean squared error) plus variance hinge and off-diagonal
/// covariance penalty, the latter two averaged over both branches.
pub fn vicreg_loss(z1: &Matrix, z2: &Matrix, w: &VicregWeights) -> Result<PairLoss> {
    check_same_shape(z1, z2)?;
    if z1.rows < 2 {
        return Err(Error::BatchTooSmall { what: "VICReg", needed: 2, got: z1.rows });
    }
    let n = (z1.rows * z1.cols) as f64;
    let mut inv = 0.0;
    let mut d1 = Matrix::zeros(z1.rows, z1.cols);
    let mut d2 = Matrix::zeros(z1.rows, z1.cols);
    for i in 0..z1.data.len() {
        let diff = z1.data[i] - z2.data[i];
        inv += diff * diff / n;
        d1.data[i] = w.invariance * 2.0 * diff / n;
        d2.data[i] = -w.invariance * 2.0 * diff / n;
    }
    let (v1, c1) = vicreg_branch(z1, w, &mut d1);
    let (v2, c2) = vicreg_branch(z2, w, &mut d2);
    let loss = w.invariance * inv + w.variance * 0.5 * (v1 + v2) + w.covariance * (c1 + c2);
    Ok(PairLoss { loss, d_a: d1, d_b: d2 })
}

/// Each anchor `z1_i` is contrasted with its positive `z2_i` against the
/// average of the other normalized `z2_j` rows.
pub fn contrawr_loss(z1: &Matrix, z2: &Matrix, tau: f64) -> Result<PairLoss> {
    check_same_shape(z1, z2)?;
    let b = z1.rows;
    if b < 2 {
        return Err(Error::BatchTooSmall { what: "ContraWR", needed: 2, got: b });
    }
    let (a_hat, a_norms) = normalized(z1, "anchor")?;
    let (p_hat, p_norms) = normalized(z2, "positive")?;
    let d = z1.cols;
    let mut total = vec![0.0; d];
    for r in 0..b {
        for (t, v) in total.iter_mut().zip(p_hat.row(r)) {
            *t += v;
        }
    }
    let bf = b as f64;
    let mut loss = 0.0;
    let mut da_hat = Matrix::zeros(b, d);
    let mut dp_hat = Matrix::zeros(b, d);
    let mut dtotal = vec![0.0; d];
    for i in 0..b {
        let world: Vec<f64> = total.iter().zip(p_hat.row(i)).map(|(t, p)| (t - p) / (bf - 1.0)).collect();
        let sp = dot(a_hat.row(i), p_hat.row(i)) / tau;
        let sw = dot(a_hat.row(i), &world) / tau;
        let lse = logsumexp(&[sp, sw]);
        loss += (lse - sp) / bf;
        let pp = (sp - lse).exp();
        let gp = (pp - 1.0) / (tau * bf);
        let gw = (1.0 - pp) / (tau * bf);
        for c in 0..d {
            da_hat.add_at(i, c, gp * p_hat.get(i, c) + gw * world[c]);
            dp_hat.add_at(i, c, gp * a_hat.get(i, c));
            // world_i = (total - p_i) / (B-1)
            let gworld = gw * a_hat.get(i, c) / (bf - 1.0);
            dtotal[c] += gworld;
            dp_hat.add_at(i, c, -gworld);
        }
    }
    for r in 0..b {
        for (v, t) in dp_hat.row_mut(r).iter_mut().zip(&dtotal) {
            *v += t;
        }
    }
    Ok(PairLoss {
        loss,
        d_a: normalize_rows_backward(&a_hat, &a_norms, &da_hat),
        d_b: normalize_rows_backward(&p_hat, &p_norms, &dp_hat),
    })
}

/// Logistic-regression head over contrastive features.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticHead {
    pub w: Vec<f64>,
    pub b: f64,
}

impl LogisticHead {
    pub fn zeros(dim: usize) -> Self {
        Self { w: vec![0.0; dim], b: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct HeadLoss {
    pub loss: f64,
    /// Gradients with respect to each input representation matrix, in argument order.
    pub d_inputs: Vec<Matrix>,
    pub d_w: Vec<f64>,
    pub d_b: f64,
}

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean binary logistic loss of `head` on feature rows; returns the loss,
/// gradient with respect to the features, and the head gradients.
fn logistic(features: &Matrix, labels: &[bool], head: &LogisticHead) -> Result<(f64, Matrix, Vec<f64>, f64)> {
    if head.w.len() != features.cols {
        return Err(Error::ShapeMismatch { what: "logistic head".into(), expected: features.cols, actual: head.w.len() });
    }
    if labels.len() != features.rows {
        return Err(Error::ShapeMismatch { what: "labels".into(), expected: features.rows, actual: labels.len() });
    }
    let n = features.rows as f64;
    let mut loss = 0.0;
    let mut df = Matrix::zeros(features.rows, features.cols);
    let mut dw = vec![0.0; head.w.len()];
    let mut db = 0.0;
    for (r, &y) in labels.iter().enumerate() {
        let z = dot(features.row(r), &head.w) + head.b;
        let yf = if y { 1.0 } else { 0.0 };
        loss += (softplus(z) - yf * z) / n;
        let g = (sigmoid(z) - yf) / n;
        for (c, d) in df.row_mut(r).iter_mut().enumerate() {
            *d = g * head.w[c];
            dw[c] += g * features.get(r, c);
        }
        db += g;
    }
    Ok((loss, df, dw, db))
}

fn abs_diff(a: &Matrix, b: &Matrix) -> (Matrix, Matrix) {
    let mut f = Matrix::zeros(a.rows, a.cols);
    let mut sign = Matrix::zeros(a.rows, a.cols);
    for i in 0..a.data.len() {
        let d = a.data[i] - b.data[i];
        f.data[i] = d.abs();
        sign.data[i] = d.signum() * (d != 0.0) as u8 as f64;
    }
    (f, sign)
}

/// Relative positioning: label `true` means the two crops are close in time.
pub fn rp_loss(h_anchor: &Matrix, h_other: &Matrix, labels: &[bool], head: &LogisticHead) -> Result<HeadLoss> {
    check_same_shape(h_anchor, h_other)?;
    let (f, sign) = abs_diff(h_anchor, h_other);
    let (loss, df, d_w, d_b) = logistic(&f, labels, head)?;
    let mut da = Matrix::zeros(f.rows, f.cols);
    let mut db = Matrix::zeros(f.rows, f.cols);
    for i in 0..f.data.len() {
        da.data[i] = df.data[i] * sign.data[i];
        db.data[i] = -df.data[i] * sign.data[i];
    }
    Ok(HeadLoss { loss, d_inputs: vec![da, db], d_w, d_b })
}

/// Temporal shuffling: label `true` means `(a, b, c)` are in temporal order.
pub fn ts_loss(h_a: &Matrix, h_b: &Matrix, h_c: &Matrix, labels: &[bool], head: &LogisticHead) -> Result<HeadLoss> {
    check_same_shape(h_a, h_b)?;
    check_same_shape(h_b, h_c)?;
    let (f1, s1) = abs_diff(h_a, h_b);
    let (f2, s2) = abs_diff(h_b, h_c);
    let (n, d) = (f1.rows, f1.cols);
    let mut f = Matrix::zeros(n, 2 * d);
    for r in 0..n {
        f.row_mut(r)[..d].copy_from_slice(f1.row(r));
        f.row_mut(r)[d..].copy_from_slice(f2.row(r));
    }
    let (loss, df, d_w, d_b) = logistic(&f, labels, head)?;
    let mut da = Matrix::zeros(n, d);
    let mut db = Matrix::zeros(n, d);
    let mut dc = Matrix::zeros(n, d);
    for r in 0..n {
        for c in 0..d {
            let g1 = df.get(r, c) * s1.get(r, c);
            let g2 = df.get(r, d + c) * s2.get(r, c);
            da.set(r, c, g1);
            db.set(r, c, -g1 + g2);
            dc.set(r, c, -g2);
        }
    }
    Ok(HeadLoss { loss, d_inputs: vec![da, db, dc], d_w, d_b })
}

#[derive(Debug, Clone)]
pub struct CpcGrad {
    pub loss: f64,
    pub d_context: Vec<f64>,
    pub d_future: Matrix,
    /// One matrix per prediction step, same shape as the negatives.
    pub d_negatives: Vec<Matrix>,
    /// One `context_dim x future_dim` matrix per prediction step.
    pub d_w: Vec<Matrix>,
}

/// InfoNCE over bilinear scores `cᵀ W_k z` of the true `k`-step future
/// against its negatives, summed over steps.
pub fn cpc_loss(context: &[f64], future: &Matrix, negatives: &[Matrix], w: &[Matrix]) -> Result<CpcGrad> {
    let k_steps = future.rows;
    if negatives.len() != k_steps || w.len() != k_steps {
        return Err(Error::ShapeMismatch { what: "prediction steps".into(), expected: k_steps, actual: negatives.len().min(w.len()) });
    }
    let mut loss = 0.0;
    let mut d_context = vec![0.0; context.len()];
    let mut d_future = Matrix::zeros(future.rows, future.cols);
    let mut d_negatives = Vec::with_capacity(k_steps);
    let mut d_w = Vec::with_capacity(k_steps);
    for k in 0..k_steps {
        let neg = &negatives[k];
        if neg.rows == 0 {
            return Err(Error::EmptyPositives(k));
        }
        let wk = &w[k];
        // pred = cᵀ W_k
        let pred: Vec<f64> = (0..wk.cols).map(|j| (0..wk.rows).map(|i| context[i] * wk.get(i, j)).sum()).collect();
        let mut scores = Vec::with_capacity(1 + neg.rows);
        scores.push(dot(&pred, future.row(k)));
        for r in 0..neg.rows {
            scores.push(dot(&pred, neg.row(r)));
        }
        loss += logsumexp(&scores) - scores[0];
        let mut g = softmax(&scores);
        g[0] -= 1.0;
        let mut dpred = vec![0.0; pred.len()];
        for (j, dp) in dpred.iter_mut().enumerate() {
            *dp = g[0] * future.get(k, j) + (0..neg.rows).map(|r| g[r + 1] * neg.get(r, j)).sum::<f64>();
        }
        for (j, v) in d_future.row_mut(k).iter_mut().enumerate() {
            *v = g[0] * pred[j];
        }
        let mut dn = Matrix::zeros(neg.rows, neg.cols);
        for r in 0..neg.rows {
            for (j, v) in dn.row_mut(r).iter_mut().enumerate() {
                *v = g[r + 1] * pred[j];
            }
        }
        d_negatives.push(dn);
        let mut dwk = Matrix::zeros(wk.rows, wk.cols);
        for i in 0..wk.rows {
            for j in 0..wk.cols {
                dwk.set(i, j, context[i] * dpred[j]);
                d_context[i] += wk.get(i, j) * dpred[j];
            }
        }
        d_w.push(dwk);
    }
    Ok(CpcGrad { loss, d_context, d_future, d_negatives, d_w })
}

/// Proximity windows for relative positioning, in crops.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TemporalWindows {
    pub positive: usize,
    pub negative: usize,
}

impl Default for TemporalWindows {
    fn default() -> Self {
        Self { positive: 2, negative: 10 }
    }
}

/// Crop indices within one recording plus the binary target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemporalSample {
    pub indices: Vec<usize>,
    pub label: bool,
}

/// Relative-positioning pair from a recording of `n` crops. Negatives fall
/// back to the farthest available crop when the recording is shorter than
/// the negative window.
pub fn sample_rp<R: Rng + ?Sized>(n: usize, win: TemporalWindows, rng: &mut R) -> Option<TemporalSample> {
    if n < 2 {
        return None;
    }
    let a = rng.random_range(0..n);
    let label = rng.random_bool(0.5);
    let candidates: Vec<usize> = if label {
        (0..n).filter(|&j| j != a && a.abs_diff(j) <= win.positive).collect()
    } else {
        let far: Vec<usize> = (0..n).filter(|&j| a.abs_diff(j) >= win.negative).collect();
        if far.is_empty() {
            let best = (0..n).map(|j| a.abs_diff(j)).max().unwrap_or(0);
            if best <= win.positive {
                return None;
            }
            (0..n).filter(|&j| a.abs_diff(j) == best).collect()
        } else {
            far
        }
    };
    let j = *candidates.get(rng.random_range(0..candidates.len().max(1)))?;
    Some(TemporalSample { indices: vec![a, j], label })
}

/// Temporal-shuffling triple: label `true` keeps `(a, b, c)` in order.
pub fn sample_ts<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Option<TemporalSample> {
    if n < 3 {
        return None;
    }
    let mut idx = rand::seq::index::sample(rng, n, 3).into_vec();
    idx.sort_unstable();
    let label = rng.random_bool(0.5);
    if !label {
        idx.swap(1, if rng.random_bool(0.5) { 0 } else { 2 });
    }
    Some(TemporalSample { indices: idx, label })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_difference, max_relative_error, GRAD_FLOOR};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randm(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect())
    }

    fn check(analytic: &[f64], x: &[f64], f: impl FnMut(&[f64]) -> f64) {
        let num = central_difference(x, 1e-6, f);
        let err = max_relative_error(analytic, &num, GRAD_FLOOR);
        assert!(err < 1e-4, "relative error {err}");
    }

    fn test_crop(len: usize, channels: usize) -> Crop {
        let data = (0..channels * len).map(|i| (2.0 * std::f32::consts::PI * 5.0 * (i % len) as f32 / 100.0).sin()).collect();
        Crop { subject_id: "s".into(), session_id: "1".into(), crop_index: 0, channels, len, data }
    }

    #[test]
    fn identity_augmentation_is_noop() {
        let c = test_crop(500, 3);
        assert_eq!(augment_with(&c, &AugmentationParams::identity()), c);
    }

    #[test]
    fn zero_mask_zeroes_a_window_on_every_channel() {
        let mut c = test_crop(1000, 2);
        c.data.iter_mut().for_each(|v| *v += 3.0);
        let p = AugmentationParams { zero_mask_samples: 200, zero_mask_start: 100, ..AugmentationParams::identity() };
        let out = augment_with(&c, &p);
        for ch in 0..2 {
            let x = &out.data[ch * 1000..(ch + 1) * 1000];
            assert_eq!(x.iter().filter(|v| **v == 0.0).count(), 200);
            assert!(x[100..300].iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn amplitude_scale_is_linear() {
        let c = test_crop(100, 1);
        let p = AugmentationParams { amplitude_scale: 1.5, ..AugmentationParams::identity() };
        let peak = augment_with(&c, &p).data.iter().fold(0.0f32, |m, v| m.max(*v));
        assert!((peak - 1.5).abs() < 1e-5);
    }

    #[test]
    fn bandstop_attenuates_its_centre() {
        let c = test_crop(2000, 1);
        let p = AugmentationParams { bandstop_center_hz: Some(5.0), ..AugmentationParams::identity() };
        let out = augment_with(&c, &p);
        let tail = |x: &[f32]| x[1000..].iter().map(|v| (*v as f64).powi(2)).sum::<f64>();
        assert!(tail(&out.data) < 0.01 * tail(&c.data));
    }

    #[test]
    fn augment_clips_and_is_reproducible() {
        let mut c = test_crop(600, 2);
        c.data.iter_mut().for_each(|v| *v *= 790.0);
        let a = augment(&c, &mut ChaCha8Rng::seed_from_u64(3));
        let b = augment(&c, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
        assert_eq!(a.data.len(), c.data.len());
        assert!(a.data.iter().all(|v| v.abs() <= CLIP_UV));
    }

    #[test]
    fn byol_values_and_gradient() {
        let p = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]);
        assert!(byol_loss(&p, &p).unwrap().loss.abs() < 1e-12);
        let z = Matrix::from_rows(&[vec![0.0, 1.0], vec![3.0, 0.0]]);
        assert!((byol_loss(&p, &z).unwrap().loss - 2.0).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (p, z) = (randm(4, 6, &mut rng), randm(4, 6, &mut rng));
        let oracle: f64 = (0..4)
            .map(|r| {
                let (a, b) = (p.row(r), z.row(r));
                let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
                a.iter().zip(b).map(|(x, y)| (x / na - y / nb).powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            / 4.0;
        let g = byol_loss(&p, &z).unwrap();
        assert!((g.loss - oracle).abs() < 1e-12);
        check(&g.grad.data, &p.data, |x| byol_loss(&Matrix::from_vec(4, 6, x.to_vec()), &z).unwrap().loss);
    }

    /// Direct evaluation with biased-free variance and explicit loops.
    fn vicreg_oracle(z1: &Matrix, z2: &Matrix, w: &VicregWeights) -> f64 {
        let (b, d) = (z1.rows, z1.cols);
        let mut inv = 0.0;
        for r in 0..b {
            for c in 0..d {
                inv += (z1.get(r, c) - z2.get(r, c)).powi(2);
            }
        }
        inv /= (b * d) as f64;
        let branch = |z: &Matrix| {
            let mean: Vec<f64> = (0..d).map(|c| (0..b).map(|r| z.get(r, c)).sum::<f64>() / b as f64).collect();
            let cov = |i: usize, j: usize| {
                (0..b).map(|r| (z.get(r, i) - mean[i]) * (z.get(r, j) - mean[j])).sum::<f64>() / (b - 1) as f64
            };
            let var: f64 = (0..d).map(|j| (1.0 - (cov(j, j) + VICREG_EPS).sqrt()).max(0.0)).sum::<f64>() / d as f64;
            let mut off = 0.0;
            for i in 0..d {
                for j in 0..d {
                    if i != j {
                        off += cov(i, j).powi(2);
                    }
                }
            }
            (var, off / d as f64)
        };
        let (v1, c1) = branch(z1);
        let (v2, c2) = branch(z2);
        w.invariance * inv + w.variance * (v1 + v2) / 2.0 + w.covariance * (c1 + c2)
    }

    #[test]
    fn vicreg_values_and_gradient() {
        let w = VicregWeights::default();
        let z = Matrix::from_rows(&[vec![2.0, 0.0], vec![-2.0, 0.0], vec![0.0, 2.0], vec![0.0, -2.0]]);
        assert!(vicreg_loss(&z, &z, &w).unwrap().loss.abs() < 1e-12);
        let collapsed = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert!(vicreg_loss(&collapsed, &collapsed, &w).unwrap().loss > 0.0);
        assert!(vicreg_loss(&Matrix::zeros(1, 2), &Matrix::zeros(1, 2), &w).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z1 = randm(4, 6, &mut rng);
        let mut z2 = randm(4, 6, &mut rng);
        z2.scale(0.3);
        let g = vicreg_loss(&z1, &z2, &w).unwrap();
        assert!((g.loss - vicreg_oracle(&z1, &z2, &w)).abs() < 1e-10);
        check(&g.d_a.data, &z1.data, |x| vicreg_loss(&Matrix::from_vec(4, 6, x.to_vec()), &z2, &w).unwrap().loss);
        check(&g.d_b.data, &z2.data, |x| vicreg_loss(&z1, &Matrix::from_vec(4, 6, x.to_vec()), &w).unwrap().loss);
    }

    fn contrawr_oracle(z1: &Matrix, z2: &Matrix, tau: f64) -> f64 {
        let b = z1.rows;
        let unit = |v: &[f64]| {
            let n = dot(v, v).sqrt();
            v.iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let mut total = 0.0;
        for i in 0..b {
            let a = unit(z1.row(i));
            let p = unit(z2.row(i));
            let mut world = vec![0.0; z1.cols];
            for j in (0..b).filter(|&j| j != i) {
                for (w, v) in world.iter_mut().zip(unit(z2.row(j))) {
                    *w += v / (b - 1) as f64;
                }
            }
            let sp = (dot(&a, &p) / tau).exp();
            let sw = (dot(&a, &world) / tau).exp();
            total += -(sp / (sp + sw)).ln();
        }
        total / b as f64
    }

    #[test]
    fn contrawr_values_and_gradient() {
        let z1 = Matrix::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let near_zero = contrawr_loss(&z1, &z1, 0.1).unwrap().loss;
        assert!(near_zero < 1e-8, "{near_zero}");
        let z2 = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]);
        assert!((contrawr_loss(&z2, &z2, 0.1).unwrap().loss - 2f64.ln()).abs() < 1e-12);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (randm(4, 6, &mut rng), randm(4, 6, &mut rng));
        let g = contrawr_loss(&a, &b, 0.1).unwrap();
        assert!((g.loss - contrawr_oracle(&a, &b, 0.1)).abs() < 1e-10);
        check(&g.d_a.data, &a.data, |x| contrawr_loss(&Matrix::from_vec(4, 6, x.to_vec()), &b, 0.1).unwrap().loss);
        check(&g.d_b.data, &b.data, |x| contrawr_loss(&a, &Matrix::from_vec(4, 6, x.to_vec()), 0.1).unwrap().loss);
    }

    #[test]
    fn rp_chance_bias_and_symmetry() {
        let h = Matrix::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let zero = LogisticHead::zeros(3);
        assert!((rp_loss(&h, &h, &[true], &zero).unwrap().loss - 2f64.ln()).abs() < 1e-12);
        // Identical crops give zero features, so a positive bias favours "close".
        let biased = LogisticHead { w: vec![-1.0; 3], b: 1.0 };
        assert!(rp_loss(&h, &h, &[true], &biased).unwrap().loss < 2f64.ln());
        let o = Matrix::from_rows(&[vec![0.0, 0.0, 1.0]]);
        let close = rp_loss(&h, &o, &[true], &biased).unwrap().loss;
        let far = rp_loss(&h, &o, &[false], &biased).unwrap().loss;
        let close_same = rp_loss(&h, &h, &[true], &biased).unwrap().loss;
        let far_same = rp_loss(&h, &h, &[false], &biased).unwrap().loss;
        assert!((close - far) * (close_same - far_same) < 0.0);
    }

    #[test]
    fn rp_and_ts_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (a, b, c) = (randm(4, 6, &mut rng), randm(4, 6, &mut rng), randm(4, 6, &mut rng));
        let labels = [true, false, true, false];
        let head = LogisticHead { w: (0..6).map(|i| 0.3 * i as f64 - 0.7).collect(), b: 0.2 };
        let g = rp_loss(&a, &b, &labels, &head).unwrap();
        check(&g.d_inputs[0].data, &a.data, |x| rp_loss(&Matrix::from_vec(4, 6, x.to_vec()), &b, &labels, &head).unwrap().loss);
        check(&g.d_inputs[1].data, &b.data, |x| rp_loss(&a, &Matrix::from_vec(4, 6, x.to_vec()), &labels, &head).unwrap().loss);
        check(&g.d_w, &head.w, |x| rp_loss(&a, &b, &labels, &LogisticHead { w: x.to_vec(), b: head.b }).unwrap().loss);

        let head2 = LogisticHead { w: (0..12).map(|i| 0.1 * i as f64 - 0.5).collect(), b: -0.1 };
        let g = ts_loss(&a, &b, &c, &labels, &head2).unwrap();
        let f = |x: &[f64], which: usize| {
            let m = Matrix::from_vec(4, 6, x.to_vec());
            let (p, q, r) = match which {
                0 => (&m, &b, &c),
                1 => (&a, &m, &c),
                _ => (&a, &b, &m),
            };
            ts_loss(p, q, r, &labels, &head2).unwrap().loss
        };
        check(&g.d_inputs[0].data, &a.data, |x| f(x, 0));
        check(&g.d_inputs[1].data, &b.data, |x| f(x, 1));
        check(&g.d_inputs[2].data, &c.data, |x| f(x, 2));
        check(&[g.d_b], &[head2.b], |x| ts_loss(&a, &b, &c, &labels, &LogisticHead { w: head2.w.clone(), b: x[0] }).unwrap().loss);
    }

    #[test]
    fn cpc_limits_and_gradient() {
        let w = vec![Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]])];
        let ctx = [1.0, 0.0];
        let neg = vec![Matrix::from_rows(&[vec![0.0, 1.0], vec![0.0, -1.0]])];
        let fut = Matrix::from_rows(&[vec![0.0, 0.0]]);
        let flat = cpc_loss(&ctx, &fut, &[Matrix::zeros(3, 2)], &w).unwrap();
        assert!((flat.loss - 4f64.ln()).abs() < 1e-12);
        let strong = cpc_loss(&ctx, &Matrix::from_rows(&[vec![50.0, 0.0]]), &neg, &w).unwrap();
        assert!(strong.loss < 1e-12);
        assert!(cpc_loss(&ctx, &fut, &[Matrix::zeros(0, 2)], &w).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c = randm(1, 4, &mut rng).data;
        let fut = randm(2, 6, &mut rng);
        let negs = vec![randm(3, 6, &mut rng), randm(3, 6, &mut rng)];
        let ws = vec![randm(4, 6, &mut rng), randm(4, 6, &mut rng)];
        let g = cpc_loss(&c, &fut, &negs, &ws).unwrap();
        // Oracle: explicit softmax of the scripted scores.
        let mut oracle = 0.0;
        for k in 0..2 {
            let score = |z: &[f64]| (0..4).map(|i| (0..6).map(|j| c[i] * ws[k].get(i, j) * z[j]).sum::<f64>()).sum::<f64>();
            let pos = score(fut.row(k)).exp();
            let all = pos + (0..3).map(|r| score(negs[k].row(r)).exp()).sum::<f64>();
            oracle -= (pos / all).ln();
        }
        assert!((g.loss - oracle).abs() < 1e-10);
        check(&g.d_context, &c, |x| cpc_loss(x, &fut, &negs, &ws).unwrap().loss);
        check(&g.d_future.data, &fut.data, |x| cpc_loss(&c, &Matrix::from_vec(2, 6, x.to_vec()), &negs, &ws).unwrap().loss);
        check(&g.d_negatives[1].data, &negs[1].data, |x| {
            let n = vec![negs[0].clone(), Matrix::from_vec(3, 6, x.to_vec())];
            cpc_loss(&c, &fut, &n, &ws).unwrap().loss
        });
        check(&g.d_w[0].data, &ws[0].data, |x| {
            let w = vec![Matrix::from_vec(4, 6, x.to_vec()), ws[1].clone()];
            cpc_loss(&c, &fut, &negs, &w).unwrap().loss
        });
    }

    #[test]
    fn temporal_samples_respect_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let win = TemporalWindows::default();
        for _ in 0..200 {
            let s = sample_rp(30, win, &mut rng).unwrap();
            let d = s.indices[0].abs_diff(s.indices[1]);
            if s.label {
                assert!(d >= 1 && d <= win.positive);
            } else {
                assert!(d >= win.negative);
            }
            let t = sample_ts(30, &mut rng).unwrap();
            let sorted = t.indices.windows(2).all(|w| w[0] < w[1]);
            assert_eq!(sorted, t.label);
        }
        assert!(sample_rp(1, win, &mut rng).is_none());
        assert!(sample_ts(2, &mut rng).is_none());
    }

    proptest! {
        #[test]
        fn augment_preserves_shape(seed in 0u64..1000, len in 50usize..400, ch in 1usize..4) {
            let c = test_crop(len, ch);
            let out = augment(&c, &mut ChaCha8Rng::seed_from_u64(seed));
            prop_assert_eq!(out.data.len(), c.data.len());
            prop_assert_eq!((out.len, out.channels), (c.len, c.channels));
        }
    }
}
