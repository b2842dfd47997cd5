//! Alignment objectives between EEG and text embeddings.
//!
//! Every loss returns its value together with the gradient with respect to
//! its inputs. Similarity-based losses differentiate with respect to the
//! similarity matrix; [`SimilarityMatrix::backward`] carries that gradient
//! back to the raw embeddings.

use crate::linalg::{dot, logsumexp, normalize_rows, normalize_rows_backward, softmax, Matrix};
use crate::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.3;

/// Cosine similarities between EEG rows and text rows.
#[derive(Debug, Clone)]
pub struct SimilarityMatrix {
    /// `[B_e x B_l]`, entry `(j, k)` is `ê_j · l̂_k`.
    pub values: Matrix,
    pub tau: f64,
    e_hat: Matrix,
    e_norms: Vec<f64>,
    l_hat: Matrix,
    l_norms: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn rows(&self) -> usize {
        self.values.rows
    }

    pub fn cols(&self) -> usize {
        self.values.cols
    }

    /// Wraps precomputed similarities. `backward` on the result returns zero-sized gradients.
    pub fn from_values(values: Matrix, tau: f64) -> Self {
        Self {
            values,
            tau,
            e_hat: Matrix::zeros(0, 0),
            e_norms: Vec::new(),
            l_hat: Matrix::zeros(0, 0),
            l_norms: Vec::new(),
        }
    }

    /// Maps a gradient on the similarity values to gradients on the EEG and text embeddings.
    pub fn backward(&self, ds: &Matrix) -> (Matrix, Matrix) {
        let de_hat = ds.matmul(&self.l_hat);
        let dl_hat = ds.transpose().matmul(&self.e_hat);
        (
            normalize_rows_backward(&self.e_hat, &self.e_norms, &de_hat),
            normalize_rows_backward(&self.l_hat, &self.l_norms, &dl_hat),
        )
    }
}

fn check_nonzero(m: &Matrix, norms: &[f64], side: &'static str) -> Result<()> {
    match norms.iter().position(|&n| n == 0.0 || !n.is_finite()) {
        Some(row) if m.cols > 0 => Err(Error::ZeroNorm { side, row }),
        _ => Ok(()),
    }
}

pub fn similarity(e: &Matrix, l: &Matrix, tau: f64) -> Result<SimilarityMatrix> {
    if e.cols != l.cols {
        return Err(Error::ShapeMismatch { what: "embedding dimension".into(), expected: e.cols, actual: l.cols });
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    let (e_hat, e_norms) = normalize_rows(e);
    let (l_hat, l_norms) = normalize_rows(l);
    check_nonzero(e, &e_norms, "eeg")?;
    check_nonzero(l, &l_norms, "text")?;
    let values = e_hat.matmul_t(&l_hat);
    Ok(SimilarityMatrix { values, tau, e_hat, e_norms, l_hat, l_norms })
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    /// Gradient of the loss with respect to the similarity values.
    pub grad: Matrix,
}

/// Symmetric InfoNCE with the diagonal as positives.
pub fn infonce(s: &SimilarityMatrix) -> Result<LossGrad> {
    let (b, bl) = (s.rows(), s.cols());
    if b != bl {
        return Err(Error::NonSquare { rows: b, cols: bl });
    }
    let tau = s.tau;
    let mut grad = Matrix::zeros(b, b);
    let mut total = 0.0;
    let scale = 1.0 / (2.0 * b as f64);
    for j in 0..b {
        let z: Vec<f64> = s.values.row(j).iter().map(|v| v / tau).collect();
        total += logsumexp(&z) - z[j];
        for (k, p) in softmax(&z).into_iter().enumerate() {
            grad.add_at(j, k, scale * (p - if k == j { 1.0 } else { 0.0 }) / tau);
        }
    }
    for k in 0..b {
        let z: Vec<f64> = (0..b).map(|j| s.values.get(j, k) / tau).collect();
        total += logsumexp(&z) - z[k];
        for (j, p) in softmax(&z).into_iter().enumerate() {
            grad.add_at(j, k, scale * (p - if j == k { 1.0 } else { 0.0 }) / tau);
        }
    }
    Ok(LossGrad { loss: total * scale, grad })
}

/// Positive index sets for both directions.
#[derive(Debug, Clone, PartialEq)]
pub struct PositiveSets {
    /// For each text column `k`, the EEG rows sharing its subject.
    pub p: Vec<Vec<usize>>,
    /// For each EEG row `j`, the text columns sharing its subject.
    pub q: Vec<Vec<usize>>,
    pub eeg_subjects: Vec<usize>,
    pub text_subjects: Vec<usize>,
}

impl PositiveSets {
    /// Positives are all pairs sharing a subject id.
    pub fn from_subjects<S: PartialEq>(eeg: &[S], text: &[S]) -> Self {
        let all: Vec<&S> = eeg.iter().chain(text).collect();
        let id = |s: &S| all.iter().position(|x| *x == s).expect("element is in the list");
        Self::from_ids(eeg.iter().map(id).collect(), text.iter().map(id).collect())
    }

    fn from_ids(eeg_subjects: Vec<usize>, text_subjects: Vec<usize>) -> Self {
        let p = text_subjects
            .iter()
            .map(|t| (0..eeg_subjects.len()).filter(|&j| eeg_subjects[j] == *t).collect())
            .collect();
        let q = eeg_subjects
            .iter()
            .map(|e| (0..text_subjects.len()).filter(|&k| text_subjects[k] == *e).collect())
            .collect();
        Self { p, q, eeg_subjects, text_subjects }
    }

    /// One-to-one pairing of row `i` with column `i`.
    pub fn diagonal(b: usize) -> Self {
        Self::from_ids((0..b).collect(), (0..b).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    /// Softmax over EEG crops for each text segment.
    EGivenL,
    /// Softmax over text segments for each EEG crop.
    LGivenE,
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
    Attention,
    Sum,
}

impl Aggregation {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mean => "mean",
            Self::Max => "max",
            Self::Attention => "attention",
            Self::Sum => "sum",
        }
    }
}

impl std::str::FromStr for Aggregation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "max" => Ok(Self::Max),
            "attention" => Ok(Self::Attention),
            "sum" => Ok(Self::Sum),
            other => Err(Error::Config(format!("unknown aggregation `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MilOptions {
    pub direction: Direction,
    pub aggregation: Aggregation,
    /// Weight anchors so that every subject contributes equally instead of every anchor.
    pub per_subject_weighting: bool,
}

impl Default for MilOptions {
    fn default() -> Self {
        Self { direction: Direction::Joint, aggregation: Aggregation::Mean, per_subject_weighting: false }
    }
}

/// Negative log of the aggregated positive mass for one anchor, and its gradient on the logits.
fn anchor_term(z: &[f64], pos: &[usize], mode: Aggregation) -> (f64, Vec<f64>) {
    let lse_all = logsumexp(z);
    let mut g = softmax(z);
    let zp: Vec<f64> = pos.iter().map(|&i| z[i]).collect();
    let log_num = match mode {
        Aggregation::Mean => {
            for (&i, w) in pos.iter().zip(softmax(&zp)) {
                g[i] -= w;
            }
            logsumexp(&zp) - (pos.len() as f64).ln()
        }
        Aggregation::Sum => {
            for (&i, w) in pos.iter().zip(softmax(&zp)) {
                g[i] -= w;
            }
            logsumexp(&zp)
        }
        Aggregation::Max => {
            let mut best = 0;
            for (t, &v) in zp.iter().enumerate() {
                if v > zp[best] {
                    best = t;
                }
            }
            g[pos[best]] -= 1.0;
            zp[best]
        }
        Aggregation::Attention => {
            let z2: Vec<f64> = zp.iter().map(|v| 2.0 * v).collect();
            for ((&i, a), b) in pos.iter().zip(softmax(&z2)).zip(softmax(&zp)) {
                g[i] -= 2.0 * a - b;
            }
            logsumexp(&z2) - logsumexp(&zp)
        }
    };
    (lse_all - log_num, g)
}

fn anchor_weights(anchor_subjects: &[usize], per_subject: bool) -> Vec<f64> {
    let n = anchor_subjects.len() as f64;
    if !per_subject {
        return vec![1.0 / n; anchor_subjects.len()];
    }
    let mut counts = std::collections::BTreeMap::new();
    for s in anchor_subjects {
        *counts.entry(*s).or_insert(0usize) += 1;
    }
    let subjects = counts.len() as f64;
    anchor_subjects.iter().map(|s| 1.0 / (subjects * counts[s] as f64)).collect()
}

fn one_direction(s: &SimilarityMatrix, pos: &PositiveSets, e_given_l: bool, opts: &MilOptions) -> Result<LossGrad> {
    let (be, bl) = (s.rows(), s.cols());
    let tau = s.tau;
    let (sets, anchors) = if e_given_l { (&pos.p, &pos.text_subjects) } else { (&pos.q, &pos.eeg_subjects) };
    let n_anchor = if e_given_l { bl } else { be };
    let n_cand = if e_given_l { be } else { bl };
    if sets.len() != n_anchor {
        return Err(Error::ShapeMismatch { what: "positive sets".into(), expected: n_anchor, actual: sets.len() });
    }
    let weights = anchor_weights(anchors, opts.per_subject_weighting);
    let mut grad = Matrix::zeros(be, bl);
    let mut loss = 0.0;
    for (k, set) in sets.iter().enumerate() {
        if set.is_empty() {
            return Err(Error::EmptyPositives(k));
        }
        if let Some(&bad) = set.iter().find(|&&i| i >= n_cand) {
            return Err(Error::ShapeMismatch { what: format!("positive index for anchor {k}"), expected: n_cand, actual: bad });
        }
        let z: Vec<f64> = if e_given_l {
            (0..be).map(|j| s.values.get(j, k) / tau).collect()
        } else {
            s.values.row(k).iter().map(|v| v / tau).collect()
        };
        let (term, g) = anchor_term(&z, set, opts.aggregation);
        loss += weights[k] * term;
        for (i, gi) in g.into_iter().enumerate() {
            let v = weights[k] * gi / tau;
            if e_given_l {
                grad.add_at(i, k, v);
            } else {
                grad.add_at(k, i, v);
            }
        }
    }
    Ok(LossGrad { loss, grad })
}

/// Multiple-instance InfoNCE. With `Aggregation::Mean` the numerator averages
/// exponentiated similarities over each anchor's positive set.
pub fn mil_infonce(s: &SimilarityMatrix, pos: &PositiveSets, opts: &MilOptions) -> Result<LossGrad> {
    match opts.direction {
        Direction::EGivenL => one_direction(s, pos, true, opts),
        Direction::LGivenE => one_direction(s, pos, false, opts),
        Direction::Joint => {
            let a = one_direction(s, pos, true, opts)?;
            let b = one_direction(s, pos, false, opts)?;
            let mut grad = a.grad;
            grad.add_assign(&b.grad);
            grad.scale(0.5);
            Ok(LossGrad { loss: 0.5 * (a.loss + b.loss), grad })
        }
    }
}

/// Joint MIL loss with a non-default aggregation of the positive set.
pub fn aggregation_variant(s: &SimilarityMatrix, pos: &PositiveSets, mode: Aggregation) -> Result<LossGrad> {
    mil_infonce(s, pos, &MilOptions { aggregation: mode, ..MilOptions::default() })
}

#[derive(Debug, Clone)]
pub struct MflagLoss {
    pub align: f64,
    pub orth: f64,
    pub total: f64,
    /// Gradient with respect to the pre-projection features.
    pub d_h: Matrix,
    /// Gradient with respect to the projected EEG embeddings.
    pub d_e: Matrix,
    /// Gradient with respect to the text embeddings.
    pub d_l: Matrix,
}

const ORTH_STD_FLOOR: f64 = 1e-5;

/// Alignment plus decorrelation loss.
///
/// The decorrelation term standardizes each feature dimension across the
/// batch and penalizes the distance of `ZᵀZ / B` from the identity.
pub fn mflag_loss(h: &Matrix, e: &Matrix, l: &Matrix) -> Result<MflagLoss> {
    let b = h.rows;
    if b < 2 {
        return Err(Error::BatchTooSmall { what: "decorrelation loss", needed: 2, got: b });
    }
    if e.rows != b || l.rows != b {
        return Err(Error::ShapeMismatch { what: "batch size".into(), expected: b, actual: e.rows.min(l.rows) });
    }
    if e.cols != l.cols {
        return Err(Error::ShapeMismatch { what: "embedding dimension".into(), expected: e.cols, actual: l.cols });
    }
    let bf = b as f64;

    let (e_hat, e_norms) = normalize_rows(e);
    let (l_hat, l_norms) = normalize_rows(l);
    check_nonzero(e, &e_norms, "eeg")?;
    check_nonzero(l, &l_norms, "text")?;
    let mut align = 0.0;
    let mut de_hat = Matrix::zeros(b, e.cols);
    let mut dl_hat = Matrix::zeros(b, l.cols);
    for r in 0..b {
        align += 2.0 - 2.0 * dot(e_hat.row(r), l_hat.row(r));
        for c in 0..e.cols {
            de_hat.set(r, c, -2.0 * l_hat.get(r, c) / bf);
            dl_hat.set(r, c, -2.0 * e_hat.get(r, c) / bf);
        }
    }
    align /= bf;

    let d = h.cols;
    let mut z = Matrix::zeros(b, d);
    let mut scale = vec![0.0; d];
    let mut floored = vec![false; d];
    for c in 0..d {
        let mean = (0..b).map(|r| h.get(r, c)).sum::<f64>() / bf;
        let var = (0..b).map(|r| (h.get(r, c) - mean).powi(2)).sum::<f64>() / bf;
        let sd = var.sqrt();
        floored[c] = sd < ORTH_STD_FLOOR;
        scale[c] = sd.max(ORTH_STD_FLOOR);
        for r in 0..b {
            z.set(r, c, (h.get(r, c) - mean) / scale[c]);
        }
    }
    let mut corr = z.transpose().matmul(&z);
    corr.scale(1.0 / bf);
    let mut orth = 0.0;
    let mut gc = Matrix::zeros(d, d);
    for i in 0..d {
        for k in 0..d {
            let v = corr.get(i, k);
            if i == k {
                orth += (1.0 - v).powi(2);
                gc.set(i, k, -2.0 * (1.0 - v));
            } else {
                orth += v * v;
                gc.set(i, k, 2.0 * v);
            }
        }
    }
    let mut dz = z.matmul(&gc);
    dz.scale(2.0 / bf);
    let mut d_h = Matrix::zeros(b, d);
    for c in 0..d {
        let mean_dz = (0..b).map(|r| dz.get(r, c)).sum::<f64>() / bf;
        let mean_dzz = if floored[c] { 0.0 } else { (0..b).map(|r| dz.get(r, c) * z.get(r, c)).sum::<f64>() / bf };
        for r in 0..b {
            d_h.set(r, c, (dz.get(r, c) - mean_dz - z.get(r, c) * mean_dzz) / scale[c]);
        }
    }

    Ok(MflagLoss {
        align,
        orth,
        total: align + orth,
        d_h,
        d_e: normalize_rows_backward(&e_hat, &e_norms, &de_hat),
        d_l: normalize_rows_backward(&l_hat, &l_norms, &dl_hat),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{central_difference, max_relative_error, GRAD_FLOOR};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn sm(rows: &[Vec<f64>], tau: f64) -> SimilarityMatrix {
        SimilarityMatrix::from_values(Matrix::from_rows(rows), tau)
    }

    #[test]
    fn similarity_matches_per_pair_cosine() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let e = random(3, 4, &mut rng);
        let l = random(3, 4, &mut rng);
        let s = similarity(&e, &l, 1.0).unwrap();
        for j in 0..3 {
            for k in 0..3 {
                let (a, b) = (e.row(j), l.row(k));
                let mut num = 0.0;
                let mut na = 0.0;
                let mut nb = 0.0;
                for i in 0..4 {
                    num += a[i] * b[i];
                    na += a[i] * a[i];
                    nb += b[i] * b[i];
                }
                assert!((s.values.get(j, k) - num / (na.sqrt() * nb.sqrt())).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn similarity_trivial_cases_and_zero_norm() {
        let e = Matrix::from_rows(&[vec![1.0, 0.0]]);
        assert_eq!(similarity(&e, &e, 1.0).unwrap().values.data, vec![1.0]);
        let l = Matrix::from_rows(&[vec![0.0, 3.0]]);
        assert_eq!(similarity(&e, &l, 1.0).unwrap().values.data, vec![0.0]);
        let z = Matrix::from_rows(&[vec![0.0, 0.0]]);
        assert!(matches!(similarity(&z, &e, 1.0), Err(Error::ZeroNorm { side: "eeg", row: 0 })));
    }

    #[test]
    fn infonce_hand_values() {
        let s = sm(&[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0);
        let expected = (1.0 + (-1.0f64).exp()).ln();
        assert!((infonce(&s).unwrap().loss - expected).abs() < 1e-12);
        assert!((expected - 0.3133).abs() < 1e-4);
        assert_eq!(infonce(&sm(&[vec![0.7]], 0.3)).unwrap().loss, 0.0);
        let s = sm(&[vec![0.9, -0.2, 0.1], vec![0.3, 0.5, -0.7], vec![0.0, 0.4, 0.8]], 1e6);
        assert!((infonce(&s).unwrap().loss - 3f64.ln()).abs() < 1e-5);
        assert!(matches!(infonce(&sm(&[vec![0.0, 1.0]], 1.0)), Err(Error::NonSquare { .. })));
    }

    #[test]
    fn mil_two_positive_hand_values() {
        let pos = PositiveSets::from_subjects(&["a", "a"], &["a"]);
        let opts = MilOptions { direction: Direction::EGivenL, ..Default::default() };
        let s = sm(&[vec![1.0], vec![1.0]], 1.0);
        assert!((mil_infonce(&s, &pos, &opts).unwrap().loss - 2f64.ln()).abs() < 1e-12);
        let s = sm(&[vec![1.0], vec![0.0]], 1.0);
        assert!((mil_infonce(&s, &pos, &opts).unwrap().loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn aggregation_modes_on_two_equal_positives() {
        let pos = PositiveSets::from_subjects(&["a", "a"], &["a"]);
        let s = sm(&[vec![1.0], vec![1.0]], 1.0);
        let run = |m| {
            mil_infonce(&s, &pos, &MilOptions { direction: Direction::EGivenL, aggregation: m, per_subject_weighting: false })
                .unwrap()
                .loss
        };
        assert!(run(Aggregation::Sum).abs() < 1e-12);
        assert!((run(Aggregation::Max) - 2f64.ln()).abs() < 1e-12);
        assert!((run(Aggregation::Mean) - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn max_ignores_smaller_positive() {
        // text 0 against three crops; crop 2 is a negative in both instances
        let opts = MilOptions { direction: Direction::EGivenL, aggregation: Aggregation::Max, per_subject_weighting: false };
        let one = sm(&[vec![0.9], vec![-0.5]], 0.3);
        let pos_one = PositiveSets::from_subjects(&["a", "b"], &["a"]);
        let two = sm(&[vec![0.9], vec![0.1], vec![-0.5]], 0.3);
        let pos_two = PositiveSets::from_subjects(&["a", "a", "b"], &["a"]);
        let a = mil_infonce(&one, &pos_one, &opts).unwrap().loss;
        let b = mil_infonce(&two, &pos_two, &opts).unwrap().loss;
        let z = [0.9 / 0.3, 0.1 / 0.3, -0.5 / 0.3];
        let expected = logsumexp(&z) - z[0];
        assert!((b - expected).abs() < 1e-12);
        assert!(b > a);
    }

    #[test]
    fn ties_in_max_pick_lowest_index() {
        let (_, g) = anchor_term(&[1.0, 1.0, 0.0], &[0, 1], Aggregation::Max);
        let p = softmax(&[1.0, 1.0, 0.0]);
        assert!((g[0] - (p[0] - 1.0)).abs() < 1e-15);
        assert!((g[1] - p[1]).abs() < 1e-15);
    }

    #[test]
    fn empty_positive_set_is_rejected() {
        let pos = PositiveSets::from_subjects(&["a"], &["b"]);
        let s = sm(&[vec![0.5]], 1.0);
        assert!(matches!(mil_infonce(&s, &pos, &MilOptions::default()), Err(Error::EmptyPositives(0))));
    }

    #[test]
    fn per_subject_weighting_equalizes_subjects() {
        let w = anchor_weights(&[0, 0, 0, 1], true);
        assert!((w[0] * 3.0 - 0.5).abs() < 1e-15);
        assert!((w[3] - 0.5).abs() < 1e-15);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mflag_align_extremes_and_orth_fixed_point() {
        let h4 = [[1.0, 1.0, 1.0, 1.0], [1.0, -1.0, 1.0, -1.0], [1.0, 1.0, -1.0, -1.0], [1.0, -1.0, -1.0, 1.0]];
        // columns 1..4 of a Sylvester Hadamard matrix: zero mean, unit variance, orthogonal
        let h = Matrix::from_rows(&h4.iter().map(|r| r[1..].to_vec()).collect::<Vec<_>>());
        let e = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0], vec![3.0, 3.0], vec![-1.0, 0.5]]);
        let out = mflag_loss(&h, &e, &e).unwrap();
        assert!(out.align.abs() < 1e-12);
        assert!(out.orth.abs() < 1e-12);
        let perp = Matrix::from_rows(&[vec![0.0, 1.0], vec![-2.0, 0.0], vec![3.0, -3.0], vec![0.5, 1.0]]);
        assert!((mflag_loss(&h, &e, &perp).unwrap().align - 2.0).abs() < 1e-12);
        assert!(matches!(mflag_loss(&Matrix::zeros(1, 3), &e, &e), Err(Error::BatchTooSmall { .. })));
    }

    #[test]
    fn mflag_orth_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let h = random(6, 3, &mut rng);
        let e = random(6, 4, &mut rng);
        let out = mflag_loss(&h, &e, &e).unwrap();
        let mut expected = 0.0;
        let cols: Vec<Vec<f64>> = (0..3)
            .map(|c| {
                let v: Vec<f64> = (0..6).map(|r| h.get(r, c)).collect();
                let m = v.iter().sum::<f64>() / 6.0;
                let sd = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / 6.0).sqrt();
                v.iter().map(|x| (x - m) / sd).collect()
            })
            .collect();
        for i in 0..3 {
            for k in 0..3 {
                let c = dot(&cols[i], &cols[k]) / 6.0;
                expected += if i == k { (1.0 - c) * (1.0 - c) } else { c * c };
            }
        }
        assert!((out.orth - expected).abs() < 1e-12);
    }

    fn check_embedding_grads(loss: impl Fn(&Matrix, &Matrix) -> (f64, Matrix, Matrix), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let e = random(4, 6, &mut rng);
        let l = random(4, 6, &mut rng);
        let (_, de, dl) = loss(&e, &l);
        let ne = central_difference(&e.data, 1e-5, |x| loss(&Matrix::from_vec(4, 6, x.to_vec()), &l).0);
        let nl = central_difference(&l.data, 1e-5, |x| loss(&e, &Matrix::from_vec(4, 6, x.to_vec())).0);
        assert!(max_relative_error(&de.data, &ne, GRAD_FLOOR) < 1e-4);
        assert!(max_relative_error(&dl.data, &nl, GRAD_FLOOR) < 1e-4);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let subj = ["a", "a", "b", "c"];
        let pos = PositiveSets::from_subjects(&subj, &["a", "b", "b", "c"]);
        check_embedding_grads(
            |e, l| {
                let s = similarity(e, l, 0.3).unwrap();
                let out = infonce(&s).unwrap();
                let (de, dl) = s.backward(&out.grad);
                (out.loss, de, dl)
            },
            1,
        );
        for (i, mode) in [Aggregation::Mean, Aggregation::Max, Aggregation::Attention, Aggregation::Sum].into_iter().enumerate() {
            for (d, dir) in [Direction::EGivenL, Direction::LGivenE, Direction::Joint].into_iter().enumerate() {
                for per_subject in [false, true] {
                    let opts = MilOptions { direction: dir, aggregation: mode, per_subject_weighting: per_subject };
                    check_embedding_grads(
                        |e, l| {
                            let s = similarity(e, l, 0.5).unwrap();
                            let out = mil_infonce(&s, &pos, &opts).unwrap();
                            let (de, dl) = s.backward(&out.grad);
                            (out.loss, de, dl)
                        },
                        10 + (i * 3 + d) as u64,
                    );
                }
            }
        }
        check_embedding_grads(
            |e, l| {
                let out = mflag_loss(e, e, l).unwrap();
                let mut de = out.d_h.clone();
                de.add_assign(&out.d_e);
                (out.total, de, out.d_l)
            },
            99,
        );
    }

    fn arb_instance() -> impl Strategy<Value = (Vec<f64>, Vec<usize>, Vec<usize>, f64)> {
        (2usize..6, 3usize..6)
            .prop_flat_map(|(be, bl)| {
                (
                    proptest::collection::vec(-1.0f64..1.0, be * bl),
                    proptest::collection::vec(0usize..3, be),
                    proptest::collection::vec(0usize..3, bl),
                    0.05f64..2.0,
                )
            })
            .prop_map(|(vals, es, ts, tau)| {
                // every subject gets at least one crop and one text
                let mut distinct = es.clone();
                distinct.sort_unstable();
                distinct.dedup();
                let d = distinct.len();
                let ts = ts.iter().enumerate().map(|(k, &t)| if k < d { distinct[k] } else { distinct[t % d] }).collect();
                (vals, es, ts, tau)
            })
    }

    proptest! {
        #[test]
        fn joint_is_mean_of_directions((vals, es, ts, tau) in arb_instance()) {
            let s = SimilarityMatrix::from_values(Matrix::from_vec(es.len(), ts.len(), vals), tau);
            let pos = PositiveSets::from_subjects(&es, &ts);
            for mode in [Aggregation::Mean, Aggregation::Max, Aggregation::Attention, Aggregation::Sum] {
                let run = |direction| mil_infonce(&s, &pos, &MilOptions { direction, aggregation: mode, per_subject_weighting: false }).unwrap().loss;
                let joint = run(Direction::Joint);
                prop_assert_eq!(joint, 0.5 * (run(Direction::EGivenL) + run(Direction::LGivenE)));
            }
        }

        #[test]
        fn permutation_invariance((vals, es, ts, tau) in arb_instance(), seed in 0u64..1000) {
            let (be, bl) = (es.len(), ts.len());
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pr: Vec<usize> = (0..be).collect();
            let mut pc: Vec<usize> = (0..bl).collect();
            use rand::seq::SliceRandom;
            pr.shuffle(&mut rng);
            pc.shuffle(&mut rng);
            let m = Matrix::from_vec(be, bl, vals);
            let mut permuted = Matrix::zeros(be, bl);
            for j in 0..be {
                for k in 0..bl {
                    permuted.set(j, k, m.get(pr[j], pc[k]));
                }
            }
            let es2: Vec<usize> = pr.iter().map(|&j| es[j]).collect();
            let ts2: Vec<usize> = pc.iter().map(|&k| ts[k]).collect();
            for mode in [Aggregation::Mean, Aggregation::Max, Aggregation::Attention, Aggregation::Sum] {
                let opts = MilOptions { aggregation: mode, ..Default::default() };
                let a = mil_infonce(&SimilarityMatrix::from_values(m.clone(), tau), &PositiveSets::from_subjects(&es, &ts), &opts).unwrap().loss;
                let b = mil_infonce(&SimilarityMatrix::from_values(permuted.clone(), tau), &PositiveSets::from_subjects(&es2, &ts2), &opts).unwrap().loss;
                prop_assert!((a - b).abs() < 1e-10);
            }
        }

        #[test]
        fn nonnegative_and_monotone((vals, es, ts, tau) in arb_instance()) {
            let s = SimilarityMatrix::from_values(Matrix::from_vec(es.len(), ts.len(), vals), tau);
            let pos = PositiveSets::from_subjects(&es, &ts);
            let out = mil_infonce(&s, &pos, &MilOptions::default()).unwrap();
            prop_assert!(out.loss >= -1e-12);
            for (k, set) in pos.p.iter().enumerate() {
                for &j in set {
                    prop_assert!(out.grad.get(j, k) <= 1e-12);
                }
            }
        }

        #[test]
        fn infonce_nonnegative(vals in proptest::collection::vec(-1.0f64..1.0, 9), tau in 0.05f64..2.0) {
            let s = SimilarityMatrix::from_values(Matrix::from_vec(3, 3, vals), tau);
            let out = infonce(&s).unwrap();
            prop_assert!(out.loss >= 0.0);
            for j in 0..3 {
                prop_assert!(out.grad.get(j, j) <= 0.0);
            }
        }
    }
}
