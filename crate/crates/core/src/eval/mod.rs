//! Retrieval, zero-shot classification, linear probing, the supervised
//! reference, within/between-subject similarity and alignment traces.

mod metrics;
mod plot;
mod probe;
mod supervised;
mod trace;
mod zeroshot;

use std::collections::BTreeMap;
use std::path::Path;

pub use metrics::{auroc, balanced_accuracy, f1, macro_auroc};
pub use plot::{histogram_svg, line_svg, write_columns, Histogram};
pub use probe::{
    fit_logistic, linear_probe, stratified_folds, stratified_subsample, LogisticModel, ProbeGrid, ProbeResult,
    LABEL_FRACTIONS,
};
pub use supervised::{supervised_reference, SupervisedOptions, SupervisedReport, WEIGHT_DECAYS};
pub use trace::{align_trace, crop_inside, AlignmentTrace};
pub use zeroshot::{zero_shot, PromptEnsemble, ZeroShotMode, ZeroShotResult};

use crate::corpus::Label;
use crate::encoders::TextEncoder;
use crate::linalg::{cosine, dot, norm, Matrix};
use crate::trainer::{label_index, CropDataset, Model};
use crate::{Error, Result};

/// Mean of a group of embeddings, L2-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated {
    pub vector: Vec<f64>,
    /// The mean had (numerically) zero norm; `vector` is all zeros.
    pub zero_information: bool,
}

pub fn aggregate(rows: &[&[f64]]) -> Result<Aggregated> {
    let first = rows.first().ok_or_else(|| Error::InvalidArgument("aggregate over an empty group".into()))?;
    let mut mean = vec![0.0; first.len()];
    for r in rows {
        if r.len() != mean.len() {
            return Err(Error::ShapeMismatch { what: "embedding width".into(), expected: mean.len(), actual: r.len() });
        }
        mean.iter_mut().zip(*r).for_each(|(m, v)| *m += v / rows.len() as f64);
    }
    let scale = rows.iter().map(|r| norm(r)).fold(0.0, f64::max);
    let n = norm(&mean);
    if n <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
        return Ok(Aggregated { vector: vec![0.0; mean.len()], zero_information: true });
    }
    Ok(Aggregated { vector: mean.iter().map(|v| v / n).collect(), zero_information: false })
}

/// Aggregates the rows of `m`, grouped by `keys`, in first-appearance order.
pub fn aggregate_by_key<K: Ord + Clone>(m: &Matrix, keys: &[K]) -> Result<Vec<(K, Aggregated)>> {
    let mut order: Vec<K> = Vec::new();
    let mut groups: BTreeMap<K, Vec<&[f64]>> = BTreeMap::new();
    for (i, k) in keys.iter().enumerate() {
        let g = groups.entry(k.clone()).or_default();
        if g.is_empty() {
            order.push(k.clone());
        }
        g.push(m.row(i));
    }
    order.into_iter().map(|k| aggregate(&groups[&k]).map(|a| (k, a))).collect()
}

/// Rank (1-based) of candidate `i` for query `i` under cosine similarity.
/// Equal scores rank by candidate index.
pub fn retrieval_ranks(queries: &Matrix, candidates: &Matrix) -> Result<Vec<usize>> {
    if queries.rows != candidates.rows {
        return Err(Error::ShapeMismatch { what: "retrieval pairs".into(), expected: candidates.rows, actual: queries.rows });
    }
    let mut ranks = Vec::with_capacity(queries.rows);
    for i in 0..queries.rows {
        let s: Vec<f64> = (0..candidates.rows).map(|j| cosine(queries.row(i), candidates.row(j))).collect();
        let ahead = (0..s.len()).filter(|&j| s[j] > s[i] || (s[j] == s[i] && j < i)).count();
        ranks.push(ahead + 1);
    }
    Ok(ranks)
}

/// Fraction of queries whose paired candidate (same row index) ranks within the top `k`.
pub fn retrieve(queries: &Matrix, candidates: &Matrix, k: usize) -> Result<f64> {
    if k == 0 || k > candidates.rows {
        return Err(Error::InvalidArgument(format!("top-{k} over {} candidates", candidates.rows)));
    }
    let ranks = retrieval_ranks(queries, candidates)?;
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Pairwise crop cosine similarities split by subject identity.
#[derive(Debug, Clone, Default)]
pub struct SimilarityPairs {
    pub within: Vec<f64>,
    pub between: Vec<f64>,
}

impl SimilarityPairs {
    pub fn collect(emb: &Matrix, subjects: &[String]) -> Self {
        let normed: Vec<Vec<f64>> = (0..emb.rows)
            .map(|i| {
                let n = norm(emb.row(i));
                emb.row(i).iter().map(|v| if n > 0.0 { v / n } else { 0.0 }).collect()
            })
            .collect();
        let mut out = Self::default();
        for i in 0..emb.rows {
            for j in i + 1..emb.rows {
                let c = dot(&normed[i], &normed[j]);
                if subjects[i] == subjects[j] {
                    out.within.push(c);
                } else {
                    out.between.push(c);
                }
            }
        }
        out
    }

    pub fn ratio(&self) -> Result<f64> {
        if self.within.is_empty() || self.between.is_empty() {
            return Err(Error::Degenerate("need within- and between-subject pairs".into()));
        }
        let ws = self.within.iter().sum::<f64>() / self.within.len() as f64;
        let bs = self.between.iter().sum::<f64>() / self.between.len() as f64;
        if bs == 0.0 {
            return Err(Error::Degenerate("mean between-subject similarity is zero".into()));
        }
        Ok(ws / bs)
    }
}

/// Mean within-subject over mean between-subject cosine similarity.
pub fn ws_bs_ratio(emb: &Matrix, subjects: &[String]) -> Result<f64> {
    SimilarityPairs::collect(emb, subjects).ratio()
}

/// Frozen-encoder outputs for one recording, one row per crop.
#[derive(Debug, Clone)]
pub struct RecordingEmbeddings {
    pub subject_id: String,
    pub session_id: String,
    pub label: Option<Label>,
    pub features: Matrix,
    /// Shared-space embeddings when the model has an EEG projector.
    pub projected: Option<Matrix>,
}

pub const EMBED_CHUNK: usize = 32;

pub fn embed_recordings(model: &Model, ds: &CropDataset) -> Result<Vec<RecordingEmbeddings>> {
    let mut out = Vec::with_capacity(ds.recordings.len());
    for (r, rec) in ds.recordings.iter().enumerate() {
        let idx: Vec<(usize, usize)> = (0..rec.crops.len()).map(|c| (r, c)).collect();
        let h = model.embed(&ds.tensor(&idx), EMBED_CHUNK)?;
        out.push(RecordingEmbeddings {
            subject_id: rec.subject_id.clone(),
            session_id: rec.session_id.clone(),
            label: rec.label,
            projected: model.project_eeg(&h),
            features: Matrix::from_tensor(&h),
        });
    }
    Ok(out)
}

/// All crop rows stacked, with the owning subject of each row.
pub fn stack_crops(recs: &[RecordingEmbeddings]) -> (Matrix, Vec<String>) {
    let cols = recs.first().map_or(0, |r| r.features.cols);
    let mut data = Vec::new();
    let mut subjects = Vec::new();
    for r in recs {
        data.extend_from_slice(&r.features.data);
        subjects.extend(std::iter::repeat_n(r.subject_id.clone(), r.features.rows));
    }
    (Matrix::from_vec(subjects.len(), cols, data), subjects)
}

/// One vector per recording: the aggregated encoder features (or projected
/// embeddings) with its class index, skipping unlabeled recordings.
pub fn recording_matrix(recs: &[RecordingEmbeddings], projected: bool) -> Result<(Matrix, Vec<usize>)> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for r in recs {
        let Some(y) = r.label.and_then(label_index) else { continue };
        let m = if projected {
            r.projected.as_ref().ok_or_else(|| Error::InvalidArgument("model has no EEG projector".into()))?
        } else {
            &r.features
        };
        let rows_ref: Vec<&[f64]> = (0..m.rows).map(|i| m.row(i)).collect();
        rows.push(aggregate(&rows_ref)?.vector);
        labels.push(y);
    }
    Ok((Matrix::from_rows(&rows), labels))
}

/// Subject-level report queries and EEG candidates in the shared space, for
/// subjects with both crops and eligible report text.
pub fn retrieval_pairs(
    model: &Model,
    ds: &CropDataset,
    recs: &[RecordingEmbeddings],
    text: &dyn TextEncoder,
) -> Result<(Matrix, Matrix, Vec<String>)> {
    let mut queries = Vec::new();
    let mut candidates = Vec::new();
    let mut ids = Vec::new();
    for s in &ds.subjects {
        if s.texts.is_empty() || s.crops.is_empty() {
            continue;
        }
        let feats: Vec<Vec<f64>> = s.texts.iter().map(|t| text.embed(t)).collect();
        let lt = model.project_text(&feats).ok_or_else(|| Error::InvalidArgument("model has no text side".into()))?;
        let mut eeg: Vec<&[f64]> = Vec::new();
        for &r in &s.recordings {
            let p = recs[r].projected.as_ref().ok_or_else(|| Error::InvalidArgument("model has no EEG projector".into()))?;
            eeg.extend((0..p.rows).map(|i| p.row(i)));
        }
        queries.push(aggregate(&(0..lt.rows).map(|i| lt.row(i)).collect::<Vec<_>>())?.vector);
        candidates.push(aggregate(&eeg)?.vector);
        ids.push(s.id.clone());
    }
    if queries.is_empty() {
        return Err(Error::Degenerate("no subject has both EEG and report text".into()));
    }
    Ok((Matrix::from_rows(&queries), Matrix::from_rows(&candidates), ids))
}

/// One line of a metrics file.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRecord {
    pub task: String,
    pub config_hash: String,
    pub seed: u64,
    pub metric: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn new(task: &str, config_hash: &str, seed: u64, metric: &str, value: f64) -> Self {
        Self { task: task.into(), config_hash: config_hash.into(), seed, metric: metric.into(), value }
    }
}

pub const METRICS_HEADER: &str = "task\tconfig_hash\tseed\tmetric\tvalue";

pub fn metrics_tsv(records: &[MetricRecord]) -> String {
    let mut s = format!("{METRICS_HEADER}\n");
    for r in records {
        s.push_str(&format!("{}\t{}\t{}\t{}\t{}\n", r.task, r.config_hash, r.seed, r.metric, r.value));
    }
    s
}

pub fn write_metrics(path: &Path, records: &[MetricRecord]) -> Result<()> {
    std::fs::write(path, metrics_tsv(records)).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let src = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let origin = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in src.lines().enumerate().skip(1) {
        let f: Vec<&str> = line.split('\t').collect();
        let bad = |m: &str| Error::Parse { path: origin.clone(), line: i + 1, message: m.into() };
        if f.len() != 5 {
            return Err(bad("expected 5 columns"));
        }
        out.push(MetricRecord {
            task: f[0].into(),
            config_hash: f[1].into(),
            seed: f[2].parse().map_err(|_| bad("bad seed"))?,
            metric: f[3].into(),
            value: f[4].parse().map_err(|_| bad("bad value"))?,
        });
    }
    Ok(out)
}

/// Balanced accuracy, AUROC and F1 from per-class scores; predictions are
/// the first maximal class.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMetrics {
    pub balanced_accuracy: f64,
    pub auroc: Option<f64>,
    pub f1: f64,
    pub predictions: Vec<usize>,
}

impl ClassMetrics {
    pub fn from_scores(truth: &[usize], scores: &[Vec<f64>]) -> Self {
        let predictions: Vec<usize> = scores.iter().map(|s| argmax(s)).collect();
        Self {
            balanced_accuracy: balanced_accuracy(truth, &predictions),
            auroc: macro_auroc(truth, scores),
            f1: f1(truth, &predictions),
            predictions,
        }
    }
}

/// Index of the first maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
