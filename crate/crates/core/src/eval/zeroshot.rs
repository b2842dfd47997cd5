use crate::encoders::TextEncoder;
use crate::linalg::{cosine, normalize_rows, Matrix};
use crate::trainer::Model;
use crate::{Error, Result};

use super::{aggregate, ClassMetrics, RecordingEmbeddings};

const NORMAL: [&str; 21] = [
    "Normal EEG.",
    "No pathology present.",
    "No abnormalities.",
    "Normal routine EEG.",
    "Normal awake record.",
    "Normal EEG record.",
    "This EEG is normal.",
    "This is a normal EEG.",
    "This EEG is within normal limits",
    "Normal awake EEG.",
    "Normal asleep EEG.",
    "Normal awake and asleep EEG.",
    "Normal EEG in wakefulness and drowsiness.",
    "No pathology.",
    "EEG shows no pathology.",
    "No abnormalities.",
    "No abnormalities observed.",
    "EEG shows no abnormalities.",
    "No clinical events detected.",
    "No indications of pathology observed.",
    "The EEG is normal.",
];

const ABNORMAL: [&str; 21] = [
    "Abnormal EEG.",
    "Pathology present.",
    "Abnormalities observed.",
    "Markedly abnormal EEG.",
    "Abnormal awake record.",
    "Abnormal EEG record.",
    "This EEG is abnormal.",
    "This is an abnormal EEG.",
    "This EEG is mildly abnormal.",
    "Abnormal awake EEG.",
    "Abnormal asleep EEG.",
    "Abnormal awake and asleep EEG.",
    "Abnormal EEG in wakefulness and drowsiness.",
    "Abnormal EEG due to:",
    "Abnormal EEG for a subject of this age due to:",
    "Abnormalities in the EEG.",
    "Abnormalities observed.",
    "EEG shows abnormalities.",
    "Clinical events detected.",
    "Indications of pathology observed.",
    "The EEG is pathologically abnormal.",
];

/// Phrasings per class; class `i` is label index `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEnsemble {
    pub classes: Vec<String>,
    pub prompts: Vec<Vec<String>>,
}

impl PromptEnsemble {
    pub fn new(classes: Vec<String>, prompts: Vec<Vec<String>>) -> Result<Self> {
        if classes.len() < 2 || classes.len() != prompts.len() || prompts.iter().any(|p| p.is_empty()) {
            return Err(Error::InvalidArgument("prompt ensemble needs at least two classes with one prompt each".into()));
        }
        Ok(Self { classes, prompts })
    }

    /// The 21 normal/abnormal prompt pairs.
    pub fn normal_abnormal() -> Self {
        let own = |v: &[&str]| v.iter().map(|s| s.to_string()).collect();
        Self { classes: vec!["normal".into(), "abnormal".into()], prompts: vec![own(&NORMAL), own(&ABNORMAL)] }
    }

    /// Drops the `i`-th prompt of every class that has one.
    pub fn without(&self, i: usize) -> Result<Self> {
        let prompts = self
            .prompts
            .iter()
            .map(|p| p.iter().enumerate().filter(|(k, _)| *k != i).map(|(_, s)| s.clone()).collect())
            .collect();
        Self::new(self.classes.clone(), prompts)
    }

    pub fn max_prompts(&self) -> usize {
        self.prompts.iter().map(Vec::len).max().unwrap_or(0)
    }

    /// Unit-norm class prototypes `[classes, dim]`: each distinct prompt is
    /// embedded, projected and normalized, then averaged.
    pub fn prototypes(&self, model: &Model, text: &dyn TextEncoder) -> Result<Matrix> {
        let mut rows = Vec::new();
        for class in &self.prompts {
            let mut distinct: Vec<&String> = Vec::new();
            for p in class {
                if !distinct.contains(&p) {
                    distinct.push(p);
                }
            }
            let feats: Vec<Vec<f64>> = distinct.iter().map(|p| text.embed(p)).collect();
            let proj = model.project_text(&feats).ok_or_else(|| Error::InvalidArgument("model has no text side".into()))?;
            let (unit, _) = normalize_rows(&proj);
            rows.push(aggregate(&(0..unit.rows).map(|i| unit.row(i)).collect::<Vec<_>>())?.vector);
        }
        Ok(Matrix::from_rows(&rows))
    }
}

/// How a recording's crops are reduced before comparison with the prototypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ZeroShotMode {
    /// Similarity of the averaged crop embedding.
    #[default]
    AveragedEmbedding,
    /// Average of per-crop similarities.
    AveragedSimilarity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ZeroShotResult {
    /// Per recording, cosine similarity to each class prototype.
    pub similarities: Vec<Vec<f64>>,
    pub metrics: ClassMetrics,
}

/// Classifies projected recording embeddings by their nearest prototype.
/// `truth[i]` is the class index of `recordings[i]`.
pub fn zero_shot(
    recordings: &[&RecordingEmbeddings],
    truth: &[usize],
    prototypes: &Matrix,
    mode: ZeroShotMode,
) -> Result<ZeroShotResult> {
    let mut similarities = Vec::with_capacity(recordings.len());
    for r in recordings {
        let p = r.projected.as_ref().ok_or_else(|| Error::InvalidArgument("model has no EEG projector".into()))?;
        if p.cols != prototypes.cols {
            return Err(Error::ShapeMismatch { what: "prototype width".into(), expected: p.cols, actual: prototypes.cols });
        }
        let sims = match mode {
            ZeroShotMode::AveragedEmbedding => {
                let e = aggregate(&(0..p.rows).map(|i| p.row(i)).collect::<Vec<_>>())?.vector;
                (0..prototypes.rows).map(|c| cosine(&e, prototypes.row(c))).collect()
            }
            ZeroShotMode::AveragedSimilarity => (0..prototypes.rows)
                .map(|c| (0..p.rows).map(|i| cosine(p.row(i), prototypes.row(c))).sum::<f64>() / p.rows as f64)
                .collect(),
        };
        similarities.push(sims);
    }
    let metrics = ClassMetrics::from_scores(truth, &similarities);
    Ok(ZeroShotResult { similarities, metrics })
}
