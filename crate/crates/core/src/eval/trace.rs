use crate::encoders::TextEncoder;
use crate::linalg::cosine;
use crate::nn::Tensor;
use crate::synth::Event;
use crate::trainer::Model;
use crate::{Error, Result};

use super::EMBED_CHUNK;

/// Crop-by-crop similarity between a recording and a text snippet.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentTrace {
    pub similarity: Vec<f64>,
    pub argmax: usize,
    pub argmin: usize,
}

/// Cosine similarity of each projected crop of `crops` (in temporal order)
/// to the projected snippet.
pub fn align_trace(model: &Model, crops: &Tensor<f32>, snippet: &str, text: &dyn TextEncoder) -> Result<AlignmentTrace> {
    if snippet.trim().is_empty() {
        return Err(Error::InvalidArgument("empty snippet".into()));
    }
    let h = model.embed(crops, EMBED_CHUNK)?;
    let eeg = model.project_eeg(&h).ok_or_else(|| Error::InvalidArgument("model has no EEG projector".into()))?;
    let t = model.project_text(&[text.embed(snippet)]).ok_or_else(|| Error::InvalidArgument("model has no text side".into()))?;
    let similarity: Vec<f64> = (0..eeg.rows).map(|i| cosine(eeg.row(i), t.row(0))).collect();
    if similarity.is_empty() {
        return Err(Error::Degenerate("recording has no crops".into()));
    }
    let mut argmax = 0;
    let mut argmin = 0;
    for (i, s) in similarity.iter().enumerate() {
        if *s > similarity[argmax] {
            argmax = i;
        }
        if *s < similarity[argmin] {
            argmin = i;
        }
    }
    Ok(AlignmentTrace { similarity, argmax, argmin })
}

/// Whether crop `index` of `crop_seconds` has its midpoint inside `event`.
pub fn crop_inside(index: usize, crop_seconds: f64, event: &Event) -> bool {
    let mid = (index as f64 + 0.5) * crop_seconds;
    mid >= event.start_s && mid <= event.end_s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::StubTextEncoder;
    use crate::trainer::{ExperimentConfig, Objective};

    #[test]
    fn duplicate_crops_trace_equal_and_empty_snippet_fails() {
        let mut cfg = ExperimentConfig::new(Objective::ElmMilEL);
        cfg.crop_seconds = 5.0;
        cfg.width = 4;
        let model = Model::new(&cfg).unwrap();
        let one: Vec<f32> = (0..20 * 500).map(|i| ((i * 37 % 101) as f32 - 50.0) * 0.1).collect();
        let x = Tensor::from_vec(&[2, 20, 500], [one.clone(), one].concat());
        let text = StubTextEncoder::new(0);
        let t = align_trace(&model, &x, "spike and wave", &text).unwrap();
        assert_eq!(t.similarity[0], t.similarity[1]);
        assert!(align_trace(&model, &x, "  ", &text).is_err());
    }

    #[test]
    fn midpoint_rule() {
        let e = Event { start_s: 70.0, end_s: 190.0 };
        assert!(!crop_inside(0, 60.0, &e));
        assert!(crop_inside(1, 60.0, &e));
        assert!(crop_inside(2, 60.0, &e));
        assert!(!crop_inside(3, 60.0, &e));
    }
}
