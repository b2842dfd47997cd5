use rand::Rng;

use crate::nn::{BatchNorm, Elu, Layer, Linear, Real, Relu, Sequential, Tensor};
use crate::{Error, Result};

pub const TEXT_DIM: usize = 768;
pub const SHARED_DIM: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectorKind {
    /// EEG features to the shared space.
    EegElm,
    /// Frozen text embeddings to the shared space.
    TextElm,
    /// EEG features to the text encoder's native dimension.
    EegMflag,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectorSpec {
    pub kind: ProjectorKind,
    pub input_dim: usize,
}

impl ProjectorSpec {
    pub fn new(kind: ProjectorKind, input_dim: usize) -> Self {
        Self { kind, input_dim }
    }

    pub fn output_dim(&self) -> usize {
        match self.kind {
            ProjectorKind::EegElm | ProjectorKind::TextElm => SHARED_DIM,
            ProjectorKind::EegMflag => TEXT_DIM,
        }
    }

    pub fn build<T: Real, R: Rng>(&self, rng: &mut R) -> Sequential<T> {
        let d = self.input_dim;
        match self.kind {
            ProjectorKind::EegElm => Sequential::new(vec![
                Layer::Linear(Linear::new("proj_eeg.fc1", d, 512, rng)),
                Layer::BatchNorm(BatchNorm::new("proj_eeg.bn1", 512)),
                Layer::Elu(Elu::new()),
                Layer::Linear(Linear::new("proj_eeg.fc2", 512, SHARED_DIM, rng)),
            ]),
            ProjectorKind::TextElm => Sequential::new(vec![
                Layer::Linear(Linear::new("proj_text.fc1", d, 1024, rng)),
                Layer::BatchNorm(BatchNorm::new("proj_text.bn1", 1024)),
                Layer::Relu(Relu::new()),
                Layer::Linear(Linear::new("proj_text.fc2", 1024, SHARED_DIM, rng)),
                Layer::BatchNorm(BatchNorm::new("proj_text.bn2", SHARED_DIM)),
            ]),
            ProjectorKind::EegMflag => Sequential::new(vec![
                Layer::Linear(Linear::new("proj_mflag.fc1", d, 512, rng)),
                Layer::BatchNorm(BatchNorm::new("proj_mflag.bn1", 512)),
                Layer::Elu(Elu::new()),
                Layer::Linear(Linear::new("proj_mflag.fc2", 512, TEXT_DIM, rng)),
            ]),
        }
    }
}

/// Applies a projector in inference mode after validating the input width.
pub fn project<T: Real>(proj: &Sequential<T>, h: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, d) = h.dims2();
    if d != proj.input_dim() {
        return Err(Error::ShapeMismatch { what: "projector input".into(), expected: proj.input_dim(), actual: d });
    }
    Ok(proj.infer(h))
}
