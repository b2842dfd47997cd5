//! EEG encoder, projection heads and the frozen text encoder interface.

mod eeg;
mod projector;
mod text;

pub use eeg::{pool_sizes_for, EegEncoder, EncoderSpec, DEFAULT_FILTERS, DEFAULT_IN_CHANNELS, DEFAULT_KERNELS};
pub use projector::{project, ProjectorKind, ProjectorSpec, SHARED_DIM, TEXT_DIM};
pub use text::{ConceptLexicon, StubTextEncoder, TextEncoder};
