//! Wav2Small: a 72K-parameter arousal/dominance/valence regressor on raw
//! 16 kHz audio, with the tooling to distill it from a teacher and ship it
//! as a compact weight file.

pub mod distill;
pub mod dsp;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod tensor;

pub use dsp::Waveform;
pub use error::{Error, Result, WeightFileError};
pub use model::{AdvPredictor, AdvTriple, FusedWav2Small, TokenMatrix, Wav2Small};
pub use nn::Mode;
