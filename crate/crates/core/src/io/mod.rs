//! File formats: WAV audio, JSON-lines manifests, binary weight files and
//! training configs.

pub mod config;
pub mod manifest;
pub mod wav;
pub mod weights;
