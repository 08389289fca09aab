//! Audio-visual speaker diarization: features, models, training, decoding and scoring.
pub mod config;
pub mod decodepipe;
pub mod dsp;
mod error;
pub mod models;
pub mod pipeline;
pub mod rttm;
pub mod scorer;
pub mod secondsv;
pub mod synthgen;
pub mod trainer;
pub mod wav;
pub use error::{CoreError, Result};
