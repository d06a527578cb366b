use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("not a RIFF/WAVE file: {0}")]
    NotWave(String),

    #[error("unsupported wav encoding: {0}")]
    UnsupportedEncoding(String),

    #[error("unsupported channel count {0}, only mono is accepted")]
    UnsupportedChannels(u16),

    #[error("unsupported bit depth {0}, only 16-bit PCM is accepted")]
    UnsupportedBitDepth(u16),

    #[error("sample {index} = {value} is outside the 16-bit PCM range")]
    SampleOutOfRange { index: usize, value: f64 },

    #[error("offset {r} out of range 1..={total}")]
    OffsetOutOfRange { r: usize, total: usize },

    #[error("clip of {len} samples is shorter than one frame ({frame_length})")]
    ClipTooShort { len: usize, frame_length: usize },

    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("target needs {required} frames but only {frames} are available")]
    TargetTooLong { required: usize, frames: usize },

    #[error("empty target transcript")]
    EmptyTarget,

    #[error("character {0:?} is not in the alphabet")]
    UnknownCharacter(char),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("usage: {0}")]
    Usage(String),

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("attack loss became non-finite at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Short stable identifier used in machine-readable CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Io { .. } => "io",
            Error::NotWave(_) => "not_wave",
            Error::UnsupportedEncoding(_) => "unsupported_encoding",
            Error::UnsupportedChannels(_) => "unsupported_channels",
            Error::UnsupportedBitDepth(_) => "unsupported_bit_depth",
            Error::SampleOutOfRange { .. } => "sample_out_of_range",
            Error::OffsetOutOfRange { .. } => "offset_out_of_range",
            Error::ClipTooShort { .. } => "clip_too_short",
            Error::ShapeMismatch { .. } => "shape_mismatch",
            Error::TargetTooLong { .. } => "target_too_long",
            Error::EmptyTarget => "empty_target",
            Error::UnknownCharacter(_) => "unknown_character",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Usage(_) => "usage",
            Error::Diverged { .. } => "diverged",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Checkpoint(_) => "checkpoint",
            Error::Csv(_) => "csv",
        }
    }
}
