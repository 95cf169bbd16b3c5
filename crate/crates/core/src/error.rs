use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("malformed WAV data: {0}")]
    Decode(String),
    #[error("unsupported audio format: {0}")]
    UnsupportedFormat(String),
    #[error("low-pass cutoff {cutoff_hz} Hz must lie in (0, {nyquist_hz}) Hz")]
    InvalidCutoff { cutoff_hz: f64, nyquist_hz: f64 },
    #[error("frequency must be non-negative, got {0}")]
    InvalidFrequency(f64),
    #[error("signal has {len} samples, need at least {needed}")]
    SignalTooShort { len: usize, needed: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: interval start {start} must be before end {end}")]
    InvalidInterval { line: usize, start: f64, end: f64 },
    #[error("no {0} windows available in this split")]
    EmptyClass(&'static str),
    #[error("shape mismatch at layer {layer}: {msg}")]
    Shape { layer: usize, msg: String },
    #[error("invalid state: {0}")]
    State(&'static str),
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("corrupt model file: {0}")]
    CorruptModel(String),
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    TrainingDiverged { epoch: usize },
    #[error("window of {window_bins} bins does not fit a recording of {n_bins} bins")]
    WindowTooLarge { window_bins: usize, n_bins: usize },
    #[error("model was trained on spectrogram config {model_hash}, current config is {current_hash}")]
    IncompatibleModel { model_hash: String, current_hash: String },
    #[error("mask lengths differ: {pred} vs {truth}")]
    MaskLength { pred: usize, truth: usize },
    #[error("cannot pack bursts: {0}")]
    Packing(String),
    #[error("evaluation failed: {0}")]
    Evaluation(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json { path: path.into(), source }
    }

    /// Process exit code: 1 for problems with the user's inputs, 2 for failures inside the run.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::TrainingDiverged { .. } | Error::State(_) | Error::Shape { .. } => 2,
            _ => 1,
        }
    }
}
