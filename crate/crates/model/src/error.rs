use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
#[error("invalid config {key}: {message}")]
pub struct ConfigError {
    pub key: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(key: &str, message: impl Into<String>) -> Self {
        Self {
            key: key.to_owned(),
            message: message.into(),
        }
    }
}

/// Inputs the network cannot process.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum InputError {
    #[error("sequence has {len} positions, model supports {max}")]
    TooLong { len: usize, max: usize },
    #[error("token id {0} outside the vocabulary")]
    BadToken(u32),
    #[error("image {index} is {height}x{width}, expected {expected}x{expected}")]
    ImageShape {
        index: usize,
        height: usize,
        width: usize,
        expected: usize,
    },
    #[error("vision slots do not match the images: {0}")]
    Slots(String),
    #[error("loss mask selects no position")]
    EmptyMask,
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("training corpus is empty")]
    EmptyCorpus,
    #[error(transparent)]
    Sequence(#[from] uivlm_core::sequence::SequenceError),
    #[error(transparent)]
    Input(#[from] InputError),
    #[error("loss diverged (non-finite) at step {step}")]
    Divergence { step: usize },
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}
