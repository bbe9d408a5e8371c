use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] mvdream_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    /// Training hit a non-finite value; a crash checkpoint was written.
    #[error("training diverged at episode {episode}, train step {step}: {message} (crash checkpoint: {checkpoint})")]
    Diverged {
        episode: usize,
        step: u64,
        message: String,
        checkpoint: String,
    },
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;
