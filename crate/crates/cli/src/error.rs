use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error("missing {path}; run `factorgraph {stage}` first")]
    MissingArtifact { path: PathBuf, stage: &'static str },
    #[error("{context}: {message}")]
    Runtime { context: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{0} check(s) failed")]
    ChecksFailed(usize),
}

impl CliError {
    pub fn runtime(context: impl Into<String>, err: impl std::fmt::Display) -> Self {
        Self::Runtime {
            context: context.into(),
            message: err.to_string(),
        }
    }

    /// 2 for bad input configuration, 1 for everything that failed while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            _ => 1,
        }
    }
}
