//! Per-entity semantic vectors from pluggable providers.

mod prompt;
mod provider;
mod store;

use std::path::{Path, PathBuf};

pub use prompt::{render_prompt, PromptTemplate, DEFAULT_ASPECTS_ITEM, DEFAULT_ASPECTS_USER};
pub use provider::{
    provide_file, provide_http, provide_synthetic, provide_with, DriverOptions, EmbedRequest,
    EmbeddingEndpoint, HttpConfig, HttpEndpoint, MockEndpoint, ProviderOutput, ProviderStats,
};
pub(crate) use provider::unit_vector;
pub use store::{EmbeddingSet, SEMV_MAGIC, SEMV_VERSION};

/// Dense knowledge vector for one entity.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticVector {
    pub id: u64,
    pub values: Vec<f32>,
}

#[derive(Debug, thiserror::Error)]
pub enum SemanticError {
    #[error("template placeholder `{0}` has no value")]
    Template(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed embedding data: {0}")]
    Format(String),
    #[error("vector dimension {found}, expected {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("{failed} of {total} entities failed to embed: {summary}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        summary: String,
    },
    #[error("invalid argument: {0}")]
    Argument(String),
}

impl SemanticError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.to_owned(),
            source,
        }
    }
}
