//! Interaction ingestion, leave-one-out splitting, and batch sampling.

mod ingest;
mod sampling;
mod split;

use std::collections::HashMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use ingest::{
    load_features, load_interactions, parse_features, parse_interactions, ColumnRef, Delimiter,
    FeatureTable, Schema,
};
pub use sampling::{
    batches_from, build_candidates, epoch_batches, sample_batch, CandidateItems, CandidateMode, CandidateSet,
    EvalSplit, TrainBatch,
};
pub use split::{preprocess, PreprocessConfig, SplitDataset, TrainExample};

/// Index reserved for padding in both user and item vocabularies.
pub const PAD: u32 = 0;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("required column `{0}` not found")]
    MissingColumn(String),
    #[error("dataset is empty: {0}")]
    Empty(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    User,
    Item,
}

/// One user-item event with dense ids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user: u32,
    pub item: u32,
    pub rating: f64,
    pub timestamp: i64,
}

/// Bidirectional map between raw string ids and dense ids starting at 1.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    raw: Vec<String>,
    #[serde(skip)]
    lookup: HashMap<String, u32>,
}

impl Vocab {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_raw(raw: Vec<String>) -> Self {
        let lookup = raw
            .iter()
            .enumerate()
            .map(|(i, r)| (r.clone(), i as u32 + 1))
            .collect();
        Self { raw, lookup }
    }

    /// Dense id for `raw`, inserting it if unseen.
    pub fn intern(&mut self, raw: &str) -> u32 {
        if let Some(&id) = self.lookup.get(raw) {
            return id;
        }
        self.raw.push(raw.to_owned());
        let id = self.raw.len() as u32;
        self.lookup.insert(raw.to_owned(), id);
        id
    }

    pub fn get(&self, raw: &str) -> Option<u32> {
        self.lookup.get(raw).copied()
    }

    pub fn raw(&self, id: u32) -> Option<&str> {
        if id == PAD {
            return None;
        }
        self.raw.get(id as usize - 1).map(String::as_str)
    }

    /// Number of real entries (padding excluded).
    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn raw_ids(&self) -> &[String] {
        &self.raw
    }

    pub(crate) fn rebuild_lookup(&mut self) {
        *self = Self::from_raw(std::mem::take(&mut self.raw));
    }
}

/// Parsed and id-mapped interaction file.
#[derive(Debug, Clone, Default)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
    pub users: Vocab,
    pub items: Vocab,
    /// Lines that could not be parsed.
    pub skipped: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_reserves_zero() {
        let mut v = Vocab::new();
        assert_eq!(v.intern("a"), 1);
        assert_eq!(v.intern("b"), 2);
        assert_eq!(v.intern("a"), 1);
        assert_eq!(v.raw(0), None);
        assert_eq!(v.raw(2), Some("b"));
        assert_eq!(v.len(), 2);
        let rebuilt = Vocab::from_raw(v.raw_ids().to_vec());
        assert_eq!(rebuilt.get("b"), Some(2));
    }
}
