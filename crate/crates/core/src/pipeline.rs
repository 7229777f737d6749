//! Glue between stages: semantic vectors to factor tables to graphs.

use crate::graph::FactorTable;
use crate::numerics::{Matrix, Rng};
use crate::quantizer::{train_quantizer, QuantizerConfig, QuantizerError, TrainedQuantizer};
use crate::semantic::EmbeddingSet;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("no semantic vector for entity {0}")]
    MissingVector(u64),
    #[error(transparent)]
    Quantizer(#[from] QuantizerError),
}

/// Rows of `set` for entities `1..=n`, in id order.
pub fn embedding_matrix(set: &EmbeddingSet, n: usize) -> Result<Matrix<f32>, PipelineError> {
    let mut m = Matrix::zeros(n, set.dim);
    for id in 1..=n as u64 {
        let v = set.get(id).ok_or(PipelineError::MissingVector(id))?;
        m.row_mut(id as usize - 1).copy_from_slice(v);
    }
    Ok(m)
}

/// Trains a quantizer on one side's vectors and returns its factor table.
pub fn quantize_side(
    set: &EmbeddingSet,
    n: usize,
    config: &QuantizerConfig,
    stream: u64,
) -> Result<(TrainedQuantizer<f32>, FactorTable), PipelineError> {
    let x = embedding_matrix(set, n)?;
    let mut rng = Rng::derived(config.seed, &[stream]);
    let trained = train_quantizer(&x, config.clone(), &mut rng)?;
    let table = FactorTable::from_rows(trained.model.levels(), trained.model.codebook_size(), &trained.assignments);
    Ok((trained, table))
}
