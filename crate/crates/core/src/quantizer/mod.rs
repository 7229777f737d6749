//! Residual vector quantization of semantic vectors into multi-level latent factors.
//!
//! A vector `v` is encoded to `x = encoder(v)`. Starting from `r¹ = x`, each
//! level picks the nearest code `m^t = argmin_k ‖r^t − c_k^t‖²` and passes the
//! residual `r^{t+1} = r^t − c_{m^t}^t` on. The sum of the picked codes is
//! decoded back to `v̂`. Training minimizes reconstruction plus commitment
//! loss with a straight-through estimator across the discrete selection.

mod alternatives;
mod io;
mod model;
mod train;

use serde::{Deserialize, Serialize};

pub use alternatives::{extract_hc, extract_lsh};
pub use io::{read_assignments, write_assignments, RQVQ_MAGIC, RQVQ_VERSION};
pub use model::{BatchLoss, FrozenQuantization, QuantizeOutput, QuantizerModel};
pub use train::{effective_codebook_size, train_quantizer, TrainedQuantizer};

use crate::numerics::NumericsError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QuantizerConfig {
    /// Number of codebooks `T`.
    pub levels: usize,
    /// Codes per codebook `K`.
    pub codebook_size: usize,
    /// Code dimension `D_q`.
    pub code_dim: usize,
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    /// Weight of the encoder-side commitment term.
    pub beta: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub kmeans_iters: usize,
    /// Re-seed codes left unused for a whole epoch.
    pub reseed_dead_codes: bool,
    pub seed: u64,
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            codebook_size: 256,
            code_dim: 32,
            hidden: vec![512, 256],
            beta: 0.25,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 64,
            epochs: 30,
            kmeans_iters: 25,
            reseed_dead_codes: true,
            seed: 0,
        }
    }
}

impl QuantizerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(QuantizerError::Config(m));
        if self.levels < 1 {
            return bad("levels must be >= 1".into());
        }
        if self.codebook_size < 2 {
            return bad(format!("codebook size must be >= 2, got {}", self.codebook_size));
        }
        if self.code_dim < 1 {
            return bad("code dimension must be >= 1".into());
        }
        if !(self.beta > 0.0) {
            return bad(format!("beta must be > 0, got {}", self.beta));
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if !(self.lr > 0.0) {
            return bad(format!("learning rate must be > 0, got {}", self.lr));
        }
        Ok(())
    }
}

/// Per-entity latent factor indices `[m¹, …, m^T]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FactorAssignment {
    pub entity: u64,
    pub indices: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerMetrics {
    pub epoch: usize,
    pub rec: f64,
    pub com: f64,
    pub total: f64,
    /// Fraction of each codebook used by at least one reference vector.
    pub active_ratio: Vec<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum QuantizerError {
    #[error("invalid quantizer config: {0}")]
    Config(String),
    #[error("input dimension {found}, model expects {expected}")]
    Dimension { expected: usize, found: usize },
    #[error("need at least {needed} vectors, got {got}")]
    TooFewVectors { needed: usize, got: usize },
    #[error("training diverged (non-finite loss) in epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("malformed model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, QuantizerError>;
