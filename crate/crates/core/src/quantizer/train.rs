use super::{QuantizerConfig, QuantizerError, QuantizerMetrics, QuantizerModel, Result};
use crate::numerics::{kmeans, AdamW, AdamWConfig, Matrix, Rng, Scalar};

const KMEANS_RESTARTS: usize = 5;

/// Trained model with its per-epoch metrics (entry 0 is right after codebook init).
#[derive(Debug, Clone)]
pub struct TrainedQuantizer<T> {
    pub model: QuantizerModel<T>,
    pub history: Vec<QuantizerMetrics>,
    /// Final factor indices of every training vector, row-aligned.
    pub assignments: Vec<Vec<u32>>,
}

/// Codebooks shrink to at most a quarter of the entity count (never below 2).
pub fn effective_codebook_size(requested: usize, entities: usize) -> usize {
    requested.min((entities / 4).max(2))
}

fn active_ratio(assignments: &[Vec<u32>], levels: usize, k: usize) -> Vec<f64> {
    (0..levels)
        .map(|t| {
            let mut used = vec![false; k];
            for a in assignments {
                used[a[t] as usize] = true;
            }
            used.iter().filter(|&&u| u).count() as f64 / k as f64
        })
        .collect()
}

fn metrics<T: Scalar>(model: &QuantizerModel<T>, data: &Matrix<T>, epoch: usize) -> Result<QuantizerMetrics> {
    let (loss, assignments) = model.evaluate(data)?;
    Ok(QuantizerMetrics {
        epoch,
        rec: loss.rec,
        com: loss.com,
        total: loss.total(),
        active_ratio: active_ratio(&assignments, model.levels(), model.codebook_size()),
    })
}

impl<T: Scalar> QuantizerModel<T> {
    /// Residual K-means over encoded `sample`, one level at a time, keeping the
    /// lowest-WCSS of several restarts.
    pub fn init_codebooks(&mut self, sample: &Matrix<T>, rng: &mut Rng) -> Result<()> {
        let k = self.codebook_size();
        if sample.rows() < k {
            return Err(QuantizerError::TooFewVectors {
                needed: k,
                got: sample.rows(),
            });
        }
        let mut residual = self.encode(sample)?;
        for t in 0..self.levels() {
            let mut km = kmeans(&residual, k, self.config.kmeans_iters, rng)?;
            for _ in 1..KMEANS_RESTARTS {
                let alt = kmeans(&residual, k, self.config.kmeans_iters, rng)?;
                if alt.wcss() < km.wcss() {
                    km = alt;
                }
            }
            for (r, &a) in km.assignments.iter().enumerate() {
                let c = km.centroids.row(a).to_vec();
                for (x, ci) in residual.row_mut(r).iter_mut().zip(c) {
                    *x -= ci;
                }
            }
            self.codebooks[t].value = km.centroids;
        }
        Ok(())
    }
}

/// Learns encoder, decoder and codebooks on the rows of `vectors`.
///
/// Codebooks are initialized by residual K-means on the encoded first
/// shuffled batch. Codes unused for a full epoch are moved onto random
/// residuals of the epoch's last batch when `reseed_dead_codes` is set.
pub fn train_quantizer<T: Scalar>(
    vectors: &Matrix<T>,
    mut config: QuantizerConfig,
    rng: &mut Rng,
) -> Result<TrainedQuantizer<T>> {
    config.validate()?;
    let n = vectors.rows();
    let k = effective_codebook_size(config.codebook_size, n);
    if k != config.codebook_size {
        log::info!(
            "codebook size reduced from {} to {k} for {n} entities",
            config.codebook_size
        );
        config.codebook_size = k;
    }
    if n < k {
        return Err(QuantizerError::TooFewVectors { needed: k, got: n });
    }
    log::info!(
        "training quantizer: T={} K={} D_q={} beta={} epochs={}",
        config.levels,
        config.codebook_size,
        config.code_dim,
        config.beta,
        config.epochs
    );
    let mut model = QuantizerModel::new(vectors.cols(), config.clone(), rng)?;
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    let init_rows = config.batch_size.max(k).min(n);
    model.init_codebooks(&vectors.select_rows(&order[..init_rows]), rng)?;

    let mut opt = AdamW::new(AdamWConfig {
        lr: config.lr,
        weight_decay: config.weight_decay,
        ..Default::default()
    });
    let codebook_offset = model.encoder.params().len() + model.decoder.params().len();
    let mut history = vec![metrics(&model, vectors, 0)?];

    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        let mut usage = vec![vec![0usize; k]; config.levels];
        let mut last_batch = None;
        for chunk in order.chunks(config.batch_size) {
            let batch = vectors.select_rows(chunk);
            let (loss, indices) = model.loss_and_backward(&batch)?;
            if !loss.total().is_finite() {
                return Err(QuantizerError::Diverged { epoch });
            }
            opt.step(&mut model.params_mut());
            for idx in &indices {
                for (t, &m) in idx.iter().enumerate() {
                    usage[t][m as usize] += 1;
                }
            }
            last_batch = Some(batch);
        }
        if config.reseed_dead_codes {
            if let Some(batch) = &last_batch {
                let frozen = model.freeze(batch)?;
                for (t, counts) in usage.iter().enumerate() {
                    let dead: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
                    if dead.is_empty() {
                        continue;
                    }
                    log::debug!("epoch {epoch}: reseeding {} dead codes at level {t}", dead.len());
                    for &c in &dead {
                        let row = rng.below(batch.rows());
                        let src = frozen.residuals[row][t].clone();
                        model.codebooks[t].value.row_mut(c).copy_from_slice(&src);
                    }
                    opt.reset_rows(codebook_offset + t, &dead);
                }
            }
        }
        let m = metrics(&model, vectors, epoch)?;
        if !m.total.is_finite() {
            return Err(QuantizerError::Diverged { epoch });
        }
        log::debug!(
            "epoch {epoch}: rec {:.5} com {:.5} active {:?}",
            m.rec,
            m.com,
            m.active_ratio
        );
        history.push(m);
    }
    let assignments = model.assign_batch(vectors)?;
    Ok(TrainedQuantizer {
        model,
        history,
        assignments,
    })
}
