//! Planted-preference worlds for experiments and tests.
//!
//! Every user and item belongs to one latent cluster. Users mostly consume
//! items of their own cluster, with a skewed popularity inside each cluster,
//! and both sides get semantic vectors scattered around their cluster center.
//!
//! Two optional effects make the sources complementary. With `drift`, users
//! start out in a previous cluster and move to their own one over time, so
//! only their semantic vector states the current interest cleanly. With
//! `mislabeled`, some items get a semantic vector from a wrong cluster, so
//! only interactions reveal their real audience.

use serde::{Deserialize, Serialize};

use crate::dataio::{DataError, PreprocessConfig, SplitDataset, Vocab};
use crate::numerics::Rng;
use crate::semantic::{unit_vector, EmbeddingSet, SemanticError, SemanticVector};

#[derive(Debug, thiserror::Error)]
pub enum SyntheticError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Semantic(#[from] SemanticError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub clusters: usize,
    /// Interactions per user are uniform in `min_interactions..=max_interactions`.
    pub min_interactions: usize,
    pub max_interactions: usize,
    /// Probability that an interaction comes from the user's own cluster.
    pub affinity: f64,
    /// Popularity inside a cluster decays as `rank^-popularity_exponent`.
    pub popularity_exponent: f64,
    pub semantic_dim: usize,
    /// Per-coordinate Gaussian noise around the cluster center.
    pub semantic_noise: f64,
    /// Chance that an on-cluster draw at the start of a sequence comes from the
    /// user's previous cluster; it falls linearly to zero at the end.
    pub drift: f64,
    /// Fraction of items whose semantic vector is centered on another cluster.
    pub mislabeled: f64,
    /// Model input window.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_users: 1000,
            n_items: 2000,
            clusters: 10,
            min_interactions: 20,
            max_interactions: 30,
            affinity: 0.85,
            popularity_exponent: 1.0,
            semantic_dim: 64,
            semantic_noise: 0.05,
            drift: 0.0,
            mislabeled: 0.0,
            max_len: 30,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticWorld {
    pub dataset: SplitDataset,
    /// Indexed by `user - 1`.
    pub user_clusters: Vec<usize>,
    /// Indexed by `item - 1`.
    pub item_clusters: Vec<usize>,
    pub user_vectors: EmbeddingSet,
    pub item_vectors: EmbeddingSet,
}

/// A cluster other than `c`, uniformly.
fn other_cluster(c: usize, k: usize, rng: &mut Rng) -> usize {
    (c + 1 + rng.below(k - 1)) % k
}

fn balanced_labels(n: usize, k: usize, rng: &mut Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    rng.shuffle(&mut labels);
    labels
}

fn scatter(labels: &[usize], centers: &[Vec<f64>], noise: f64, rng: &mut Rng) -> Result<EmbeddingSet, SemanticError> {
    let mut set = EmbeddingSet::new(centers[0].len());
    for (i, &l) in labels.iter().enumerate() {
        let values = centers[l].iter().map(|&c| (c + noise * rng.normal()) as f32).collect();
        set.insert(SemanticVector {
            id: i as u64 + 1,
            values,
        })?;
    }
    Ok(set)
}

pub fn generate(cfg: &SyntheticConfig) -> Result<SyntheticWorld, SyntheticError> {
    let bad = |m: &str| Err(SyntheticError::Config(m.into()));
    if cfg.clusters == 0 || cfg.clusters > cfg.n_items || cfg.clusters > cfg.n_users {
        return bad("clusters must be between 1 and the smaller entity count");
    }
    if cfg.min_interactions < 3 || cfg.min_interactions > cfg.max_interactions {
        return bad("need 3 <= min_interactions <= max_interactions");
    }
    if cfg.max_interactions * 2 > cfg.n_items {
        return bad("max_interactions must be at most half the catalog");
    }
    if !(0.0..=1.0).contains(&cfg.affinity) || cfg.semantic_dim == 0 || !(cfg.semantic_noise >= 0.0) {
        return bad("affinity must be in [0, 1], semantic_dim positive, noise non-negative");
    }
    let shifts = cfg.drift > 0.0 || cfg.mislabeled > 0.0;
    if !(0.0..=1.0).contains(&cfg.drift) || !(0.0..=1.0).contains(&cfg.mislabeled) || (shifts && cfg.clusters < 2) {
        return bad("drift and mislabeled must be in [0, 1] and need at least two clusters");
    }
    let mut rng = Rng::new(cfg.seed);
    let item_clusters = balanced_labels(cfg.n_items, cfg.clusters, &mut rng);
    let user_clusters = balanced_labels(cfg.n_users, cfg.clusters, &mut rng);
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); cfg.clusters];
    for (i, &c) in item_clusters.iter().enumerate() {
        members[c].push(i as u32 + 1);
    }
    for m in &mut members {
        rng.shuffle(m);
    }
    let weights: Vec<Vec<f64>> = members
        .iter()
        .map(|m| (0..m.len()).map(|r| ((r + 1) as f64).powf(-cfg.popularity_exponent)).collect())
        .collect();
    let span = cfg.max_interactions - cfg.min_interactions + 1;
    let sequences: Vec<Vec<u32>> = user_clusters
        .iter()
        .map(|&c| {
            let len = cfg.min_interactions + rng.below(span);
            let previous = if cfg.drift > 0.0 { other_cluster(c, cfg.clusters, &mut rng) } else { c };
            let mut seen = std::collections::HashSet::new();
            let mut seq = Vec::with_capacity(len);
            while seq.len() < len {
                let item = if rng.unit() < cfg.affinity {
                    let old = cfg.drift * (1.0 - seq.len() as f64 / (len - 1) as f64);
                    let k = if cfg.drift > 0.0 && rng.unit() < old { previous } else { c };
                    members[k][rng.weighted_index(&weights[k]).expect("positive weights")]
                } else {
                    1 + rng.below(cfg.n_items) as u32
                };
                if seen.insert(item) {
                    seq.push(item);
                }
            }
            seq
        })
        .collect();
    let users = Vocab::from_raw((1..=cfg.n_users).map(|u| format!("u{u}")).collect());
    let items = Vocab::from_raw((1..=cfg.n_items).map(|i| format!("i{i}")).collect());
    let pre = PreprocessConfig {
        max_len: cfg.max_len,
        ..PreprocessConfig::default()
    };
    let dataset = SplitDataset::from_sequences(pre, users, items, sequences)?;
    let centers: Vec<Vec<f64>> = (0..cfg.clusters).map(|_| unit_vector(cfg.semantic_dim, &mut rng)).collect();
    let labels: Vec<usize> = item_clusters
        .iter()
        .map(|&c| {
            if cfg.mislabeled > 0.0 && rng.unit() < cfg.mislabeled {
                other_cluster(c, cfg.clusters, &mut rng)
            } else {
                c
            }
        })
        .collect();
    let item_vectors = scatter(&labels, &centers, cfg.semantic_noise, &mut rng)?;
    let user_vectors = scatter(&user_clusters, &centers, cfg.semantic_noise, &mut rng)?;
    Ok(SyntheticWorld {
        dataset,
        user_clusters,
        item_clusters,
        user_vectors,
        item_vectors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            n_users: 100,
            n_items: 1000,
            seed: 3,
            ..SyntheticConfig::default()
        }
    }

    #[test]
    fn shapes_and_determinism() {
        let w = generate(&small()).unwrap();
        assert_eq!(w.dataset.n_users(), 100);
        assert_eq!(w.dataset.n_items(), 1000);
        assert_eq!(w.user_vectors.len(), 100);
        assert_eq!(w.item_vectors.len(), 1000);
        for u in w.dataset.user_ids() {
            let p = w.dataset.positives(u);
            assert!((20..=30).contains(&p.len()));
            assert_eq!(p.iter().collect::<std::collections::HashSet<_>>().len(), p.len());
        }
        let again = generate(&small()).unwrap();
        assert_eq!(again.dataset, w.dataset);
        assert_eq!(again.item_vectors, w.item_vectors);
    }

    #[test]
    fn users_prefer_their_cluster() {
        let w = generate(&small()).unwrap();
        let (mut own, mut total) = (0, 0);
        for u in w.dataset.user_ids() {
            for &i in w.dataset.positives(u) {
                total += 1;
                if w.item_clusters[i as usize - 1] == w.user_clusters[u as usize - 1] {
                    own += 1;
                }
            }
        }
        let frac = own as f64 / total as f64;
        assert!(frac > 0.8, "{frac}");
    }

    #[test]
    fn rejects_bad_configs() {
        for cfg in [
            SyntheticConfig { clusters: 0, ..small() },
            SyntheticConfig { min_interactions: 2, ..small() },
            SyntheticConfig { max_interactions: 600, ..small() },
            SyntheticConfig { affinity: 1.5, ..small() },
            SyntheticConfig { drift: -0.1, ..small() },
            SyntheticConfig { mislabeled: 1.5, ..small() },
            SyntheticConfig { clusters: 1, drift: 0.5, ..small() },
        ] {
            assert!(generate(&cfg).is_err());
        }
    }

    fn own_share(w: &SyntheticWorld, at: impl Fn(&[u32]) -> u32) -> f64 {
        let users: Vec<u32> = w.dataset.user_ids().collect();
        let own = users
            .iter()
            .filter(|&&u| {
                let i = at(w.dataset.positives(u));
                w.item_clusters[i as usize - 1] == w.user_clusters[u as usize - 1]
            })
            .count();
        own as f64 / users.len() as f64
    }

    #[test]
    fn drift_moves_users_toward_their_cluster() {
        let cfg = SyntheticConfig { affinity: 1.0, drift: 1.0, ..small() };
        let w = generate(&cfg).unwrap();
        assert_eq!(own_share(&w, |s| s[0]), 0.0);
        assert_eq!(own_share(&w, |s| s[s.len() - 1]), 1.0);
        let plain = generate(&SyntheticConfig { affinity: 1.0, ..small() }).unwrap();
        assert_eq!(own_share(&plain, |s| s[0]), 1.0);
    }

    #[test]
    fn mislabeled_items_leave_their_cluster_center() {
        let off_center = |mislabeled: f64| {
            let w = generate(&SyntheticConfig { mislabeled, ..small() }).unwrap();
            let mut centroids = vec![vec![0.0f32; 64]; 10];
            for (u, &c) in w.user_clusters.iter().enumerate() {
                for (a, &b) in centroids[c].iter_mut().zip(w.user_vectors.get(u as u64 + 1).unwrap()) {
                    *a += b / 10.0;
                }
            }
            let off = (0..w.item_clusters.len())
                .filter(|&i| {
                    let v = w.item_vectors.get(i as u64 + 1).unwrap();
                    crate::numerics::dot(v, &centroids[w.item_clusters[i]]) < 0.5
                })
                .count();
            off as f64 / w.item_clusters.len() as f64
        };
        assert_eq!(off_center(0.0), 0.0);
        let share = off_center(0.4);
        assert!((share - 0.4).abs() < 0.06, "{share}");
    }
}
