//! Non-learned factor extractors used as quantizer baselines.

use std::collections::BTreeMap;

use super::{QuantizerError, Result};
use crate::numerics::{kmeans, Matrix, Rng, Scalar};

const HC_KMEANS_ITERS: usize = 50;

/// Hierarchical K-means: level `t` clusters the members of each level-`t−1` group.
///
/// Groups with fewer members than the branch factor are not split; all their
/// members get index 0 at that level.
pub fn extract_hc<T: Scalar>(vectors: &Matrix<T>, branch: &[usize], rng: &mut Rng) -> Result<Vec<Vec<u32>>> {
    if branch.is_empty() {
        return Err(QuantizerError::Config("hc needs at least one level".into()));
    }
    if let Some(b) = branch.iter().find(|&&b| b < 2) {
        return Err(QuantizerError::Config(format!("hc branch factor must be >= 2, got {b}")));
    }
    let n = vectors.rows();
    let mut paths: Vec<Vec<u32>> = vec![Vec::with_capacity(branch.len()); n];
    for (t, &k) in branch.iter().enumerate() {
        let mut groups: BTreeMap<Vec<u32>, Vec<usize>> = BTreeMap::new();
        for (r, p) in paths.iter().enumerate() {
            groups.entry(p.clone()).or_default().push(r);
        }
        for (parent, members) in groups {
            if members.len() < k {
                log::warn!(
                    "hc level {t}: group {parent:?} has {} members, fewer than branch {k}; using index 0",
                    members.len()
                );
                for &r in &members {
                    paths[r].push(0);
                }
                continue;
            }
            let km = kmeans(&vectors.select_rows(&members), k, HC_KMEANS_ITERS, rng)?;
            for (&r, &a) in members.iter().zip(&km.assignments) {
                paths[r].push(a as u32);
            }
        }
    }
    Ok(paths)
}

/// Random-hyperplane hashing: bit `b` of level `t` is set when the vector has a
/// positive projection on that level's `b`-th Gaussian direction.
pub fn extract_lsh<T: Scalar>(vectors: &Matrix<T>, levels: usize, bits: usize, rng: &mut Rng) -> Result<Vec<Vec<u32>>> {
    if levels == 0 {
        return Err(QuantizerError::Config("lsh needs at least one level".into()));
    }
    if !(1..=31).contains(&bits) {
        return Err(QuantizerError::Config(format!("lsh bits must be in 1..=31, got {bits}")));
    }
    let d = vectors.cols();
    let planes: Vec<Matrix<f64>> = (0..levels)
        .map(|_| Matrix::from_fn(bits, d, |_, _| rng.normal()))
        .collect();
    Ok((0..vectors.rows())
        .map(|r| {
            let v = vectors.row(r);
            planes
                .iter()
                .map(|p| {
                    (0..bits).fold(0u32, |acc, b| {
                        let proj: f64 = p.row(b).iter().zip(v).map(|(w, x)| w * x.as_f64()).sum();
                        acc | (u32::from(proj > 0.0) << b)
                    })
                })
                .collect()
        })
        .collect())
}
