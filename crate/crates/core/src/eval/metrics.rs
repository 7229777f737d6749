//! Single-relevant-item ranking metrics.
//!
//! Ties are broken by ascending item id: a candidate with the same score as
//! the target ranks above it exactly when its id is smaller.

use serde::{Deserialize, Serialize};

pub const TIE_POLICY: &str = "equal scores ordered by ascending item id";
pub const GAUC_WEIGHTING: &str = "per-user AUC weighted by candidate count; ties count 0.5";

/// `1 / log2(rank + 1)` inside the cutoff, else 0.
pub fn ndcg_at_k(rank: usize, k: usize) -> f64 {
    debug_assert!(rank >= 1);
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

pub fn hr_at_k(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0
    } else {
        0.0
    }
}

pub fn mrr(rank: usize) -> f64 {
    1.0 / rank as f64
}

/// Position of the target under the tie policy plus the number of other
/// candidates sharing its score.
pub fn rank_of(scores: &[f64], items: &[u32], target: usize) -> (usize, usize) {
    let (st, it) = (scores[target], items[target]);
    let mut above = 0;
    let mut ties = 0;
    for (j, (&s, &i)) in scores.iter().zip(items).enumerate() {
        if j == target {
            continue;
        }
        if s > st {
            above += 1;
        } else if s == st {
            ties += 1;
            if i < it {
                above += 1;
            }
        }
    }
    (above + 1, ties)
}

/// Fraction of negatives scored below the target, ties counting half.
/// `None` when there are no negatives.
pub fn user_auc(scores: &[f64], target: usize) -> Option<f64> {
    let n = scores.len().checked_sub(1).filter(|&n| n > 0)?;
    let st = scores[target];
    let mut wins = 0.0;
    for (j, &s) in scores.iter().enumerate() {
        if j == target {
            continue;
        }
        if s < st {
            wins += 1.0;
        } else if s == st {
            wins += 0.5;
        }
    }
    Some(wins / n as f64)
}

/// One user's ranking outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserMetrics {
    pub user: u32,
    pub rank: usize,
    pub ties: usize,
    pub candidates: usize,
    pub ndcg: f64,
    pub hr: f64,
    pub rr: f64,
    pub auc: Option<f64>,
}

impl UserMetrics {
    pub fn from_scores(user: u32, scores: &[f64], items: &[u32], target: usize, k: usize) -> Self {
        let (rank, ties) = rank_of(scores, items, target);
        Self {
            user,
            rank,
            ties,
            candidates: scores.len(),
            ndcg: ndcg_at_k(rank, k),
            hr: hr_at_k(rank, k),
            rr: mrr(rank),
            auc: user_auc(scores, target),
        }
    }
}

/// Candidates ordered by descending score under the tie policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub user: u32,
    pub items: Vec<u32>,
    pub target: u32,
    pub tie_policy: String,
}

impl RankedList {
    pub fn new(user: u32, items: &[u32], scores: &[f64], target: u32) -> Self {
        let mut order: Vec<usize> = (0..items.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(items[a].cmp(&items[b])));
        Self {
            user,
            items: order.into_iter().map(|j| items[j]).collect(),
            target,
            tie_policy: TIE_POLICY.into(),
        }
    }

    /// 1-based position of the target.
    pub fn rank(&self) -> Option<usize> {
        self.items.iter().position(|&i| i == self.target).map(|p| p + 1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn analytic_values() {
        assert_eq!(ndcg_at_k(1, 10), 1.0);
        assert_eq!(ndcg_at_k(3, 10), 0.5);
        assert_eq!(ndcg_at_k(11, 10), 0.0);
        assert_eq!(mrr(4), 0.25);
        assert_eq!(hr_at_k(10, 10), 1.0);
        assert_eq!(hr_at_k(11, 10), 0.0);
    }

    #[test]
    fn auc_extremes() {
        let mut s: Vec<f64> = (0..11).map(|x| x as f64).collect();
        assert_eq!(user_auc(&s, 10), Some(1.0));
        s.reverse();
        assert_eq!(user_auc(&s, 10), Some(0.0));
        assert_eq!(user_auc(&[1.0], 0), None);
    }

    #[test]
    fn ties_follow_item_id() {
        let items = [5, 2, 9, 1];
        let scores = [1.0, 1.0, 1.0, 0.0];
        assert_eq!(rank_of(&scores, &items, 0), (2, 2));
        assert_eq!(rank_of(&scores, &items, 1), (1, 2));
        assert_eq!(rank_of(&scores, &items, 2), (3, 2));
        assert_eq!(user_auc(&scores, 0), Some(2.0 / 3.0));
    }

    /// Sort-based rank and all-pairs AUC as independent oracles.
    fn oracle(scores: &[f64], items: &[u32], target: usize) -> (usize, Option<f64>) {
        let list = RankedList::new(1, items, scores, items[target]);
        let rank = list.rank().unwrap();
        let mut num = 0.0;
        let mut den = 0.0;
        for j in 0..scores.len() {
            if j != target {
                den += 1.0;
                num += match scores[target].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 1.0,
                    std::cmp::Ordering::Equal => 0.5,
                    std::cmp::Ordering::Less => 0.0,
                };
            }
        }
        (rank, (den > 0.0).then(|| num / den))
    }

    #[test]
    fn matches_oracle_on_random_instances() {
        let mut rng = Rng::new(11);
        for _ in 0..100 {
            let n = 1 + rng.below(20);
            let mut items: Vec<u32> = rng.sample_distinct(50, n).into_iter().map(|i| i as u32 + 1).collect();
            rng.shuffle(&mut items);
            let scores: Vec<f64> = (0..n).map(|_| rng.below(5) as f64).collect();
            let target = rng.below(n);
            let m = UserMetrics::from_scores(1, &scores, &items, target, 10);
            let (rank, auc) = oracle(&scores, &items, target);
            assert_eq!(m.rank, rank);
            assert_eq!(m.auc, auc);
            let log = (rank as f64 + 1.0).log2();
            assert_eq!(m.ndcg, if rank <= 10 { 1.0 / log } else { 0.0 });
            assert_eq!(m.rr, 1.0 / rank as f64);
        }
    }

    proptest! {
        #[test]
        fn permuting_candidates_keeps_metrics(seed in 0u64..10_000) {
            let mut rng = Rng::new(seed);
            let n = 2 + rng.below(19);
            let items: Vec<u32> = rng.sample_distinct(40, n).into_iter().map(|i| i as u32 + 1).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.below(3) as f64).collect();
            let target = rng.below(n);
            let a = UserMetrics::from_scores(1, &scores, &items, target, 10);
            let mut perm: Vec<usize> = (0..n).collect();
            rng.shuffle(&mut perm);
            let s2: Vec<f64> = perm.iter().map(|&j| scores[j]).collect();
            let i2: Vec<u32> = perm.iter().map(|&j| items[j]).collect();
            let t2 = perm.iter().position(|&j| j == target).unwrap();
            prop_assert_eq!(a, UserMetrics::from_scores(1, &s2, &i2, t2, 10));
        }
    }
}
