//! Ranking metrics, the evaluation harness and experiment runners.

mod experiment;
mod metrics;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use experiment::{
    ablation_config, default_ablation_rows, run_ablation, run_experiment, run_level_selection, AblationRow, AblationSpec,
    AblationTable, ExperimentOutput, LevelRow, LevelTable, TEST_STREAM,
};
pub use metrics::{
    hr_at_k, mrr, ndcg_at_k, rank_of, user_auc, RankedList, UserMetrics, GAUC_WEIGHTING, TIE_POLICY,
};

use crate::dataio::CandidateSet;
use crate::numerics::{Matrix, Scalar};
use crate::recommender::RecModel;

pub const DEFAULT_K: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("no user has a negative candidate")]
    NoEvaluableUser,
    #[error("invalid candidates: {0}")]
    Input(String),
    #[error("model: {0}")]
    Model(String),
    #[error(transparent)]
    Rec(#[from] crate::recommender::RecError),
    #[error(transparent)]
    Data(#[from] crate::dataio::DataError),
    #[error(transparent)]
    Graph(#[from] crate::graph::GraphError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Scores the listed candidates of one user.
pub trait Scorer: Sync {
    fn scores(&self, set: &CandidateSet, items: &[u32]) -> Result<Vec<f64>>;
}

/// Read-only scoring view of a trained model with every item vector precomputed.
pub struct ModelScorer<'a, T> {
    model: &'a RecModel<T>,
    /// Row `i - 1` holds item `i`.
    items: Matrix<T>,
}

impl<'a, T: Scalar> ModelScorer<'a, T> {
    pub fn new(model: &'a RecModel<T>) -> std::result::Result<Self, crate::recommender::RecError> {
        let ids: Vec<u32> = (1..=model.n_items() as u32).collect();
        Ok(Self {
            model,
            items: model.item_vectors(&ids)?,
        })
    }
}

impl<T: Scalar> Scorer for ModelScorer<'_, T> {
    fn scores(&self, set: &CandidateSet, items: &[u32]) -> Result<Vec<f64>> {
        let u = self.model.user_encode(set.user, &set.history)?;
        items
            .iter()
            .map(|&i| {
                if i == 0 || i as usize > self.items.rows() {
                    return Err(EvalError::Input(format!("unknown item {i}")));
                }
                Ok(crate::numerics::dot(&u, self.items.row(i as usize - 1)).as_f64())
            })
            .collect()
    }
}

/// Aggregate metrics plus per-user detail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub k: usize,
    pub ndcg: f64,
    pub hr: f64,
    pub mrr: f64,
    pub gauc: f64,
    pub users: usize,
    /// Candidates sharing the target's score, summed over users.
    pub ties: usize,
    pub tie_policy: String,
    pub gauc_weighting: String,
    pub per_user: Vec<UserMetrics>,
}

/// The four headline metrics of a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub ndcg: f64,
    pub hr: f64,
    pub mrr: f64,
    pub gauc: f64,
}

impl MetricReport {
    /// User means for NDCG, HR and MRR; GAUC weighted by candidate count.
    pub fn from_users(k: usize, per_user: Vec<UserMetrics>) -> Result<Self> {
        if per_user.is_empty() {
            return Err(EvalError::Input("no users to evaluate".into()));
        }
        let n = per_user.len() as f64;
        let mean = |f: fn(&UserMetrics) -> f64| per_user.iter().map(f).sum::<f64>() / n;
        let (mut num, mut den) = (0.0, 0.0);
        for u in &per_user {
            if let Some(a) = u.auc {
                num += a * u.candidates as f64;
                den += u.candidates as f64;
            }
        }
        if den == 0.0 {
            return Err(EvalError::NoEvaluableUser);
        }
        Ok(Self {
            k,
            ndcg: mean(|u| u.ndcg),
            hr: mean(|u| u.hr),
            mrr: mean(|u| u.rr),
            gauc: num / den,
            users: per_user.len(),
            ties: per_user.iter().map(|u| u.ties).sum(),
            tie_policy: TIE_POLICY.into(),
            gauc_weighting: GAUC_WEIGHTING.into(),
            per_user,
        })
    }

    pub fn summary(&self) -> MetricSummary {
        MetricSummary {
            ndcg: self.ndcg,
            hr: self.hr,
            mrr: self.mrr,
            gauc: self.gauc,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned two-column text.
    pub fn to_text(&self) -> String {
        let rows = [
            (format!("NDCG@{}", self.k), format!("{:.6}", self.ndcg)),
            (format!("HR@{}", self.k), format!("{:.6}", self.hr)),
            ("MRR".to_string(), format!("{:.6}", self.mrr)),
            ("GAUC".to_string(), format!("{:.6}", self.gauc)),
            ("users".to_string(), self.users.to_string()),
            ("ties".to_string(), self.ties.to_string()),
        ];
        let mut out = format!("# ties: {}\n# gauc: {}\n", self.tie_policy, self.gauc_weighting);
        for (name, value) in rows {
            out.push_str(&format!("{name:<8} {value:>10}\n"));
        }
        out
    }
}

/// Scores every candidate set in parallel and aggregates in input order.
pub fn evaluate<S: Scorer>(scorer: &S, sets: &[CandidateSet], k: usize) -> Result<MetricReport> {
    if k == 0 {
        return Err(EvalError::Input("k must be positive".into()));
    }
    let per_user = sets
        .par_iter()
        .map(|set| {
            let items = set.items.to_vec();
            let hits: Vec<usize> = items.iter().enumerate().filter(|(_, &i)| i == set.target).map(|(j, _)| j).collect();
            let [target] = hits.as_slice() else {
                return Err(EvalError::Input(format!(
                    "user {}: target appears {} times among candidates",
                    set.user,
                    hits.len()
                )));
            };
            let scores = scorer.scores(set, &items)?;
            if scores.len() != items.len() || scores.iter().any(|s| !s.is_finite()) {
                return Err(EvalError::Model(format!("user {}: invalid scores", set.user)));
            }
            Ok(UserMetrics::from_scores(set.user, &scores, &items, *target, k))
        })
        .collect::<Result<Vec<_>>>()?;
    MetricReport::from_users(k, per_user)
}
