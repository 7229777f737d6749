use serde::{Deserialize, Serialize};

use super::{DataError, Result, SplitDataset, TrainExample, PAD};
use crate::numerics::Rng;

/// A padded mini-batch of next-item examples with sampled negatives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrainBatch {
    pub users: Vec<u32>,
    /// `len × width`, left-aligned, padded with [`PAD`].
    pub histories: Vec<u32>,
    pub lengths: Vec<usize>,
    pub width: usize,
    pub targets: Vec<u32>,
    /// `len × n_neg`
    pub negatives: Vec<u32>,
    pub n_neg: usize,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    pub fn history(&self, row: usize) -> &[u32] {
        &self.histories[row * self.width..row * self.width + self.lengths[row]]
    }

    pub fn negatives(&self, row: usize) -> &[u32] {
        &self.negatives[row * self.n_neg..(row + 1) * self.n_neg]
    }
}

/// `k` distinct items from `1..=n_items`, never equal to `exclude`.
fn negatives_excluding(n_items: usize, k: usize, exclude: u32, rng: &mut Rng) -> Vec<u32> {
    rng.sample_distinct(n_items - 1, k)
        .into_iter()
        .map(|j| {
            let item = j as u32 + 1;
            if item >= exclude {
                item + 1
            } else {
                item
            }
        })
        .collect()
}

fn check_vocab(ds: &SplitDataset, n_neg: usize) -> Result<()> {
    if ds.n_items() < n_neg + 1 {
        return Err(DataError::Argument(format!(
            "{n_neg} negatives need at least {} items, vocabulary has {}",
            n_neg + 1,
            ds.n_items()
        )));
    }
    Ok(())
}

fn assemble(ds: &SplitDataset, rows: &[TrainExample], n_neg: usize, rng: &mut Rng) -> TrainBatch {
    let width = ds.config.max_len;
    let mut batch = TrainBatch {
        users: Vec::with_capacity(rows.len()),
        histories: vec![PAD; rows.len() * width],
        lengths: Vec::with_capacity(rows.len()),
        width,
        targets: Vec::with_capacity(rows.len()),
        negatives: Vec::with_capacity(rows.len() * n_neg),
        n_neg,
    };
    for (r, ex) in rows.iter().enumerate() {
        let hist = ds.example_history(ex);
        let target = ds.example_target(ex);
        batch.users.push(ex.user);
        batch.histories[r * width..r * width + hist.len()].copy_from_slice(hist);
        batch.lengths.push(hist.len());
        batch.targets.push(target);
        batch
            .negatives
            .extend(negatives_excluding(ds.n_items(), n_neg, target, rng));
    }
    batch
}

/// `batch_size` training examples drawn uniformly with replacement.
///
/// Only the target is excluded from negatives; other items from the user's
/// history may appear.
pub fn sample_batch(
    ds: &SplitDataset,
    batch_size: usize,
    n_neg: usize,
    rng: &mut Rng,
) -> Result<TrainBatch> {
    check_vocab(ds, n_neg)?;
    let examples = ds.train_examples();
    if examples.is_empty() {
        return Err(DataError::Empty("training split has no examples".into()));
    }
    let rows: Vec<_> = (0..batch_size)
        .map(|_| examples[rng.below(examples.len())])
        .collect();
    Ok(assemble(ds, &rows, n_neg, rng))
}

/// One shuffled pass over every training example.
pub fn epoch_batches(
    ds: &SplitDataset,
    batch_size: usize,
    n_neg: usize,
    rng: &mut Rng,
) -> Result<Vec<TrainBatch>> {
    batches_from(ds, ds.train_examples(), batch_size, n_neg, rng)
}

/// One shuffled pass over `examples`.
pub fn batches_from(
    ds: &SplitDataset,
    mut examples: Vec<TrainExample>,
    batch_size: usize,
    n_neg: usize,
    rng: &mut Rng,
) -> Result<Vec<TrainBatch>> {
    check_vocab(ds, n_neg)?;
    if batch_size == 0 {
        return Err(DataError::Argument("batch size must be positive".into()));
    }
    if examples.is_empty() {
        return Err(DataError::Empty("no training examples to batch".into()));
    }
    rng.shuffle(&mut examples);
    Ok(examples
        .chunks(batch_size)
        .map(|rows| assemble(ds, rows, n_neg, rng))
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "negatives")]
pub enum CandidateMode {
    /// Rank against the whole catalog.
    Full,
    /// Ground truth plus `n` uniformly sampled distinct negatives.
    Sampled(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Valid,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CandidateItems {
    /// Every item id in `1..=n`.
    All(u32),
    Listed(Vec<u32>),
}

impl CandidateItems {
    pub fn len(&self) -> usize {
        match self {
            CandidateItems::All(n) => *n as usize,
            CandidateItems::Listed(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vec(&self) -> Vec<u32> {
        match self {
            CandidateItems::All(n) => (1..=*n).collect(),
            CandidateItems::Listed(v) => v.clone(),
        }
    }
}

/// Candidates for ranking one user's held-out item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub user: u32,
    pub history: Vec<u32>,
    pub target: u32,
    pub items: CandidateItems,
}

/// Candidate sets for every user on the chosen split.
///
/// Sampled negatives come from a per-user stream derived from `rng`'s seed,
/// so a user's candidates do not depend on how many users precede it.
pub fn build_candidates(
    ds: &SplitDataset,
    split: EvalSplit,
    mode: CandidateMode,
    rng: &Rng,
) -> Result<Vec<CandidateSet>> {
    if let CandidateMode::Sampled(n) = mode {
        if n + 1 > ds.n_items() {
            return Err(DataError::Argument(format!(
                "{n} sampled negatives exceed the {} other items",
                ds.n_items().saturating_sub(1)
            )));
        }
    }
    let split_tag = match split {
        EvalSplit::Valid => 1,
        EvalSplit::Test => 2,
    };
    Ok(ds
        .user_ids()
        .map(|user| {
            let (history, target) = match split {
                EvalSplit::Valid => (ds.valid_history(user), ds.valid_target(user)),
                EvalSplit::Test => (ds.test_history(user), ds.test_target(user)),
            };
            let items = match mode {
                CandidateMode::Full => CandidateItems::All(ds.n_items() as u32),
                CandidateMode::Sampled(n) => {
                    let mut r = Rng::derived(rng.seed(), &[split_tag, user as u64]);
                    let mut v = Vec::with_capacity(n + 1);
                    v.push(target);
                    v.extend(negatives_excluding(ds.n_items(), n, target, &mut r));
                    CandidateItems::Listed(v)
                }
            };
            CandidateSet {
                user,
                history: history.to_vec(),
                target,
                items,
            }
        })
        .collect())
}
