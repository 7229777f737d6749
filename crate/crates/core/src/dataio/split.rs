use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataError, InteractionLog, Result, Vocab};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    /// Interactions with `rating > positive_threshold` are positives.
    pub positive_threshold: i64,
    pub min_history: usize,
    /// Model inputs keep only the most recent `max_len` items.
    pub max_len: usize,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            positive_threshold: 3,
            min_history: 5,
            max_len: 30,
        }
    }
}

/// Leave-one-out split over chronological positive sequences.
///
/// Per user the last positive is the test target, the second-to-last the
/// validation target and everything before it is training data. Full
/// training sequences are kept (graph edges use them); only model inputs
/// are truncated to `max_len`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub config: PreprocessConfig,
    pub users: Vocab,
    pub items: Vocab,
    /// Indexed by dense user id; entry 0 is the padding user.
    sequences: Vec<Vec<u32>>,
}

/// A next-item training example: `positives[user][start..end]` predicts `positives[user][end]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainExample {
    pub user: u32,
    pub start: usize,
    pub end: usize,
}

pub fn preprocess(log: &InteractionLog, config: PreprocessConfig) -> Result<SplitDataset> {
    if config.min_history < 3 {
        return Err(DataError::Argument(format!(
            "min_history must be at least 3 for a leave-one-out split, got {}",
            config.min_history
        )));
    }
    if config.max_len == 0 {
        return Err(DataError::Argument("max_len must be positive".into()));
    }
    if log.records.is_empty() {
        return Err(DataError::Empty("interaction log has no records".into()));
    }
    let threshold = config.positive_threshold as f64;
    let mut positives: Vec<_> = log
        .records
        .iter()
        .filter(|r| r.rating > threshold)
        .copied()
        .collect();
    // stable: equal timestamps keep file order
    positives.sort_by_key(|r| (r.user, r.timestamp));

    let mut users = Vocab::new();
    let mut items = Vocab::new();
    let mut sequences = vec![Vec::new()];
    for group in positives.chunk_by(|a, b| a.user == b.user) {
        if group.len() < config.min_history {
            continue;
        }
        let raw_user = log.users.raw(group[0].user).unwrap_or_default();
        users.intern(raw_user);
        let seq = group
            .iter()
            .map(|r| items.intern(log.items.raw(r.item).unwrap_or_default()))
            .collect();
        sequences.push(seq);
    }
    if users.is_empty() {
        return Err(DataError::Empty(format!(
            "no user has at least {} interactions rated above {}",
            config.min_history, config.positive_threshold
        )));
    }
    Ok(SplitDataset {
        config,
        users,
        items,
        sequences,
    })
}

impl SplitDataset {
    /// Builds a split directly from per-user chronological positives (dense ids).
    pub fn from_sequences(
        config: PreprocessConfig,
        users: Vocab,
        items: Vocab,
        per_user: Vec<Vec<u32>>,
    ) -> Result<Self> {
        if per_user.len() != users.len() {
            return Err(DataError::Argument(format!(
                "{} sequences for {} users",
                per_user.len(),
                users.len()
            )));
        }
        for (u, s) in per_user.iter().enumerate() {
            if s.len() < 3 || s.iter().any(|&i| i == 0 || i as usize > items.len()) {
                return Err(DataError::Argument(format!(
                    "sequence of user {} is too short or has out-of-range items",
                    u + 1
                )));
            }
        }
        let mut sequences = vec![Vec::new()];
        sequences.extend(per_user);
        Ok(Self {
            config,
            users,
            items,
            sequences,
        })
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn user_ids(&self) -> impl Iterator<Item = u32> {
        1..=self.n_users() as u32
    }

    /// All retained positives of `user` in chronological order.
    pub fn positives(&self, user: u32) -> &[u32] {
        &self.sequences[user as usize]
    }

    /// Full training portion (everything except the last two positives).
    pub fn train_items(&self, user: u32) -> &[u32] {
        let s = self.positives(user);
        &s[..s.len() - 2]
    }

    pub fn valid_target(&self, user: u32) -> u32 {
        let s = self.positives(user);
        s[s.len() - 2]
    }

    pub fn test_target(&self, user: u32) -> u32 {
        *self.positives(user).last().expect("retained users are non-empty")
    }

    fn recent(&self, s: &[u32]) -> usize {
        s.len().saturating_sub(self.config.max_len)
    }

    /// Model input when predicting the validation target.
    pub fn valid_history(&self, user: u32) -> &[u32] {
        let s = self.train_items(user);
        &s[self.recent(s)..]
    }

    /// Model input when predicting the test target.
    pub fn test_history(&self, user: u32) -> &[u32] {
        let s = self.positives(user);
        let s = &s[..s.len() - 1];
        &s[self.recent(s)..]
    }

    /// Every next-item example inside the training portion, user-major.
    pub fn train_examples(&self) -> Vec<TrainExample> {
        let mut out = Vec::new();
        for user in self.user_ids() {
            let n = self.train_items(user).len();
            for end in 1..n {
                out.push(TrainExample {
                    user,
                    start: end.saturating_sub(self.config.max_len),
                    end,
                });
            }
        }
        out
    }

    pub fn example_history(&self, ex: &TrainExample) -> &[u32] {
        &self.positives(ex.user)[ex.start..ex.end]
    }

    pub fn example_target(&self, ex: &TrainExample) -> u32 {
        self.positives(ex.user)[ex.end]
    }

    /// 64-bit digest of the configuration, vocabularies and every split.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(self.config.positive_threshold.to_le_bytes());
        h.update((self.config.min_history as u64).to_le_bytes());
        h.update((self.config.max_len as u64).to_le_bytes());
        for raw in self.items.raw_ids() {
            h.update((raw.len() as u64).to_le_bytes());
            h.update(raw.as_bytes());
        }
        for user in self.user_ids() {
            let raw = self.users.raw(user).unwrap_or_default();
            h.update((raw.len() as u64).to_le_bytes());
            h.update(raw.as_bytes());
            let s = self.positives(user);
            h.update((s.len() as u64).to_le_bytes());
            for &i in s {
                h.update(i.to_le_bytes());
            }
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().expect("sha256 has 32 bytes"))
    }

    /// Restores lookup tables after deserialization.
    pub fn reindex(&mut self) {
        self.users.rebuild_lookup();
        self.items.rebuild_lookup();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{parse_interactions, Delimiter, Interaction, Schema};
    use crate::numerics::Rng;
    use std::collections::BTreeMap;

    fn log_from(rows: &[(&str, &str, f64, i64)]) -> InteractionLog {
        let mut log = InteractionLog::default();
        for &(u, i, r, t) in rows {
            let user = log.users.intern(u);
            let item = log.items.intern(i);
            log.records.push(Interaction {
                user,
                item,
                rating: r,
                timestamp: t,
            });
        }
        log
    }

    #[test]
    fn five_positives_leave_one_out() {
        let log = log_from(&[
            ("u", "e", 5.0, 5),
            ("u", "a", 5.0, 1),
            ("u", "c", 4.0, 3),
            ("u", "b", 4.0, 2),
            ("u", "d", 5.0, 4),
        ]);
        let ds = preprocess(&log, PreprocessConfig::default()).unwrap();
        let name = |i: u32| ds.items.raw(i).unwrap().to_owned();
        let u = 1;
        let train: Vec<_> = ds.train_items(u).iter().map(|&i| name(i)).collect();
        assert_eq!(train, ["a", "b", "c"]);
        assert_eq!(name(ds.valid_target(u)), "d");
        assert_eq!(ds.valid_history(u).iter().map(|&i| name(i)).collect::<Vec<_>>(), ["a", "b", "c"]);
        assert_eq!(name(ds.test_target(u)), "e");
        assert_eq!(
            ds.test_history(u).iter().map(|&i| name(i)).collect::<Vec<_>>(),
            ["a", "b", "c", "d"]
        );
    }

    #[test]
    fn four_positives_dropped() {
        let log = log_from(&[
            ("u", "a", 5.0, 1),
            ("u", "b", 5.0, 2),
            ("u", "c", 5.0, 3),
            ("u", "d", 5.0, 4),
            ("u", "x", 2.0, 5),
            ("v", "a", 5.0, 1),
            ("v", "b", 5.0, 2),
            ("v", "c", 5.0, 3),
            ("v", "d", 5.0, 4),
            ("v", "e", 4.0, 5),
        ]);
        let ds = preprocess(&log, PreprocessConfig::default()).unwrap();
        assert_eq!(ds.n_users(), 1);
        assert_eq!(ds.users.raw(1), Some("v"));
    }

    #[test]
    fn empty_after_filtering() {
        let log = log_from(&[("u", "a", 1.0, 1)]);
        assert!(matches!(
            preprocess(&log, PreprocessConfig::default()),
            Err(DataError::Empty(_))
        ));
    }

    #[test]
    fn ties_keep_file_order_and_truncation_applies() {
        let rows: Vec<(String, String, f64, i64)> = (0..40)
            .map(|k| ("u".to_string(), format!("i{k}"), 5.0, (k / 2) as i64))
            .collect();
        let borrowed: Vec<_> = rows.iter().map(|(u, i, r, t)| (u.as_str(), i.as_str(), *r, *t)).collect();
        let ds = preprocess(&log_from(&borrowed), PreprocessConfig::default()).unwrap();
        let order: Vec<_> = ds.positives(1).iter().map(|&i| ds.items.raw(i).unwrap().to_owned()).collect();
        let want: Vec<_> = (0..40).map(|k| format!("i{k}")).collect();
        assert_eq!(order, want);
        assert_eq!(ds.train_items(1).len(), 38);
        assert_eq!(ds.valid_history(1).len(), 30);
        assert_eq!(ds.test_history(1).len(), 30);
        assert_eq!(*ds.test_history(1).last().unwrap(), ds.valid_target(1));
        for ex in ds.train_examples() {
            assert!(ds.example_history(&ex).len() <= 30);
        }
    }

    /// Straightforward reference splitter working on raw strings.
    fn reference_split(
        rows: &[(String, String, f64, i64)],
        threshold: f64,
    ) -> BTreeMap<String, (Vec<String>, String, String)> {
        let mut per: BTreeMap<String, Vec<(i64, usize, String)>> = BTreeMap::new();
        for (pos, (u, i, r, t)) in rows.iter().enumerate() {
            if *r > threshold {
                per.entry(u.clone()).or_default().push((*t, pos, i.clone()));
            }
        }
        let mut out = BTreeMap::new();
        for (u, mut v) in per {
            if v.len() < 5 {
                continue;
            }
            v.sort();
            let items: Vec<String> = v.into_iter().map(|x| x.2).collect();
            let n = items.len();
            out.insert(
                u,
                (items[..n - 2].to_vec(), items[n - 2].clone(), items[n - 1].clone()),
            );
        }
        out
    }

    #[test]
    fn synthetic_log_matches_reference_splitter() {
        let mut rng = Rng::new(8);
        let mut rows = Vec::new();
        for u in 0..100 {
            let n = rng.below(15);
            for _ in 0..n {
                rows.push((
                    format!("u{u}"),
                    format!("i{}", rng.below(60)),
                    (rng.below(5) + 1) as f64,
                    rng.below(30) as i64,
                ));
            }
        }
        rng.shuffle(&mut rows);
        let mut text = String::from("user\titem\trating\ttimestamp\n");
        for (u, i, r, t) in &rows {
            text.push_str(&format!("{u}\t{i}\t{r}\t{t}\n"));
        }
        let log = parse_interactions(text.as_bytes(), &Schema::named(Delimiter::Tsv)).unwrap();
        let ds = preprocess(&log, PreprocessConfig::default()).unwrap();
        let want = reference_split(&rows, 3.0);
        assert_eq!(ds.n_users(), want.len());
        let name = |i: u32| ds.items.raw(i).unwrap().to_owned();
        for user in ds.user_ids() {
            let (train, valid, test) = &want[ds.users.raw(user).unwrap()];
            let got: Vec<_> = ds.train_items(user).iter().map(|&i| name(i)).collect();
            assert_eq!(&got, train);
            assert_eq!(&name(ds.valid_target(user)), valid);
            assert_eq!(&name(ds.test_target(user)), test);
            assert_eq!(ds.train_items(user).len() + 2, ds.positives(user).len());
        }
    }

    #[test]
    fn fingerprint_is_stable_and_sensitive() {
        let rows = [
            ("u", "a", 5.0, 1),
            ("u", "b", 5.0, 2),
            ("u", "c", 5.0, 3),
            ("u", "d", 5.0, 4),
            ("u", "e", 5.0, 5),
        ];
        let a = preprocess(&log_from(&rows), PreprocessConfig::default()).unwrap();
        let b = preprocess(&log_from(&rows), PreprocessConfig::default()).unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        let mut changed = rows;
        changed[4].1 = "z";
        let c = preprocess(&log_from(&changed), PreprocessConfig::default()).unwrap();
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}
