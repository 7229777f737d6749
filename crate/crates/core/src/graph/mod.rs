//! Heterogeneous user/item/factor graph and metapath neighbor sampling.
//!
//! Entity nodes use the dense dataset ids (`1..=n`, row 0 is padding).
//! Factor node `(t, k)` of a side has index `t * K + k`.

mod io;
mod metapath;

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataio::SplitDataset;
use crate::quantizer::FactorAssignment;

pub use io::{export_edges, import_edges, write_edges, read_edges, EDGE_MAGIC};
pub use metapath::{ablate, extract_subgraph, MetapathKind, MetapathSubgraph, SelfLoop, DEFAULT_DEGREE_CAP};

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("no factor assignment for {side} {entity}")]
    MissingAssignment { side: &'static str, entity: u64 },
    #[error("{side} {entity}: {detail}")]
    BadAssignment {
        side: &'static str,
        entity: u64,
        detail: String,
    },
    #[error("level {level} not available, quantizer has {levels} levels")]
    Level { level: usize, levels: usize },
    #[error("edge ({user}, {item}) references an entity outside the vocabulary")]
    Entity { user: u32, item: u32 },
    #[error("malformed edge file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GraphError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NodeKind {
    User,
    Item,
    UserFactor,
    ItemFactor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeRef {
    User(u32),
    Item(u32),
    UserFactor { level: usize, index: u32 },
    ItemFactor { level: usize, index: u32 },
}

impl NodeRef {
    pub fn kind(&self) -> NodeKind {
        match self {
            NodeRef::User(_) => NodeKind::User,
            NodeRef::Item(_) => NodeKind::Item,
            NodeRef::UserFactor { .. } => NodeKind::UserFactor,
            NodeRef::ItemFactor { .. } => NodeKind::ItemFactor,
        }
    }
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeRef::User(id) => write!(f, "u:{id}"),
            NodeRef::Item(id) => write!(f, "i:{id}"),
            NodeRef::UserFactor { level, index } => write!(f, "qu:{level}:{index}"),
            NodeRef::ItemFactor { level, index } => write!(f, "qi:{level}:{index}"),
        }
    }
}

impl std::str::FromStr for NodeRef {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || GraphError::Format(format!("bad node reference `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        let num = |p: &str| p.parse::<u32>().map_err(|_| bad());
        match parts.as_slice() {
            ["u", id] => Ok(NodeRef::User(num(id)?)),
            ["i", id] => Ok(NodeRef::Item(num(id)?)),
            ["qu", t, k] => Ok(NodeRef::UserFactor {
                level: num(t)? as usize,
                index: num(k)?,
            }),
            ["qi", t, k] => Ok(NodeRef::ItemFactor {
                level: num(t)? as usize,
                index: num(k)?,
            }),
            _ => Err(bad()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EdgeKind {
    UserItem,
    UserFactor,
    ItemFactor,
}

impl EdgeKind {
    pub fn tag(self) -> &'static str {
        match self {
            EdgeKind::UserItem => "ui",
            EdgeKind::UserFactor => "uq",
            EdgeKind::ItemFactor => "iq",
        }
    }
}

/// Factor indices of one side, with the quantizer shape they came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FactorTable {
    pub levels: usize,
    pub codebook_size: usize,
    pub assignments: Vec<FactorAssignment>,
}

impl FactorTable {
    /// Table from row-aligned indices where row `r` belongs to entity `r + 1`.
    pub fn from_rows(levels: usize, codebook_size: usize, rows: &[Vec<u32>]) -> Self {
        Self {
            levels,
            codebook_size,
            assignments: rows
                .iter()
                .enumerate()
                .map(|(r, idx)| FactorAssignment {
                    entity: r as u64 + 1,
                    indices: idx.clone(),
                })
                .collect(),
        }
    }

    fn lookup(&self, side: &'static str, n: usize) -> Result<Vec<Vec<u32>>> {
        let mut rows: Vec<Option<Vec<u32>>> = vec![None; n + 1];
        for a in &self.assignments {
            let e = a.entity as usize;
            if e == 0 || e > n {
                continue;
            }
            if a.indices.len() != self.levels {
                return Err(GraphError::BadAssignment {
                    side,
                    entity: a.entity,
                    detail: format!("{} levels, expected {}", a.indices.len(), self.levels),
                });
            }
            if let Some(&m) = a.indices.iter().find(|&&m| m as usize >= self.codebook_size) {
                return Err(GraphError::BadAssignment {
                    side,
                    entity: a.entity,
                    detail: format!("index {m} outside codebook of size {}", self.codebook_size),
                });
            }
            rows[e] = Some(a.indices.clone());
        }
        let mut out = vec![Vec::new()];
        for (e, row) in rows.into_iter().enumerate().skip(1) {
            out.push(row.ok_or(GraphError::MissingAssignment {
                side,
                entity: e as u64,
            })?);
        }
        Ok(out)
    }
}

/// Adjacency of one entity side towards its factor nodes and back.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct FactorAdjacency {
    pub levels: usize,
    pub codebook_size: usize,
    /// Entity id → factor node indices (one per used level, ascending).
    pub entity_factors: Vec<Vec<u32>>,
    /// Factor node → member entity ids (ascending).
    pub factor_entities: Vec<Vec<u32>>,
}

impl FactorAdjacency {
    fn build(rows: &[Vec<u32>], levels: usize, k: usize, used: &BTreeSet<usize>) -> Self {
        let mut entity_factors = vec![Vec::new(); rows.len()];
        let mut factor_entities = vec![Vec::new(); levels * k];
        for (e, idx) in rows.iter().enumerate().skip(1) {
            for &t in used {
                let node = (t * k) as u32 + idx[t];
                entity_factors[e].push(node);
                factor_entities[node as usize].push(e as u32);
            }
        }
        Self {
            levels,
            codebook_size: k,
            entity_factors,
            factor_entities,
        }
    }

    pub fn node_count(&self) -> usize {
        self.factor_entities.len()
    }

    /// `(level, index)` of a factor node.
    pub fn split(&self, node: u32) -> (usize, u32) {
        let k = self.codebook_size as u32;
        ((node / k) as usize, node % k)
    }

    pub fn edge_count(&self) -> usize {
        self.entity_factors.iter().map(Vec::len).sum()
    }
}

/// Undirected typed graph stored as adjacency lists on both endpoints.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HeteroGraph {
    pub n_users: usize,
    pub n_items: usize,
    pub levels_used: BTreeSet<usize>,
    /// User id → interacted item ids (ascending; repeated when not deduplicated).
    pub user_items: Vec<Vec<u32>>,
    pub item_users: Vec<Vec<u32>>,
    pub user_factors: FactorAdjacency,
    pub item_factors: FactorAdjacency,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub users: usize,
    pub items: usize,
    /// Factor nodes with at least one edge.
    pub user_factors: usize,
    pub item_factors: usize,
    pub edges_ui: usize,
    pub edges_uq: usize,
    pub edges_iq: usize,
    pub levels_used: Vec<usize>,
}

impl HeteroGraph {
    /// Graph over explicit `(user, item)` interactions.
    pub fn from_interactions(
        n_users: usize,
        n_items: usize,
        interactions: &[(u32, u32)],
        user_q: &FactorTable,
        item_q: &FactorTable,
        levels_used: &BTreeSet<usize>,
        dedupe: bool,
    ) -> Result<Self> {
        for q in [user_q, item_q] {
            if let Some(&level) = levels_used.iter().find(|&&t| t >= q.levels) {
                return Err(GraphError::Level {
                    level,
                    levels: q.levels,
                });
            }
        }
        let mut user_items = vec![Vec::new(); n_users + 1];
        let mut item_users = vec![Vec::new(); n_items + 1];
        for &(u, i) in interactions {
            if u == 0 || i == 0 || u as usize > n_users || i as usize > n_items {
                return Err(GraphError::Entity { user: u, item: i });
            }
            user_items[u as usize].push(i);
            item_users[i as usize].push(u);
        }
        for list in user_items.iter_mut().chain(item_users.iter_mut()) {
            list.sort_unstable();
            if dedupe {
                list.dedup();
            }
        }
        let urows = user_q.lookup("user", n_users)?;
        let irows = item_q.lookup("item", n_items)?;
        Ok(Self {
            n_users,
            n_items,
            levels_used: levels_used.clone(),
            user_items,
            item_users,
            user_factors: FactorAdjacency::build(&urows, user_q.levels, user_q.codebook_size, levels_used),
            item_factors: FactorAdjacency::build(&irows, item_q.levels, item_q.codebook_size, levels_used),
        })
    }

    pub fn n_user_factors(&self) -> usize {
        self.user_factors.node_count()
    }

    pub fn n_item_factors(&self) -> usize {
        self.item_factors.node_count()
    }

    pub fn edge_count(&self, kind: EdgeKind) -> usize {
        match kind {
            EdgeKind::UserItem => self.user_items.iter().map(Vec::len).sum(),
            EdgeKind::UserFactor => self.user_factors.edge_count(),
            EdgeKind::ItemFactor => self.item_factors.edge_count(),
        }
    }

    /// All edges in canonical order: by kind, then source, then destination.
    pub fn edges(&self) -> Vec<(EdgeKind, NodeRef, NodeRef)> {
        let mut out = Vec::new();
        for (u, items) in self.user_items.iter().enumerate() {
            for &i in items {
                out.push((EdgeKind::UserItem, NodeRef::User(u as u32), NodeRef::Item(i)));
            }
        }
        for (u, fs) in self.user_factors.entity_factors.iter().enumerate() {
            for &f in fs {
                let (level, index) = self.user_factors.split(f);
                out.push((EdgeKind::UserFactor, NodeRef::User(u as u32), NodeRef::UserFactor { level, index }));
            }
        }
        for (i, fs) in self.item_factors.entity_factors.iter().enumerate() {
            for &f in fs {
                let (level, index) = self.item_factors.split(f);
                out.push((EdgeKind::ItemFactor, NodeRef::Item(i as u32), NodeRef::ItemFactor { level, index }));
            }
        }
        out
    }

    pub fn summary(&self) -> GraphSummary {
        let active = |a: &FactorAdjacency| a.factor_entities.iter().filter(|m| !m.is_empty()).count();
        GraphSummary {
            users: self.n_users,
            items: self.n_items,
            user_factors: active(&self.user_factors),
            item_factors: active(&self.item_factors),
            edges_ui: self.edge_count(EdgeKind::UserItem),
            edges_uq: self.edge_count(EdgeKind::UserFactor),
            edges_iq: self.edge_count(EdgeKind::ItemFactor),
            levels_used: self.levels_used.iter().copied().collect(),
        }
    }
}

/// Graph whose interaction edges come from the training portion of every user only.
pub fn build_graph(
    ds: &SplitDataset,
    user_q: &FactorTable,
    item_q: &FactorTable,
    levels_used: &BTreeSet<usize>,
    dedupe: bool,
) -> Result<HeteroGraph> {
    let interactions: Vec<(u32, u32)> = ds
        .user_ids()
        .flat_map(|u| ds.train_items(u).iter().map(move |&i| (u, i)))
        .collect();
    HeteroGraph::from_interactions(ds.n_users(), ds.n_items(), &interactions, user_q, item_q, levels_used, dedupe)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataio::{PreprocessConfig, Vocab};
    use crate::numerics::Rng;
    use std::collections::HashSet;

    pub(crate) fn levels(v: &[usize]) -> BTreeSet<usize> {
        v.iter().copied().collect()
    }

    pub(crate) fn random_world(n_users: usize, n_items: usize, seed: u64) -> (SplitDataset, FactorTable, FactorTable) {
        let mut rng = Rng::new(seed);
        let seqs: Vec<Vec<u32>> = (0..n_users)
            .map(|_| {
                let len = 3 + rng.below(8);
                (0..len).map(|_| 1 + rng.below(n_items) as u32).collect()
            })
            .collect();
        let users = Vocab::from_raw((1..=n_users).map(|u| format!("u{u}")).collect());
        let items = Vocab::from_raw((1..=n_items).map(|i| format!("i{i}")).collect());
        let ds = SplitDataset::from_sequences(PreprocessConfig::default(), users, items, seqs).unwrap();
        let mut table = |n: usize, k: usize| {
            let rows: Vec<Vec<u32>> = (0..n).map(|_| (0..3).map(|_| rng.below(k) as u32).collect()).collect();
            FactorTable::from_rows(3, k, &rows)
        };
        let uq = table(n_users, 6);
        let iq = table(n_items, 5);
        (ds, uq, iq)
    }

    #[test]
    fn single_interaction_graph() {
        let uq = FactorTable::from_rows(1, 2, &[vec![1]]);
        let iq = FactorTable::from_rows(1, 2, &[vec![0]]);
        let g = HeteroGraph::from_interactions(1, 1, &[(1, 1)], &uq, &iq, &levels(&[0]), true).unwrap();
        let s = g.summary();
        assert_eq!((s.edges_ui, s.edges_uq, s.edges_iq), (1, 1, 1));
        assert_eq!(s.users + s.items + s.user_factors + s.item_factors, 4);
    }

    #[test]
    fn entities_get_one_factor_edge_per_used_level() {
        let (ds, uq, iq) = random_world(30, 20, 1);
        let g = build_graph(&ds, &uq, &iq, &levels(&[0, 1]), true).unwrap();
        assert!(g.user_factors.entity_factors.iter().skip(1).all(|f| f.len() == 2));
        assert!(g.item_factors.entity_factors.iter().skip(1).all(|f| f.len() == 2));
        let g = build_graph(&ds, &uq, &iq, &levels(&[]), true).unwrap();
        assert_eq!(g.edge_count(EdgeKind::UserFactor), 0);
    }

    #[test]
    fn edge_counts_match_reference_builder() {
        let (ds, uq, iq) = random_world(100, 40, 2);
        let used = levels(&[0, 2]);
        let g = build_graph(&ds, &uq, &iq, &used, true).unwrap();
        let mut ui = HashSet::new();
        for u in ds.user_ids() {
            for &i in ds.train_items(u) {
                ui.insert((u, i));
            }
        }
        let mut uqe = HashSet::new();
        for a in &uq.assignments {
            for &t in &used {
                uqe.insert((a.entity, t, a.indices[t]));
            }
        }
        let mut iqe = HashSet::new();
        for a in &iq.assignments {
            for &t in &used {
                iqe.insert((a.entity, t, a.indices[t]));
            }
        }
        assert_eq!(g.edge_count(EdgeKind::UserItem), ui.len());
        assert_eq!(g.edge_count(EdgeKind::UserFactor), uqe.len());
        assert_eq!(g.edge_count(EdgeKind::ItemFactor), iqe.len());
    }

    #[test]
    fn held_out_interactions_never_become_edges() {
        let (ds, uq, iq) = random_world(60, 30, 3);
        let g = build_graph(&ds, &uq, &iq, &levels(&[0]), true).unwrap();
        for u in ds.user_ids() {
            let train: HashSet<u32> = ds.train_items(u).iter().copied().collect();
            for &i in &g.user_items[u as usize] {
                assert!(train.contains(&i));
            }
        }
    }

    #[test]
    fn missing_assignment_names_entity() {
        let uq = FactorTable::from_rows(1, 2, &[vec![0]]);
        let iq = FactorTable::from_rows(1, 2, &[vec![0]]);
        let err = HeteroGraph::from_interactions(2, 1, &[(1, 1)], &uq, &iq, &levels(&[0]), true).unwrap_err();
        assert!(matches!(err, GraphError::MissingAssignment { side: "user", entity: 2 }));
        let err = HeteroGraph::from_interactions(1, 1, &[(1, 1)], &uq, &iq, &levels(&[1]), true).unwrap_err();
        assert!(matches!(err, GraphError::Level { level: 1, .. }));
    }

    #[test]
    fn dedupe_collapses_repeated_interactions() {
        let uq = FactorTable::from_rows(1, 2, &[vec![0]]);
        let iq = FactorTable::from_rows(1, 2, &[vec![0]]);
        let e = [(1, 1), (1, 1)];
        let g = HeteroGraph::from_interactions(1, 1, &e, &uq, &iq, &levels(&[0]), true).unwrap();
        assert_eq!(g.edge_count(EdgeKind::UserItem), 1);
        let g = HeteroGraph::from_interactions(1, 1, &e, &uq, &iq, &levels(&[0]), false).unwrap();
        assert_eq!(g.edge_count(EdgeKind::UserItem), 2);
    }

    #[test]
    fn node_refs_round_trip() {
        for n in [
            NodeRef::User(3),
            NodeRef::Item(9),
            NodeRef::UserFactor { level: 1, index: 7 },
            NodeRef::ItemFactor { level: 0, index: 0 },
        ] {
            assert_eq!(n.to_string().parse::<NodeRef>().unwrap(), n);
        }
        assert!("x:1".parse::<NodeRef>().is_err());
    }
}
