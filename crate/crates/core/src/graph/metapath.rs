use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::HeteroGraph;
use crate::numerics::Rng;

pub const DEFAULT_DEGREE_CAP: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetapathKind {
    /// Items aggregated into the users that interacted with them.
    ItemToUser,
    /// User → user factor → user.
    UserSemantic,
    /// Users aggregated into the items they interacted with.
    UserToItem,
    /// Item → item factor → item.
    ItemSemantic,
}

impl MetapathKind {
    pub const ALL: [MetapathKind; 4] = [
        MetapathKind::ItemToUser,
        MetapathKind::UserSemantic,
        MetapathKind::UserToItem,
        MetapathKind::ItemSemantic,
    ];

    pub fn is_semantic(self) -> bool {
        matches!(self, MetapathKind::UserSemantic | MetapathKind::ItemSemantic)
    }

    fn tag(self) -> u64 {
        match self {
            MetapathKind::ItemToUser => 1,
            MetapathKind::UserSemantic => 2,
            MetapathKind::UserToItem => 3,
            MetapathKind::ItemSemantic => 4,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            MetapathKind::ItemToUser => "i->u",
            MetapathKind::UserSemantic => "u->q->u",
            MetapathKind::UserToItem => "u->i",
            MetapathKind::ItemSemantic => "i->q->i",
        }
    }
}

/// Sampled neighborhoods for one metapath.
///
/// Whether a target attends to its own embedding besides its neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelfLoop {
    Never,
    Always,
    /// Only targets without neighbors, which then keep their own embedding.
    IfIsolated,
}

impl SelfLoop {
    pub fn includes(self, neighbors: usize) -> bool {
        match self {
            SelfLoop::Never => false,
            SelfLoop::Always => true,
            SelfLoop::IfIsolated => neighbors == 0,
        }
    }
}

/// Lists never contain the target itself; `self_loop` tells the propagation
/// when to add it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetapathSubgraph {
    pub kind: MetapathKind,
    pub degree_cap: usize,
    pub seed: u64,
    /// Applies to `neighbors`.
    pub self_loop: SelfLoop,
    /// Applies to `factor_members`.
    pub factor_self_loop: SelfLoop,
    /// Interaction paths: target entity → sampled source entities.
    /// Semantic paths: target entity → all of its factor nodes.
    pub neighbors: Vec<Vec<u32>>,
    /// Semantic paths only: factor node → sampled member entities.
    pub factor_members: Vec<Vec<u32>>,
}

impl MetapathSubgraph {
    /// Entities reachable from `target` in two semantic hops (itself included).
    pub fn two_hop(&self, target: u32) -> BTreeSet<u32> {
        self.neighbors[target as usize]
            .iter()
            .flat_map(|&f| self.factor_members[f as usize].iter().copied())
            .chain(std::iter::once(target))
            .collect()
    }
}

fn sample_capped(list: &[u32], cap: usize, rng: &mut Rng) -> Vec<u32> {
    if list.len() <= cap {
        return list.to_vec();
    }
    let mut picked: Vec<u32> = rng
        .sample_distinct(list.len(), cap)
        .into_iter()
        .map(|p| list[p])
        .collect();
    picked.sort_unstable();
    picked
}

fn sample_all(lists: &[Vec<u32>], cap: usize, seed: u64, kind: MetapathKind, hop: u64) -> Vec<Vec<u32>> {
    lists
        .iter()
        .enumerate()
        .map(|(t, l)| {
            let mut rng = Rng::derived(seed, &[kind.tag(), hop, t as u64]);
            sample_capped(l, cap, &mut rng)
        })
        .collect()
}

/// Degree-capped neighborhoods for `kind`; each target or factor samples from
/// its own stream derived from `(seed, kind, node)`.
pub fn extract_subgraph(g: &HeteroGraph, kind: MetapathKind, degree_cap: usize, seed: u64) -> MetapathSubgraph {
    let cap = degree_cap.max(1);
    let (neighbors, factor_members) = match kind {
        MetapathKind::ItemToUser => (sample_all(&g.user_items, cap, seed, kind, 0), Vec::new()),
        MetapathKind::UserToItem => (sample_all(&g.item_users, cap, seed, kind, 0), Vec::new()),
        MetapathKind::UserSemantic => (
            g.user_factors.entity_factors.clone(),
            sample_all(&g.user_factors.factor_entities, cap, seed, kind, 1),
        ),
        MetapathKind::ItemSemantic => (
            g.item_factors.entity_factors.clone(),
            sample_all(&g.item_factors.factor_entities, cap, seed, kind, 1),
        ),
    };
    MetapathSubgraph {
        kind,
        degree_cap: cap,
        seed,
        // Factors keep their own embedding next to their members; entities on a
        // semantic path are described by their factors alone.
        self_loop: if kind.is_semantic() { SelfLoop::IfIsolated } else { SelfLoop::Always },
        factor_self_loop: SelfLoop::Always,
        neighbors,
        factor_members,
    }
}

/// Metapaths left after removing `remove`; an empty result means the vanilla backbone.
pub fn ablate(remove: &BTreeSet<MetapathKind>) -> BTreeSet<MetapathKind> {
    MetapathKind::ALL
        .into_iter()
        .filter(|k| !remove.contains(k))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::super::tests::{levels, random_world};
    use super::super::{build_graph, FactorTable};
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn self_loop_policy_names_and_rule() {
        let all = [SelfLoop::Never, SelfLoop::Always, SelfLoop::IfIsolated];
        let names: Vec<String> = all.iter().map(|p| serde_json::to_string(p).unwrap()).collect();
        assert_eq!(names, ["\"never\"", "\"always\"", "\"if_isolated\""]);
        for (p, n) in all.iter().zip(&names) {
            assert_eq!(serde_json::from_str::<SelfLoop>(n).unwrap(), *p);
        }
        assert_eq!(all.map(|p| p.includes(0)), [false, true, true]);
        assert_eq!(all.map(|p| p.includes(2)), [false, true, false]);
    }

    fn star(n_users: usize) -> HeteroGraph {
        let inter: Vec<(u32, u32)> = (1..=n_users as u32).map(|u| (u, 1)).collect();
        let uq = FactorTable::from_rows(1, 2, &vec![vec![0]; n_users]);
        let iq = FactorTable::from_rows(1, 2, &[vec![0]]);
        HeteroGraph::from_interactions(n_users, 1, &inter, &uq, &iq, &levels(&[0]), true).unwrap()
    }

    #[test]
    fn under_cap_keeps_everything() {
        let g = star(3);
        let s = extract_subgraph(&g, MetapathKind::UserToItem, 18, 0);
        assert_eq!(s.neighbors[1], vec![1, 2, 3]);
    }

    #[test]
    fn over_cap_samples_exactly_cap_distinct() {
        let g = star(40);
        let s = extract_subgraph(&g, MetapathKind::UserToItem, 12, 5);
        let n = &s.neighbors[1];
        assert_eq!(n.len(), 12);
        assert_eq!(n.iter().collect::<BTreeSet<_>>().len(), 12);
        assert!(n.iter().all(|&u| (1..=40).contains(&u)));
        assert_eq!(s, extract_subgraph(&g, MetapathKind::UserToItem, 12, 5));
        assert_ne!(s.neighbors, extract_subgraph(&g, MetapathKind::UserToItem, 12, 6).neighbors);
    }

    #[test]
    fn users_sharing_a_factor_see_each_other() {
        let uq = FactorTable::from_rows(1, 4, &[vec![2], vec![2], vec![0]]);
        let iq = FactorTable::from_rows(1, 2, &[vec![0]]);
        let g = HeteroGraph::from_interactions(3, 1, &[(1, 1)], &uq, &iq, &levels(&[0]), true).unwrap();
        let s = extract_subgraph(&g, MetapathKind::UserSemantic, 15, 0);
        assert!(s.two_hop(1).contains(&2));
        assert!(s.two_hop(2).contains(&1));
        assert!(!s.two_hop(1).contains(&3));
    }

    #[test]
    fn ablation_sets() {
        let all: BTreeSet<_> = MetapathKind::ALL.into_iter().collect();
        assert_eq!(ablate(&BTreeSet::new()), all);
        assert!(ablate(&all).is_empty());
        let rest = ablate(&[MetapathKind::UserSemantic].into_iter().collect());
        let expected: BTreeSet<_> = [MetapathKind::ItemToUser, MetapathKind::UserToItem, MetapathKind::ItemSemantic]
            .into_iter()
            .collect();
        assert_eq!(rest, expected);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn caps_respected_and_neighbors_exist(seed in 0u64..1000, cap in 1usize..6) {
            let (ds, uq, iq) = random_world(40, 15, seed);
            let g = build_graph(&ds, &uq, &iq, &levels(&[0, 1]), true).unwrap();
            for kind in MetapathKind::ALL {
                let s = extract_subgraph(&g, kind, cap, seed);
                if kind.is_semantic() {
                    let adj = if kind == MetapathKind::UserSemantic { &g.user_factors } else { &g.item_factors };
                    prop_assert_eq!(&s.neighbors, &adj.entity_factors);
                    for (f, m) in s.factor_members.iter().enumerate() {
                        prop_assert!(m.len() <= cap);
                        prop_assert!(m.iter().all(|e| adj.factor_entities[f].contains(e)));
                    }
                } else {
                    let full = if kind == MetapathKind::ItemToUser { &g.user_items } else { &g.item_users };
                    for (t, n) in s.neighbors.iter().enumerate() {
                        prop_assert!(n.len() <= cap);
                        prop_assert_eq!(n.len(), full[t].len().min(cap));
                        prop_assert!(n.iter().all(|e| full[t].contains(e)));
                    }
                }
            }
        }
    }
}
