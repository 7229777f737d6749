//! Graph attention over metapath subgraphs.
//!
//! Stage one refines user and item embeddings through their semantic factor
//! paths (entity → factor, then factor → entity). Stage two aggregates the
//! refined embeddings of interacted entities across the bipartite paths.

mod gat;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use gat::{GatCache, GatLayer};

use crate::graph::{HeteroGraph, MetapathKind, MetapathSubgraph, DEFAULT_DEGREE_CAP};
use crate::numerics::{HasParameters, Matrix, NumericsError, Parameter, Rng, Scalar};

#[derive(Debug, thiserror::Error)]
pub enum GnnError {
    #[error("invalid gnn config: {0}")]
    Config(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("target {0} has no neighbors")]
    EmptyNeighborhood(usize),
    #[error("metapath {0} is active but no subgraph was extracted for it")]
    MissingSubgraph(&'static str),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

pub type Result<T> = std::result::Result<T, GnnError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GnnConfig {
    /// Node embedding and hidden width (`D_e = D_h`).
    pub dim: usize,
    pub heads: usize,
    pub leaky_slope: f64,
    pub degree_cap: usize,
    /// Per-metapath cap overrides.
    pub degree_caps: BTreeMap<MetapathKind, usize>,
}

impl Default for GnnConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 1,
            leaky_slope: 0.2,
            degree_cap: DEFAULT_DEGREE_CAP,
            degree_caps: BTreeMap::new(),
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(GnnError::Config(format!(
                "dim {} must be positive and divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if self.degree_cap == 0 || self.degree_caps.values().any(|&c| c == 0) {
            return Err(GnnError::Config("degree caps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn cap_for(&self, kind: MetapathKind) -> usize {
        self.degree_caps.get(&kind).copied().unwrap_or(self.degree_cap)
    }
}

/// Trainable node embeddings for the four node kinds.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable<T> {
    pub users: Parameter<T>,
    pub items: Parameter<T>,
    pub user_factors: Parameter<T>,
    pub item_factors: Parameter<T>,
}

impl<T: Scalar> EmbeddingTable<T> {
    /// Uniform in `±1/√dim`; rows match the graph's node counts (entity row 0 is padding).
    pub fn new(g: &HeteroGraph, dim: usize, rng: &mut Rng) -> Self {
        let b = 1.0 / (dim as f64).sqrt();
        let mut table = |name: &str, rows: usize| {
            Parameter::new(name, Matrix::from_fn(rows, dim, |_, _| T::lit(rng.uniform(-b, b))))
        };
        Self {
            users: table("emb.user", g.n_users + 1),
            items: table("emb.item", g.n_items + 1),
            user_factors: table("emb.user_factor", g.n_user_factors()),
            item_factors: table("emb.item_factor", g.n_item_factors()),
        }
    }
}

/// Stage-one (`h_*`) and final (`hat_*`) representations, row-aligned with entity ids.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationOutput<T> {
    pub h_user: Matrix<T>,
    pub h_item: Matrix<T>,
    pub hat_user: Matrix<T>,
    pub hat_item: Matrix<T>,
}

#[derive(Debug, Clone)]
struct SemanticCache<T> {
    to_factor: GatCache<T>,
    to_entity: GatCache<T>,
}

/// Forward state for [`GraphModule::backward`].
#[derive(Debug, Clone)]
pub struct PropagationCache<T> {
    active: BTreeSet<MetapathKind>,
    user_semantic: Option<SemanticCache<T>>,
    item_semantic: Option<SemanticCache<T>>,
    item_to_user: Option<GatCache<T>>,
    user_to_item: Option<GatCache<T>>,
}

/// Embeddings plus the six attention layers of the two-stage propagation.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphModule<T> {
    pub config: GnnConfig,
    pub embeddings: EmbeddingTable<T>,
    pub user_to_factor: GatLayer<T>,
    pub factor_to_user: GatLayer<T>,
    pub item_to_factor: GatLayer<T>,
    pub factor_to_item: GatLayer<T>,
    pub item_to_user: GatLayer<T>,
    pub user_to_item: GatLayer<T>,
}

fn subgraph(
    subgraphs: &BTreeMap<MetapathKind, MetapathSubgraph>,
    kind: MetapathKind,
) -> Result<&MetapathSubgraph> {
    subgraphs.get(&kind).ok_or(GnnError::MissingSubgraph(kind.label()))
}

fn check_rows(what: &str, lists: usize, rows: usize) -> Result<()> {
    if lists != rows {
        return Err(GnnError::Shape(format!("{what}: {lists} neighbor lists for {rows} nodes")));
    }
    Ok(())
}

impl<T: Scalar> GraphModule<T> {
    pub fn new(g: &HeteroGraph, config: GnnConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let embeddings = EmbeddingTable::new(g, d, rng);
        let mut layer = |name: &str| GatLayer::new(name, d, d, config.heads, config.leaky_slope, rng);
        Ok(Self {
            user_to_factor: layer("gat.user_to_factor")?,
            factor_to_user: layer("gat.factor_to_user")?,
            item_to_factor: layer("gat.item_to_factor")?,
            factor_to_item: layer("gat.factor_to_item")?,
            item_to_user: layer("gat.item_to_user")?,
            user_to_item: layer("gat.user_to_item")?,
            embeddings,
            config,
        })
    }

    fn semantic_forward(
        to_factor: &GatLayer<T>,
        to_entity: &GatLayer<T>,
        sg: &MetapathSubgraph,
        entities: &Matrix<T>,
        factors: &Matrix<T>,
    ) -> Result<(Matrix<T>, SemanticCache<T>)> {
        check_rows(sg.kind.label(), sg.factor_members.len(), factors.rows())?;
        check_rows(sg.kind.label(), sg.neighbors.len(), entities.rows())?;
        let (f, c1) = to_factor.forward(&sg.factor_members, entities, factors, sg.factor_self_loop)?;
        let (h, c2) = to_entity.forward(&sg.neighbors, &f, entities, sg.self_loop)?;
        Ok((
            h,
            SemanticCache {
                to_factor: c1,
                to_entity: c2,
            },
        ))
    }

    /// Runs both stages over the `active` metapaths.
    ///
    /// An inactive semantic path passes that side's raw embeddings through;
    /// an inactive interaction path passes the stage-one output through.
    pub fn forward(
        &self,
        subgraphs: &BTreeMap<MetapathKind, MetapathSubgraph>,
        active: &BTreeSet<MetapathKind>,
    ) -> Result<(PropagationOutput<T>, PropagationCache<T>)> {
        let e = &self.embeddings;
        let mut cache = PropagationCache {
            active: active.clone(),
            user_semantic: None,
            item_semantic: None,
            item_to_user: None,
            user_to_item: None,
        };
        let h_user = if active.contains(&MetapathKind::UserSemantic) {
            let sg = subgraph(subgraphs, MetapathKind::UserSemantic)?;
            let (h, c) = Self::semantic_forward(
                &self.user_to_factor,
                &self.factor_to_user,
                sg,
                &e.users.value,
                &e.user_factors.value,
            )?;
            cache.user_semantic = Some(c);
            h
        } else {
            e.users.value.clone()
        };
        let h_item = if active.contains(&MetapathKind::ItemSemantic) {
            let sg = subgraph(subgraphs, MetapathKind::ItemSemantic)?;
            let (h, c) = Self::semantic_forward(
                &self.item_to_factor,
                &self.factor_to_item,
                sg,
                &e.items.value,
                &e.item_factors.value,
            )?;
            cache.item_semantic = Some(c);
            h
        } else {
            e.items.value.clone()
        };
        let hat_user = if active.contains(&MetapathKind::ItemToUser) {
            let sg = subgraph(subgraphs, MetapathKind::ItemToUser)?;
            check_rows(sg.kind.label(), sg.neighbors.len(), h_user.rows())?;
            let (h, c) = self.item_to_user.forward(&sg.neighbors, &h_item, &h_user, sg.self_loop)?;
            cache.item_to_user = Some(c);
            h
        } else {
            h_user.clone()
        };
        let hat_item = if active.contains(&MetapathKind::UserToItem) {
            let sg = subgraph(subgraphs, MetapathKind::UserToItem)?;
            check_rows(sg.kind.label(), sg.neighbors.len(), h_item.rows())?;
            let (h, c) = self.user_to_item.forward(&sg.neighbors, &h_user, &h_item, sg.self_loop)?;
            cache.user_to_item = Some(c);
            h
        } else {
            h_item.clone()
        };
        Ok((
            PropagationOutput {
                h_user,
                h_item,
                hat_user,
                hat_item,
            },
            cache,
        ))
    }

    /// Accumulates gradients of every embedding and layer parameter given
    /// the loss gradients wrt the final representations.
    pub fn backward(
        &mut self,
        subgraphs: &BTreeMap<MetapathKind, MetapathSubgraph>,
        cache: &PropagationCache<T>,
        d_hat_user: &Matrix<T>,
        d_hat_item: &Matrix<T>,
    ) -> Result<()> {
        let pass = |kind: MetapathKind, d: &Matrix<T>| {
            if cache.active.contains(&kind) {
                Matrix::zeros(d.rows(), d.cols())
            } else {
                d.clone()
            }
        };
        let mut d_h_user = pass(MetapathKind::ItemToUser, d_hat_user);
        let mut d_h_item = pass(MetapathKind::UserToItem, d_hat_item);
        let stale = || GnnError::Shape("propagation cache does not match the active metapaths".into());
        if cache.active.contains(&MetapathKind::ItemToUser) {
            let sg = subgraph(subgraphs, MetapathKind::ItemToUser)?;
            let c = cache.item_to_user.as_ref().ok_or_else(stale)?;
            let (ds, dt) = self.item_to_user.backward(&sg.neighbors, sg.self_loop, c, d_hat_user)?;
            d_h_item.add_scaled(T::one(), &ds)?;
            d_h_user.add_scaled(T::one(), &dt)?;
        }
        if cache.active.contains(&MetapathKind::UserToItem) {
            let sg = subgraph(subgraphs, MetapathKind::UserToItem)?;
            let c = cache.user_to_item.as_ref().ok_or_else(stale)?;
            let (ds, dt) = self.user_to_item.backward(&sg.neighbors, sg.self_loop, c, d_hat_item)?;
            d_h_user.add_scaled(T::one(), &ds)?;
            d_h_item.add_scaled(T::one(), &dt)?;
        }
        let e = &mut self.embeddings;
        if cache.active.contains(&MetapathKind::UserSemantic) {
            let sg = subgraph(subgraphs, MetapathKind::UserSemantic)?;
            let c = cache.user_semantic.as_ref().ok_or_else(stale)?;
            let (d_f, d_t) = self.factor_to_user.backward(&sg.neighbors, sg.self_loop, &c.to_entity, &d_h_user)?;
            let (d_s, d_q) = self.user_to_factor.backward(&sg.factor_members, sg.factor_self_loop, &c.to_factor, &d_f)?;
            e.users.grad.add_scaled(T::one(), &d_t)?;
            e.users.grad.add_scaled(T::one(), &d_s)?;
            e.user_factors.grad.add_scaled(T::one(), &d_q)?;
        } else {
            e.users.grad.add_scaled(T::one(), &d_h_user)?;
        }
        if cache.active.contains(&MetapathKind::ItemSemantic) {
            let sg = subgraph(subgraphs, MetapathKind::ItemSemantic)?;
            let c = cache.item_semantic.as_ref().ok_or_else(stale)?;
            let (d_f, d_t) = self.factor_to_item.backward(&sg.neighbors, sg.self_loop, &c.to_entity, &d_h_item)?;
            let (d_s, d_q) = self.item_to_factor.backward(&sg.factor_members, sg.factor_self_loop, &c.to_factor, &d_f)?;
            e.items.grad.add_scaled(T::one(), &d_t)?;
            e.items.grad.add_scaled(T::one(), &d_s)?;
            e.item_factors.grad.add_scaled(T::one(), &d_q)?;
        } else {
            e.items.grad.add_scaled(T::one(), &d_h_item)?;
        }
        Ok(())
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let e = &mut self.embeddings;
        let mut out = vec![&mut e.users, &mut e.items, &mut e.user_factors, &mut e.item_factors];
        for l in [
            &mut self.user_to_factor,
            &mut self.factor_to_user,
            &mut self.item_to_factor,
            &mut self.factor_to_item,
            &mut self.item_to_user,
            &mut self.user_to_item,
        ] {
            out.extend(l.params_mut());
        }
        out
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let e = &self.embeddings;
        let mut out = vec![&e.users, &e.items, &e.user_factors, &e.item_factors];
        for l in [
            &self.user_to_factor,
            &self.factor_to_user,
            &self.item_to_factor,
            &self.factor_to_item,
            &self.item_to_user,
            &self.user_to_item,
        ] {
            out.extend(l.params());
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> GraphModule<U> {
        GraphModule {
            config: self.config.clone(),
            embeddings: EmbeddingTable {
                users: self.embeddings.users.cast(),
                items: self.embeddings.items.cast(),
                user_factors: self.embeddings.user_factors.cast(),
                item_factors: self.embeddings.item_factors.cast(),
            },
            user_to_factor: self.user_to_factor.cast(),
            factor_to_user: self.factor_to_user.cast(),
            item_to_factor: self.item_to_factor.cast(),
            factor_to_item: self.factor_to_item.cast(),
            item_to_user: self.item_to_user.cast(),
            user_to_item: self.user_to_item.cast(),
        }
    }
}

impl<T: Scalar> HasParameters<T> for GraphModule<T> {
    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.params_mut()
    }
}

/// Extracts a subgraph for every metapath in `active` with the configured caps.
pub fn extract_all(
    g: &HeteroGraph,
    config: &GnnConfig,
    active: &BTreeSet<MetapathKind>,
    seed: u64,
) -> BTreeMap<MetapathKind, MetapathSubgraph> {
    active
        .iter()
        .map(|&k| (k, crate::graph::extract_subgraph(g, k, config.cap_for(k), seed)))
        .collect()
}
