//! Sequential recommenders that optionally consume graph-propagated user and
//! item representations as auxiliary features.
//!
//! User side: `R = ffn([backbone(history) ‖ Ĥu[user]])`. Item side: the id
//! embedding, or `proj([E[item] ‖ Ĥi[item]])` when graph features are on.
//! Scores are dot products of the two.

mod backbone;
mod checkpoint;
mod train;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

pub use backbone::{Backbone, BackboneCache, BackboneKind, GruCell, SelfAttention};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{epoch_plan, fit, train_epoch, EpochFold, EarlyStopping, EpochRecord, FitReport, TrainState};

use crate::dataio::{CandidateMode, TrainBatch};
use crate::gnn::{extract_all, GnnConfig, GnnError, GraphModule, PropagationCache};
use crate::graph::{HeteroGraph, MetapathKind, MetapathSubgraph};
use crate::numerics::{Activation, HasParameters, Linear, Matrix, Mlp, MlpCache, NumericsError, Parameter, Rng, Scalar};

#[derive(Debug, thiserror::Error)]
pub enum RecError {
    #[error("invalid recommender config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("non-finite loss {loss} at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize, loss: f64 },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("evaluation: {0}")]
    Eval(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Data(#[from] crate::dataio::DataError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, RecError>;

/// How often graph representations are recomputed during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefreshMode {
    /// One propagation per epoch; batch gradients flow back through that pass.
    PerEpoch,
    /// A fresh propagation for every batch.
    PerBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RecConfig {
    pub backbone: BackboneKind,
    /// Item embedding and user representation width.
    pub dim: usize,
    pub ffn_hidden: usize,
    pub use_graph: bool,
    /// Active metapaths; empty means the vanilla backbone.
    pub metapaths: BTreeSet<MetapathKind>,
    pub gnn: GnnConfig,
    pub refresh: RefreshMode,
    /// Hide each training target's own user–item edge from the interaction
    /// paths while that target is supervised.
    pub mask_target_edges: bool,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub n_neg: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_k: usize,
    pub valid_candidates: CandidateMode,
    pub seed: u64,
}

impl Default for RecConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::PooledMlp,
            dim: 32,
            ffn_hidden: 64,
            use_graph: true,
            metapaths: MetapathKind::ALL.into_iter().collect(),
            gnn: GnnConfig::default(),
            refresh: RefreshMode::PerEpoch,
            mask_target_edges: true,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 256,
            n_neg: 50,
            max_epochs: 100,
            patience: 3,
            eval_k: 10,
            valid_candidates: CandidateMode::Full,
            seed: 0,
        }
    }
}

impl RecConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("ffn_hidden", self.ffn_hidden),
            ("batch_size", self.batch_size),
            ("n_neg", self.n_neg),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("eval_k", self.eval_k),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(RecError::Config(format!("{name} must be positive")));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(RecError::Config("lr must be positive and weight_decay non-negative".into()));
        }
        if self.graph_enabled() {
            self.gnn.validate()?;
        }
        Ok(())
    }

    /// Graph features are used only when enabled and at least one metapath is active.
    pub fn graph_enabled(&self) -> bool {
        self.use_graph && !self.metapaths.is_empty()
    }
}

const MODEL_STREAM: u64 = 0x6d6f_64;
const GRAPH_STREAM: u64 = 0x6772_61;

/// The graph module together with the sampled subgraphs it propagates over.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphContext<T> {
    pub module: GraphModule<T>,
    pub subgraphs: BTreeMap<MetapathKind, MetapathSubgraph>,
    pub active: BTreeSet<MetapathKind>,
}

/// User–item edges hidden from the interaction paths; `hidden[user]` is sorted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeMask {
    pub hidden: Vec<Vec<u32>>,
}

impl EdgeMask {
    pub fn new(mut hidden: Vec<Vec<u32>>) -> Self {
        for h in &mut hidden {
            h.sort_unstable();
            h.dedup();
        }
        Self { hidden }
    }

    pub fn hides(&self, user: u32, item: u32) -> bool {
        self.hidden.get(user as usize).is_some_and(|h| h.binary_search(&item).is_ok())
    }

    /// Copies of `subgraphs` without the hidden edges; semantic paths are shared unchanged.
    pub fn apply(&self, subgraphs: &BTreeMap<MetapathKind, MetapathSubgraph>) -> BTreeMap<MetapathKind, MetapathSubgraph> {
        let mut out = subgraphs.clone();
        for (kind, sg) in out.iter_mut() {
            match kind {
                MetapathKind::ItemToUser => {
                    for (u, list) in sg.neighbors.iter_mut().enumerate() {
                        list.retain(|&i| !self.hides(u as u32, i));
                    }
                }
                MetapathKind::UserToItem => {
                    for (i, list) in sg.neighbors.iter_mut().enumerate() {
                        list.retain(|&u| !self.hides(u, i as u32));
                    }
                }
                MetapathKind::UserSemantic | MetapathKind::ItemSemantic => {}
            }
        }
        out
    }
}

/// Final user and item graph representations, row-aligned with entity ids.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphFeatures<T> {
    pub user: Matrix<T>,
    pub item: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecModel<T> {
    pub config: RecConfig,
    pub n_users: usize,
    pub max_len: usize,
    /// `(n_items + 1) × dim`; row 0 is padding.
    pub item_emb: Parameter<T>,
    /// `1 × dim` representation of an empty history.
    pub start: Parameter<T>,
    pub backbone: Backbone<T>,
    pub user_ffn: Mlp<T>,
    pub item_proj: Option<Linear<T>>,
    pub graph: Option<GraphContext<T>>,
    features: Option<GraphFeatures<T>>,
}

/// Forward state of one training batch.
#[derive(Debug, Clone)]
pub struct BatchCache<T> {
    users: Vec<u32>,
    backbone: BackboneCache<T>,
    ffn: MlpCache<T>,
    /// Distinct candidate items of the batch.
    items: Vec<u32>,
    /// Per row, `1 + n_neg` positions into `items`; position 0 is the target.
    slots: Vec<usize>,
    width: usize,
    proj_in: Option<Matrix<T>>,
    q: Matrix<T>,
    /// Softmax over each row's candidates.
    probs: Vec<T>,
}

fn uniform<T: Scalar>(rows: usize, cols: usize, bound: f64, rng: &mut Rng) -> Matrix<T> {
    Matrix::from_fn(rows, cols, |_, _| T::lit(rng.uniform(-bound, bound)))
}

fn concat_rows<T: Scalar>(left: &Matrix<T>, right: &Matrix<T>, rows: &[u32]) -> Matrix<T> {
    let (a, b) = (left.cols(), right.cols());
    let mut out = Matrix::zeros(left.rows(), a + b);
    for (r, &id) in rows.iter().enumerate() {
        let row = out.row_mut(r);
        row[..a].copy_from_slice(left.row(r));
        row[a..].copy_from_slice(right.row(id as usize));
    }
    out
}

impl<T: Scalar> RecModel<T> {
    /// `graph` is required when the config enables graph features and ignored otherwise.
    ///
    /// Vanilla parameters come from a stream that graph features never touch,
    /// so a model with graph features off is identical to one built without them.
    pub fn new(
        config: RecConfig,
        n_users: usize,
        n_items: usize,
        max_len: usize,
        graph: Option<&HeteroGraph>,
    ) -> Result<Self> {
        config.validate()?;
        if n_items == 0 || n_users == 0 {
            return Err(RecError::Input("empty user or item vocabulary".into()));
        }
        let d = config.dim;
        let mut rng = Rng::derived(config.seed, &[MODEL_STREAM]);
        let bound = 1.0 / (d as f64).sqrt();
        let mut emb = uniform(n_items + 1, d, bound, &mut rng);
        emb.row_mut(0).fill(T::zero());
        let item_emb = Parameter::new("item_emb", emb);
        let start = Parameter::new("start_token", uniform(1, d, bound, &mut rng));
        let backbone = Backbone::new(config.backbone, d, max_len, &mut rng)?;
        let (graph, item_proj, extra) = if config.graph_enabled() {
            let g = graph.ok_or_else(|| RecError::Config("graph features enabled but no graph given".into()))?;
            if g.n_users != n_users || g.n_items != n_items {
                return Err(RecError::Input(format!(
                    "graph has {}×{} entities, dataset {n_users}×{n_items}",
                    g.n_users, g.n_items
                )));
            }
            let gd = config.gnn.dim;
            let mut grng = Rng::derived(config.seed, &[GRAPH_STREAM]);
            let proj = Linear::new("item_proj", d + gd, d, &mut grng);
            let module = GraphModule::new(g, config.gnn.clone(), &mut grng)?;
            let active = config.metapaths.clone();
            let subgraphs = extract_all(g, &config.gnn, &active, config.seed);
            (Some(GraphContext { module, subgraphs, active }), Some(proj), gd)
        } else {
            (None, None, 0)
        };
        let user_ffn = Mlp::new(
            "user_ffn",
            &[d + extra, config.ffn_hidden, d],
            Activation::Relu,
            Activation::Identity,
            &mut rng,
        )?;
        Ok(Self {
            config,
            n_users,
            max_len,
            item_emb,
            start,
            backbone,
            user_ffn,
            item_proj,
            graph,
            features: None,
        })
    }

    pub fn n_items(&self) -> usize {
        self.item_emb.value.rows() - 1
    }

    pub fn uses_graph(&self) -> bool {
        self.graph.is_some()
    }

    /// Graph representations from the last [`RecModel::refresh`].
    pub fn features(&self) -> Option<&GraphFeatures<T>> {
        self.features.as_ref()
    }

    pub(crate) fn set_features(&mut self, f: Option<GraphFeatures<T>>) {
        self.features = f;
    }

    /// Runs the propagation with current parameters.
    pub fn propagate(&self) -> Result<Option<(GraphFeatures<T>, PropagationCache<T>)>> {
        self.propagate_over(None)
    }

    /// Propagation over `subgraphs` instead of the stored ones.
    pub fn propagate_over(
        &self,
        subgraphs: Option<&BTreeMap<MetapathKind, MetapathSubgraph>>,
    ) -> Result<Option<(GraphFeatures<T>, PropagationCache<T>)>> {
        let Some(ctx) = &self.graph else {
            return Ok(None);
        };
        let (out, cache) = ctx.module.forward(subgraphs.unwrap_or(&ctx.subgraphs), &ctx.active)?;
        Ok(Some((
            GraphFeatures {
                user: out.hat_user,
                item: out.hat_item,
            },
            cache,
        )))
    }

    /// Recomputes the stored graph representations used for inference.
    pub fn refresh(&mut self) -> Result<()> {
        self.features = self.propagate()?.map(|(f, _)| f);
        Ok(())
    }

    fn stored_features(&self) -> Result<Option<&GraphFeatures<T>>> {
        match (&self.graph, &self.features) {
            (None, _) => Ok(None),
            (Some(_), Some(f)) => Ok(Some(f)),
            (Some(_), None) => Err(RecError::Input("graph features not computed; call refresh first".into())),
        }
    }

    fn check_ids(&self, users: &[u32], items: &[u32]) -> Result<()> {
        if let Some(&u) = users.iter().find(|&&u| u == 0 || u as usize > self.n_users) {
            return Err(RecError::Input(format!("unknown user id {u}")));
        }
        if let Some(&i) = items.iter().find(|&&i| i == 0 || i as usize > self.n_items()) {
            return Err(RecError::Input(format!("unknown item id {i}")));
        }
        Ok(())
    }

    fn encode_with(
        &self,
        users: &[u32],
        histories: &[&[u32]],
        features: Option<&GraphFeatures<T>>,
    ) -> Result<(Matrix<T>, BackboneCache<T>, MlpCache<T>)> {
        self.check_ids(users, &[])?;
        let (s, bcache) = self.backbone.encode(&self.item_emb.value, self.start.value.row(0), histories)?;
        let x = match features {
            Some(f) => concat_rows(&s, &f.user, users),
            None => s,
        };
        let ffn = self.user_ffn.forward(&x)?;
        Ok((ffn.output().clone(), bcache, ffn))
    }

    fn items_with(&self, items: &[u32], features: Option<&GraphFeatures<T>>) -> Result<(Matrix<T>, Option<Matrix<T>>)> {
        self.check_ids(&[], items)?;
        let idx: Vec<usize> = items.iter().map(|&i| i as usize).collect();
        let e = self.item_emb.value.select_rows(&idx);
        match (features, &self.item_proj) {
            (Some(f), Some(proj)) => {
                let x = concat_rows(&e, &f.item, items);
                Ok((proj.forward(&x)?, Some(x)))
            }
            _ => Ok((e, None)),
        }
    }

    /// User representations for `(user, history)` pairs; an empty history uses the start token.
    pub fn encode_users(&self, users: &[u32], histories: &[&[u32]]) -> Result<Matrix<T>> {
        if users.len() != histories.len() {
            return Err(RecError::Input("one history per user required".into()));
        }
        Ok(self.encode_with(users, histories, self.stored_features()?)?.0)
    }

    pub fn user_encode(&self, user: u32, history: &[u32]) -> Result<Vec<T>> {
        Ok(self.encode_users(&[user], &[history])?.row(0).to_vec())
    }

    /// Item representations, one row per id.
    pub fn item_vectors(&self, items: &[u32]) -> Result<Matrix<T>> {
        Ok(self.items_with(items, self.stored_features()?)?.0)
    }

    pub fn score(&self, user_vec: &[T], item: u32) -> Result<T> {
        Ok(self.score_many(user_vec, &[item])?[0])
    }

    pub fn score_many(&self, user_vec: &[T], items: &[u32]) -> Result<Vec<T>> {
        if user_vec.len() != self.config.dim {
            return Err(RecError::Input(format!("user vector has width {}", user_vec.len())));
        }
        let q = self.item_vectors(items)?;
        Ok(q.iter_rows().map(|r| crate::numerics::dot(user_vec, r)).collect())
    }

    /// Mean cross-entropy of each row's target against its negatives.
    pub fn batch_forward(&self, batch: &TrainBatch, features: Option<&GraphFeatures<T>>) -> Result<(f64, BatchCache<T>)> {
        if batch.is_empty() {
            return Err(RecError::Input("empty batch".into()));
        }
        let histories: Vec<&[u32]> = (0..batch.len()).map(|r| batch.history(r)).collect();
        let (r_mat, bcache, ffn) = self.encode_with(&batch.users, &histories, features)?;
        let width = 1 + batch.n_neg;
        let mut pos: BTreeMap<u32, usize> = BTreeMap::new();
        for row in 0..batch.len() {
            for &i in std::iter::once(&batch.targets[row]).chain(batch.negatives(row)) {
                pos.entry(i).or_insert(0);
            }
        }
        let items: Vec<u32> = pos.keys().copied().collect();
        for (k, v) in pos.values_mut().enumerate() {
            *v = k;
        }
        let mut slots = Vec::with_capacity(batch.len() * width);
        for row in 0..batch.len() {
            slots.push(pos[&batch.targets[row]]);
            slots.extend(batch.negatives(row).iter().map(|i| pos[i]));
        }
        let (q, proj_in) = self.items_with(&items, features)?;
        let mut probs = Vec::with_capacity(slots.len());
        let mut loss = 0.0;
        for row in 0..batch.len() {
            let u = r_mat.row(row);
            let logits: Vec<T> = slots[row * width..(row + 1) * width]
                .iter()
                .map(|&s| crate::numerics::dot(u, q.row(s)))
                .collect();
            let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
            let e: Vec<T> = logits.iter().map(|&l| (l - m).exp()).collect();
            let z: T = e.iter().copied().sum();
            loss += (z.ln() + m - logits[0]).as_f64();
            probs.extend(e.iter().map(|&x| x / z));
        }
        let cache = BatchCache {
            users: batch.users.clone(),
            backbone: bcache,
            ffn,
            items,
            slots,
            width,
            proj_in,
            q,
            probs,
        };
        Ok((loss / batch.len() as f64, cache))
    }

    /// Accumulates gradients of the mean batch loss; returns the gradients
    /// wrt the graph representations when graph features were used.
    pub fn batch_backward(&mut self, cache: &BatchCache<T>) -> Result<Option<GraphFeatures<T>>> {
        let b = cache.users.len();
        let d = self.config.dim;
        let inv = T::lit(1.0 / b as f64);
        let r_mat = cache.ffn.output();
        let mut d_r = Matrix::zeros(b, d);
        let mut d_q = Matrix::zeros(cache.items.len(), d);
        for row in 0..b {
            for j in 0..cache.width {
                let k = row * cache.width + j;
                let mut g = cache.probs[k];
                if j == 0 {
                    g -= T::one();
                }
                g *= inv;
                let s = cache.slots[k];
                crate::numerics::axpy(g, cache.q.row(s), d_r.row_mut(row));
                crate::numerics::axpy(g, r_mat.row(row), d_q.row_mut(s));
            }
        }
        let d_x = self.user_ffn.backward(&cache.ffn, &d_r)?;
        let mut d_features = self.graph.as_ref().map(|ctx| {
            let gd = ctx.module.config.dim;
            GraphFeatures {
                user: Matrix::zeros(self.n_users + 1, gd),
                item: Matrix::zeros(self.n_items() + 1, gd),
            }
        });
        let d_s = match &mut d_features {
            Some(df) => {
                let mut d_s = Matrix::zeros(b, d);
                for (row, &u) in cache.users.iter().enumerate() {
                    let src = d_x.row(row);
                    d_s.row_mut(row).copy_from_slice(&src[..d]);
                    crate::numerics::axpy(T::one(), &src[d..], df.user.row_mut(u as usize));
                }
                d_s
            }
            None => d_x,
        };
        self.backbone
            .backward(&cache.backbone, &d_s, &mut self.item_emb.grad, self.start.grad.row_mut(0))?;
        let d_e = match (&mut self.item_proj, &cache.proj_in, &mut d_features) {
            (Some(proj), Some(x), Some(df)) => {
                let d_in = proj.backward(x, &d_q)?;
                let mut d_e = Matrix::zeros(cache.items.len(), d);
                for (k, &i) in cache.items.iter().enumerate() {
                    let src = d_in.row(k);
                    d_e.row_mut(k).copy_from_slice(&src[..d]);
                    crate::numerics::axpy(T::one(), &src[d..], df.item.row_mut(i as usize));
                }
                d_e
            }
            _ => d_q,
        };
        for (k, &i) in cache.items.iter().enumerate() {
            crate::numerics::axpy(T::one(), d_e.row(k), self.item_emb.grad.row_mut(i as usize));
        }
        Ok(d_features)
    }

    /// Loss with a fresh propagation, for evaluation and gradient checks.
    pub fn loss(&self, batch: &TrainBatch) -> Result<f64> {
        self.loss_over(batch, None)
    }

    /// As [`Self::loss`], propagating over `subgraphs` when given.
    pub fn loss_over(&self, batch: &TrainBatch, subgraphs: Option<&BTreeMap<MetapathKind, MetapathSubgraph>>) -> Result<f64> {
        let features = self.propagate_over(subgraphs)?.map(|(f, _)| f);
        Ok(self.batch_forward(batch, features.as_ref())?.0)
    }

    /// Fresh propagation, forward and full backward; returns the loss.
    pub fn accumulate_gradients(&mut self, batch: &TrainBatch) -> Result<f64> {
        self.accumulate_gradients_over(batch, None)
    }

    /// As [`Self::accumulate_gradients`], propagating over `subgraphs` when given.
    pub fn accumulate_gradients_over(
        &mut self,
        batch: &TrainBatch,
        subgraphs: Option<&BTreeMap<MetapathKind, MetapathSubgraph>>,
    ) -> Result<f64> {
        let prop = self.propagate_over(subgraphs)?;
        let (loss, cache) = self.batch_forward(batch, prop.as_ref().map(|(f, _)| f))?;
        let d_features = self.batch_backward(&cache)?;
        self.graph_backward(subgraphs, prop.as_ref().map(|(_, c)| c), d_features.as_ref())?;
        Ok(loss)
    }

    /// Training view of the stored subgraphs with `mask` applied.
    pub fn masked_subgraphs(&self, mask: &EdgeMask) -> Option<BTreeMap<MetapathKind, MetapathSubgraph>> {
        self.graph.as_ref().map(|ctx| mask.apply(&ctx.subgraphs))
    }

    pub(crate) fn graph_backward(
        &mut self,
        subgraphs: Option<&BTreeMap<MetapathKind, MetapathSubgraph>>,
        cache: Option<&PropagationCache<T>>,
        d_features: Option<&GraphFeatures<T>>,
    ) -> Result<()> {
        if let (Some(ctx), Some(c), Some(df)) = (&mut self.graph, cache, d_features) {
            ctx.module.backward(subgraphs.unwrap_or(&ctx.subgraphs), c, &df.user, &df.item)?;
        }
        Ok(())
    }

    /// Every trainable parameter in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = vec![&mut self.item_emb, &mut self.start];
        out.extend(self.backbone.params_mut());
        out.extend(self.user_ffn.params_mut());
        if let Some(p) = &mut self.item_proj {
            out.extend(p.params_mut());
        }
        if let Some(ctx) = &mut self.graph {
            out.extend(ctx.module.params_mut());
        }
        out
    }

    /// Backbone-side parameters and graph-module parameters, in `params_mut` order.
    pub fn split_params_mut(&mut self) -> (Vec<&mut Parameter<T>>, Vec<&mut Parameter<T>>) {
        let mut dense = vec![&mut self.item_emb, &mut self.start];
        dense.extend(self.backbone.params_mut());
        dense.extend(self.user_ffn.params_mut());
        if let Some(p) = &mut self.item_proj {
            dense.extend(p.params_mut());
        }
        let graph = match &mut self.graph {
            Some(ctx) => ctx.module.params_mut(),
            None => Vec::new(),
        };
        (dense, graph)
    }

    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut out = vec![&self.item_emb, &self.start];
        out.extend(self.backbone.params());
        out.extend(self.user_ffn.params());
        if let Some(p) = &self.item_proj {
            out.extend(p.params());
        }
        if let Some(ctx) = &self.graph {
            out.extend(ctx.module.params());
        }
        out
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn cast<U: Scalar>(&self) -> RecModel<U> {
        RecModel {
            config: self.config.clone(),
            n_users: self.n_users,
            max_len: self.max_len,
            item_emb: self.item_emb.cast(),
            start: self.start.cast(),
            backbone: self.backbone.cast(),
            user_ffn: self.user_ffn.cast(),
            item_proj: self.item_proj.as_ref().map(|p| Linear {
                weight: p.weight.cast(),
                bias: p.bias.cast(),
            }),
            graph: self.graph.as_ref().map(|ctx| GraphContext {
                module: ctx.module.cast(),
                subgraphs: ctx.subgraphs.clone(),
                active: ctx.active.clone(),
            }),
            features: self.features.as_ref().map(|f| GraphFeatures {
                user: f.user.cast(),
                item: f.item.cast(),
            }),
        }
    }

    /// Parameter values only, for restoring the best epoch.
    pub fn snapshot(&self) -> Vec<Matrix<T>> {
        self.params().into_iter().map(|p| p.value.clone()).collect()
    }

    pub fn restore_snapshot(&mut self, values: &[Matrix<T>]) -> Result<()> {
        let mut params = self.params_mut();
        if params.len() != values.len() {
            return Err(RecError::Input("snapshot does not match the model".into()));
        }
        for (p, v) in params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(RecError::Input(format!("snapshot shape mismatch for {}", p.name)));
            }
            p.value = v.clone();
        }
        Ok(())
    }
}

impl<T: Scalar> HasParameters<T> for RecModel<T> {
    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        self.params_mut()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataio::{sample_batch, SplitDataset, Vocab};
    use crate::graph::{build_graph, FactorTable};
    use crate::numerics::check_gradients;
    use proptest::prelude::*;
    use crate::numerics::Rng;

    /// Small dataset where every user has at least four positives.
    pub(crate) fn toy_world(n_users: usize, n_items: usize, seed: u64) -> (SplitDataset, HeteroGraph) {
        let mut rng = Rng::new(seed);
        let per_user: Vec<Vec<u32>> = (0..n_users)
            .map(|_| {
                let len = 4 + rng.below(4);
                (0..len).map(|_| 1 + rng.below(n_items) as u32).collect()
            })
            .collect();
        let users = Vocab::from_raw((1..=n_users).map(|u| format!("u{u}")).collect());
        let items = Vocab::from_raw((1..=n_items).map(|i| format!("i{i}")).collect());
        let mut cfg = crate::dataio::PreprocessConfig::default();
        cfg.max_len = 6;
        let ds = SplitDataset::from_sequences(cfg, users, items, per_user).unwrap();
        let uq = FactorTable::from_rows(2, 3, &(0..n_users).map(|u| vec![(u % 3) as u32, (u % 2) as u32]).collect::<Vec<_>>());
        let iq = FactorTable::from_rows(2, 3, &(0..n_items).map(|i| vec![(i % 3) as u32, (i / 3 % 3) as u32]).collect::<Vec<_>>());
        let levels = [0usize, 1].into_iter().collect();
        let g = build_graph(&ds, &uq, &iq, &levels, true).unwrap();
        (ds, g)
    }

    pub(crate) fn model_for<T: Scalar>(ds: &SplitDataset, g: &HeteroGraph, config: RecConfig) -> RecModel<T> {
        RecModel::new(config, ds.n_users(), ds.n_items(), ds.config.max_len, Some(g)).unwrap()
    }

    fn small_config(kind: BackboneKind, use_graph: bool) -> RecConfig {
        RecConfig {
            backbone: kind,
            dim: 4,
            ffn_hidden: 5,
            use_graph,
            gnn: GnnConfig {
                dim: 4,
                heads: 2,
                degree_cap: 3,
                ..GnnConfig::default()
            },
            n_neg: 4,
            ..RecConfig::default()
        }
    }

    #[test]
    fn initial_loss_is_near_uniform() {
        let (ds, g) = toy_world(60, 120, 1);
        for use_graph in [false, true] {
            let cfg = RecConfig { use_graph, ..RecConfig::default() };
            let model: RecModel<f32> = model_for(&ds, &g, cfg);
            let batch = sample_batch(&ds, 128, 50, &mut Rng::new(2)).unwrap();
            let loss = model.loss(&batch).unwrap();
            assert!((loss - 51f64.ln()).abs() < 0.3, "loss {loss}");
        }
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        let (ds, g) = toy_world(5, 9, 3);
        let batch = sample_batch(&ds, 6, 4, &mut Rng::new(4)).unwrap();
        let kinds = [BackboneKind::PooledMlp, BackboneKind::Recurrent];
        for kind in kinds {
            for use_graph in [false, true] {
                let mut model: RecModel<f64> = model_for(&ds, &g, small_config(kind, use_graph));
                model.zero_grad();
                model.accumulate_gradients(&batch).unwrap();
                let err = check_gradients(&mut model, 1e-6, |m| m.loss(&batch).unwrap());
                assert!(err < 1e-4, "{kind:?} graph={use_graph}: {err}");
            }
        }
    }

    #[test]
    fn masked_propagation_gradients() {
        let (ds, g) = toy_world(5, 9, 3);
        let batch = sample_batch(&ds, 6, 4, &mut Rng::new(4)).unwrap();
        let mut model: RecModel<f64> = model_for(&ds, &g, small_config(BackboneKind::PooledMlp, true));
        let hidden = ds.user_ids().map(|u| ds.train_items(u)[..1].to_vec());
        let mask = EdgeMask::new(std::iter::once(Vec::new()).chain(hidden).collect());
        let view = model.masked_subgraphs(&mask).unwrap();
        assert_ne!(view, model.graph.as_ref().unwrap().subgraphs);
        model.zero_grad();
        model.accumulate_gradients_over(&batch, Some(&view)).unwrap();
        let err = check_gradients(&mut model, 1e-6, |m| m.loss_over(&batch, Some(&view)).unwrap());
        assert!(err < 1e-4, "{err}");
    }

    #[cfg(feature = "self-attention")]
    #[test]
    fn attention_backbone_gradients() {
        let (ds, g) = toy_world(5, 9, 5);
        let batch = sample_batch(&ds, 6, 4, &mut Rng::new(6)).unwrap();
        let mut model: RecModel<f64> = model_for(&ds, &g, small_config(BackboneKind::SelfAttention, true));
        model.zero_grad();
        model.accumulate_gradients(&batch).unwrap();
        let err = check_gradients(&mut model, 1e-6, |m| m.loss(&batch).unwrap());
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn vanilla_reduction_is_exact() {
        let (ds, g) = toy_world(30, 40, 7);
        let cfg = RecConfig { use_graph: false, ..RecConfig::default() };
        let a: RecModel<f32> = RecModel::new(cfg.clone(), ds.n_users(), ds.n_items(), 6, None).unwrap();
        let b: RecModel<f32> = model_for(&ds, &g, cfg);
        assert_eq!(a, b);
        let empty = RecConfig {
            metapaths: BTreeSet::new(),
            ..RecConfig::default()
        };
        let c: RecModel<f32> = model_for(&ds, &g, empty.clone());
        assert!(!c.uses_graph());
        assert_eq!(a.snapshot(), c.snapshot());
    }

    #[test]
    fn pooled_single_item_and_empty_history() {
        let (ds, g) = toy_world(10, 12, 8);
        let model: RecModel<f64> = model_for(&ds, &g, RecConfig { use_graph: false, ..RecConfig::default() });
        let (s, _) = model.backbone.encode(&model.item_emb.value, model.start.value.row(0), &[&[5], &[]]).unwrap();
        assert_eq!(s.row(0), model.item_emb.value.row(5));
        assert_eq!(s.row(1), model.start.value.row(0));
        let a = model.user_encode(1, &[]).unwrap();
        assert_eq!(a, model.user_encode(1, &[]).unwrap());
    }

    #[test]
    fn fusion_matches_hand_composition() {
        let (ds, g) = toy_world(6, 10, 9);
        let mut model: RecModel<f64> = model_for(&ds, &g, small_config(BackboneKind::PooledMlp, true));
        model.refresh().unwrap();
        let f = model.features().unwrap().clone();
        let hist = [2u32, 7];
        let got = model.user_encode(3, &hist).unwrap();
        let d = 4;
        let mut x: Vec<f64> = (0..d)
            .map(|c| (model.item_emb.value.get(2, c) + model.item_emb.value.get(7, c)) / 2.0)
            .collect();
        x.extend_from_slice(f.user.row(3));
        let mut h = x;
        for (li, layer) in model.user_ffn.layers.iter().enumerate() {
            let w = &layer.weight.value;
            let mut y: Vec<f64> = layer.bias.value.row(0).to_vec();
            for (c, yc) in y.iter_mut().enumerate() {
                for (r, hr) in h.iter().enumerate() {
                    *yc += hr * w.get(r, c);
                }
            }
            if li == 0 {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            h = y;
        }
        for (a, b) in got.iter().zip(&h) {
            assert!((a - b).abs() < 1e-6);
        }
        let item = 4u32;
        let mut xi: Vec<f64> = model.item_emb.value.row(item as usize).to_vec();
        xi.extend_from_slice(f.item.row(item as usize));
        let p = model.item_proj.as_ref().unwrap();
        let q: Vec<f64> = (0..d)
            .map(|c| p.bias.value.get(0, c) + xi.iter().enumerate().map(|(r, v)| v * p.weight.value.get(r, c)).sum::<f64>())
            .collect();
        let expect: f64 = got.iter().zip(&q).map(|(a, b)| a * b).sum();
        assert!((model.score(&got, item).unwrap() - expect).abs() < 1e-6);
    }

    #[test]
    fn batch_scoring_matches_loop() {
        let (ds, g) = toy_world(20, 1001, 10);
        let mut model: RecModel<f32> = model_for(&ds, &g, RecConfig::default());
        model.refresh().unwrap();
        let u = model.user_encode(1, ds.test_history(1)).unwrap();
        let items: Vec<u32> = (1..=1001).collect();
        let batch = model.score_many(&u, &items).unwrap();
        for (&i, &s) in items.iter().zip(&batch) {
            assert!((model.score(&u, i).unwrap() - s).abs() < 1e-6);
        }
    }

    #[test]
    fn trivial_score_values() {
        let (ds, g) = toy_world(4, 6, 11);
        let mut model: RecModel<f64> = model_for(&ds, &g, small_config(BackboneKind::PooledMlp, false));
        model.item_emb.value.row_mut(1).copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        assert_eq!(model.score(&[0.0, 1.0, 0.0, 0.0], 1).unwrap(), 0.0);
        assert_eq!(model.score(&[1.0, 0.0, 0.0, 0.0], 1).unwrap(), 1.0);
    }

    #[test]
    fn rejects_unknown_ids_and_missing_features() {
        let (ds, g) = toy_world(4, 6, 12);
        let model: RecModel<f64> = model_for(&ds, &g, small_config(BackboneKind::PooledMlp, true));
        assert!(model.user_encode(1, &[1]).is_err());
        let mut model = model;
        model.refresh().unwrap();
        assert!(model.score(&[0.0; 4], 7).is_err());
        assert!(model.score(&[0.0; 4], 0).is_err());
        assert!(model.user_encode(5, &[1]).is_err());
        assert!(model.user_encode(1, &[9]).is_err());
        let cfg = small_config(BackboneKind::PooledMlp, true);
        assert!(RecModel::<f64>::new(cfg, 4, 6, 6, None).is_err());
    }

    #[cfg(not(feature = "self-attention"))]
    #[test]
    fn attention_backbone_requires_feature() {
        let cfg = RecConfig { backbone: BackboneKind::SelfAttention, use_graph: false, ..RecConfig::default() };
        assert!(RecModel::<f32>::new(cfg, 2, 2, 3, None).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn loss_is_invariant_to_negative_order(seed in 0u64..500) {
            let (ds, g) = toy_world(8, 15, seed);
            let model: RecModel<f64> = model_for(&ds, &g, small_config(BackboneKind::Recurrent, true));
            let batch = sample_batch(&ds, 5, 4, &mut Rng::new(seed)).unwrap();
            let mut shuffled = batch.clone();
            let mut rng = Rng::new(seed + 1);
            for row in 0..batch.len() {
                rng.shuffle(&mut shuffled.negatives[row * 4..(row + 1) * 4]);
            }
            let a = model.loss(&batch).unwrap();
            let b = model.loss(&shuffled).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
