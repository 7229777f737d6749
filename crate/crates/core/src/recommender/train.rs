use serde::{Deserialize, Serialize};

use super::{EdgeMask, RecConfig, RecError, RecModel, RefreshMode, Result};
use crate::dataio::{batches_from, build_candidates, epoch_batches, EvalSplit, SplitDataset, TrainBatch};
use crate::eval::{evaluate, ModelScorer};
use crate::numerics::{AdamW, AdamWConfig, Rng, Scalar};

const BATCH_STREAM: u64 = 0x6261_74;
const VALID_STREAM: u64 = 0x7661_6c;
const FOLD_STREAM: u64 = 0x666f_6c;

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: usize,
    /// Epochs since the last improvement; never exceeds `patience`.
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records one epoch's metric; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, metric: f64) -> bool {
        if self.best.is_none_or(|b| metric > b) {
            self.best = Some(metric);
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale = (self.stale + 1).min(self.patience);
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
}

#[derive(Debug, Clone)]
pub struct TrainState<T> {
    /// Steps the backbone side after every batch.
    pub optimizer: AdamW<T>,
    /// Steps the graph module; once per epoch under `RefreshMode::PerEpoch`.
    pub graph_optimizer: AdamW<T>,
    pub epoch: usize,
    pub stopper: EarlyStopping,
}

impl<T: Scalar> TrainState<T> {
    pub fn new(config: &RecConfig) -> Self {
        let adam = || {
            AdamW::new(AdamWConfig {
                lr: config.lr,
                weight_decay: config.weight_decay,
                ..AdamWConfig::default()
            })
        };
        Self {
            optimizer: adam(),
            graph_optimizer: adam(),
            epoch: 0,
            stopper: EarlyStopping::new(config.patience),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_ndcg: f64,
    pub valid_hr: f64,
    pub improved: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_ndcg: f64,
    pub stopped_early: bool,
}

/// Batches that share one view of the graph.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochFold {
    /// Edges hidden from the interaction paths while these batches train.
    pub mask: Option<EdgeMask>,
    pub batches: Vec<TrainBatch>,
}

impl EpochFold {
    pub fn unmasked(batches: Vec<TrainBatch>) -> Self {
        Self { mask: None, batches }
    }
}

/// The training batches of one epoch.
///
/// With target-edge masking on an interaction path, each user's training
/// positions are split into two random folds. Targets of one fold train
/// against a graph without that fold's user–item edges, so no target is
/// visible to the graph while it is supervised. Otherwise there is a single
/// unmasked fold.
pub fn epoch_plan<T: Scalar>(model: &RecModel<T>, ds: &SplitDataset, epoch: usize) -> Result<Vec<EpochFold>> {
    let c = &model.config;
    let mut rng = Rng::derived(c.seed, &[BATCH_STREAM, epoch as u64]);
    let interaction = model
        .graph
        .as_ref()
        .is_some_and(|g| g.active.iter().any(|k| !k.is_semantic()));
    if !(c.mask_target_edges && interaction) {
        return Ok(vec![EpochFold::unmasked(epoch_batches(ds, c.batch_size, c.n_neg, &mut rng)?)]);
    }
    let mut fold_rng = Rng::derived(c.seed, &[FOLD_STREAM, epoch as u64]);
    let mut hidden = [vec![Vec::new(); ds.n_users() + 1], vec![Vec::new(); ds.n_users() + 1]];
    let mut fold_of = vec![Vec::new(); ds.n_users() + 1];
    for user in ds.user_ids() {
        for &item in ds.train_items(user) {
            let f = fold_rng.below(2);
            hidden[f][user as usize].push(item);
            fold_of[user as usize].push(f);
        }
    }
    let mut examples = [Vec::new(), Vec::new()];
    for ex in ds.train_examples() {
        examples[fold_of[ex.user as usize][ex.end]].push(ex);
    }
    let mut folds = Vec::with_capacity(2);
    for (h, ex) in hidden.into_iter().zip(examples) {
        if ex.is_empty() {
            continue;
        }
        folds.push(EpochFold {
            mask: Some(EdgeMask::new(h)),
            batches: batches_from(ds, ex, c.batch_size, c.n_neg, &mut rng)?,
        });
    }
    Ok(folds)
}

/// Trains one epoch and returns the per-batch losses.
///
/// The backbone side steps after every batch. Under `PerEpoch` each fold
/// propagates once; the graph module's gradients, all taken at that
/// propagation, are summed over the fold and applied in one step, so the
/// cached features never go stale relative to the parameters that made them.
pub fn train_epoch<T: Scalar>(
    model: &mut RecModel<T>,
    folds: &[EpochFold],
    state: &mut TrainState<T>,
    epoch: usize,
) -> Result<Vec<f64>> {
    let mut losses = Vec::new();
    for fold in folds {
        let view = fold.mask.as_ref().and_then(|m| model.masked_subgraphs(m));
        let shared = match model.config.refresh {
            RefreshMode::PerEpoch => model.propagate_over(view.as_ref())?,
            RefreshMode::PerBatch => None,
        };
        model.zero_grad();
        for batch in &fold.batches {
            let loss = match &shared {
                Some((features, cache)) => {
                    for p in model.split_params_mut().0 {
                        p.zero_grad();
                    }
                    let (loss, bc) = model.batch_forward(batch, Some(features))?;
                    let d = model.batch_backward(&bc)?;
                    model.graph_backward(view.as_ref(), Some(cache), d.as_ref())?;
                    loss
                }
                None => {
                    model.zero_grad();
                    model.accumulate_gradients_over(batch, view.as_ref())?
                }
            };
            if !loss.is_finite() {
                return Err(RecError::NonFinite {
                    epoch,
                    batch: losses.len(),
                    loss,
                });
            }
            let (mut dense, mut graph) = model.split_params_mut();
            state.optimizer.step(&mut dense);
            if shared.is_none() && !graph.is_empty() {
                state.graph_optimizer.step(&mut graph);
            }
            losses.push(loss);
        }
        if shared.is_some() {
            state.graph_optimizer.step(&mut model.split_params_mut().1);
        }
    }
    Ok(losses)
}

/// Trains with early stopping on validation NDCG and restores the best epoch.
pub fn fit<T: Scalar>(model: &mut RecModel<T>, ds: &SplitDataset) -> Result<FitReport> {
    let config = model.config.clone();
    let valid = build_candidates(
        ds,
        EvalSplit::Valid,
        config.valid_candidates,
        &Rng::derived(config.seed, &[VALID_STREAM]),
    )?;
    let mut state = TrainState::<T>::new(&config);
    let mut best = model.snapshot();
    let mut history = Vec::new();
    let mut stopped_early = false;
    for epoch in 1..=config.max_epochs {
        state.epoch = epoch;
        let folds = epoch_plan(model, ds, epoch)?;
        let losses = train_epoch(model, &folds, &mut state, epoch)?;
        model.refresh()?;
        let report = evaluate(&ModelScorer::new(model)?, &valid, config.eval_k)
            .map_err(|e| RecError::Eval(e.to_string()))?;
        let improved = state.stopper.observe(epoch, report.ndcg);
        if improved {
            best = model.snapshot();
        }
        let train_loss = losses.iter().sum::<f64>() / losses.len() as f64;
        log::info!(
            "epoch {epoch}: loss {train_loss:.4} valid ndcg@{} {:.4}{}",
            config.eval_k,
            report.ndcg,
            if improved { " *" } else { "" }
        );
        history.push(EpochRecord {
            epoch,
            train_loss,
            valid_ndcg: report.ndcg,
            valid_hr: report.hr,
            improved,
        });
        if state.stopper.should_stop() {
            stopped_early = true;
            break;
        }
    }
    model.restore_snapshot(&best)?;
    model.refresh()?;
    Ok(FitReport {
        history,
        best_epoch: state.stopper.best_epoch,
        best_valid_ndcg: state.stopper.best.unwrap_or(0.0),
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::super::tests::{model_for, toy_world};
    use super::*;
    use crate::synthetic::{generate, SyntheticConfig};

    #[test]
    fn patience_arithmetic() {
        let mut s = EarlyStopping::new(3);
        let metrics = [0.5, 0.4, 0.3, 0.2, 0.1];
        let mut stopped_at = None;
        for (e, &m) in metrics.iter().enumerate() {
            s.observe(e + 1, m);
            assert!(s.stale <= 3);
            if s.should_stop() {
                stopped_at = Some(e + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(4));
        assert_eq!(s.best_epoch, 1);
        let mut s = EarlyStopping::new(2);
        assert!(s.observe(1, 0.1));
        assert!(!s.observe(2, 0.1));
        assert!(s.observe(3, 0.2));
        assert_eq!(s.stale, 0);
    }

    fn planted(seed: u64) -> SplitDataset {
        let cfg = SyntheticConfig {
            seed,
            ..SyntheticConfig::default()
        };
        generate(&cfg).unwrap().dataset
    }

    #[test]
    fn loss_drops_within_five_epochs() {
        let ds = planted(1);
        let cfg = RecConfig {
            use_graph: false,
            ..RecConfig::default()
        };
        let mut model: RecModel<f32> = RecModel::new(cfg.clone(), ds.n_users(), ds.n_items(), ds.config.max_len, None).unwrap();
        let mut state = TrainState::new(&cfg);
        let mut means = Vec::new();
        for epoch in 1..=5 {
            let batches = epoch_batches(&ds, cfg.batch_size, cfg.n_neg, &mut Rng::new(epoch)).unwrap();
            let l = train_epoch(&mut model, &[EpochFold::unmasked(batches)], &mut state, epoch as usize).unwrap();
            if epoch == 1 {
                means.push(l[0]);
            }
            means.push(l.iter().sum::<f64>() / l.len() as f64);
        }
        let (first, last) = (means[0], *means.last().unwrap());
        assert!(last <= 0.7 * first, "{first} -> {last}");
    }

    #[test]
    fn fit_is_deterministic_and_restores_best() {
        let (ds, g) = toy_world(40, 60, 2);
        let cfg = RecConfig {
            dim: 8,
            ffn_hidden: 8,
            n_neg: 10,
            batch_size: 32,
            max_epochs: 6,
            patience: 2,
            gnn: crate::gnn::GnnConfig {
                dim: 8,
                ..Default::default()
            },
            ..RecConfig::default()
        };
        let run = || {
            let mut m: RecModel<f32> = model_for(&ds, &g, cfg.clone());
            let r = fit(&mut m, &ds).unwrap();
            (m, r)
        };
        let (m1, r1) = run();
        let (m2, r2) = run();
        assert_eq!(r1, r2);
        assert_eq!(m1.snapshot(), m2.snapshot());
        let best = r1.history.iter().map(|h| h.valid_ndcg).fold(f64::MIN, f64::max);
        assert_eq!(r1.best_valid_ndcg, best);
        let valid = build_candidates(&ds, EvalSplit::Valid, cfg.valid_candidates, &Rng::derived(cfg.seed, &[VALID_STREAM])).unwrap();
        let again = evaluate(&ModelScorer::new(&m1).unwrap(), &valid, 10).unwrap();
        assert_eq!(again.ndcg, best);
    }

    #[test]
    fn per_batch_refresh_trains() {
        let (ds, g) = toy_world(30, 40, 3);
        let cfg = RecConfig {
            dim: 8,
            n_neg: 5,
            batch_size: 16,
            refresh: RefreshMode::PerBatch,
            gnn: crate::gnn::GnnConfig {
                dim: 8,
                ..Default::default()
            },
            ..RecConfig::default()
        };
        let mut m: RecModel<f32> = model_for(&ds, &g, cfg.clone());
        let mut state = TrainState::new(&cfg);
        let batches = epoch_batches(&ds, 16, 5, &mut Rng::new(0)).unwrap();
        let l = train_epoch(&mut m, &[EpochFold::unmasked(batches)], &mut state, 1).unwrap();
        assert!(l.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn non_finite_loss_aborts() {
        let (ds, g) = toy_world(10, 12, 4);
        let cfg = RecConfig {
            use_graph: false,
            n_neg: 3,
            ..RecConfig::default()
        };
        let mut m: RecModel<f32> = model_for(&ds, &g, cfg.clone());
        m.item_emb.value.fill(f32::NAN);
        let batches = epoch_batches(&ds, 8, 3, &mut Rng::new(0)).unwrap();
        let err = train_epoch(&mut m, &[EpochFold::unmasked(batches)], &mut TrainState::new(&cfg), 2).unwrap_err();
        assert!(matches!(err, RecError::NonFinite { epoch: 2, batch: 0, .. }));
    }

    #[test]
    fn masked_folds_partition_examples_and_hide_their_targets() {
        use crate::graph::{extract_subgraph, FactorTable, HeteroGraph, MetapathKind};
        let (ds, g) = toy_world(30, 40, 5);
        let cfg = RecConfig {
            dim: 8,
            n_neg: 5,
            batch_size: 16,
            gnn: crate::gnn::GnnConfig {
                dim: 8,
                degree_cap: 1000,
                ..Default::default()
            },
            ..RecConfig::default()
        };
        let m: RecModel<f32> = model_for(&ds, &g, cfg.clone());
        let plan = epoch_plan(&m, &ds, 3).unwrap();
        assert_eq!(plan.len(), 2);
        let mut seen = Vec::new();
        let flat = |sg: &crate::graph::MetapathSubgraph| -> Vec<Vec<u32>> {
            sg.neighbors.iter().map(|l| { let mut l = l.clone(); l.sort_unstable(); l }).collect()
        };
        for fold in &plan {
            let mask = fold.mask.as_ref().unwrap();
            let view = m.masked_subgraphs(mask).unwrap();
            for b in &fold.batches {
                for (&u, &t) in b.users.iter().zip(&b.targets) {
                    assert!(mask.hides(u, t));
                    assert!(!view[&MetapathKind::ItemToUser].neighbors[u as usize].contains(&t));
                    assert!(!view[&MetapathKind::UserToItem].neighbors[t as usize].contains(&u));
                    seen.push((u, t));
                }
            }
            let kept: Vec<(u32, u32)> = ds
                .user_ids()
                .flat_map(|u| ds.train_items(u).iter().map(move |&i| (u, i)))
                .filter(|&(u, i)| !mask.hides(u, i))
                .collect();
            let uq = FactorTable::from_rows(1, 1, &vec![vec![0]; ds.n_users()]);
            let iq = FactorTable::from_rows(1, 1, &vec![vec![0]; ds.n_items()]);
            let levels = [0usize].into_iter().collect();
            let oracle = HeteroGraph::from_interactions(ds.n_users(), ds.n_items(), &kept, &uq, &iq, &levels, true).unwrap();
            for kind in [MetapathKind::ItemToUser, MetapathKind::UserToItem] {
                assert_eq!(flat(&view[&kind]), flat(&extract_subgraph(&oracle, kind, 1000, 0)), "{kind:?}");
            }
        }
        let mut expected: Vec<(u32, u32)> = ds
            .train_examples()
            .iter()
            .map(|ex| (ex.user, ds.train_items(ex.user)[ex.end]))
            .collect();
        expected.sort_unstable();
        seen.sort_unstable();
        assert_eq!(seen, expected);
        let off = RecConfig { mask_target_edges: false, ..cfg };
        let plan = epoch_plan(&model_for::<f32>(&ds, &g, off), &ds, 3).unwrap();
        assert!(plan.len() == 1 && plan[0].mask.is_none());
    }
}
