//! Self-contained invariant suite: gradient checks, metric oracles and
//! artifact round trips on small generated instances.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::dataio::{sample_batch, PreprocessConfig, SplitDataset, Vocab};
use crate::eval::{MetricReport, UserMetrics};
use crate::gnn::{extract_all, GatLayer, GnnConfig, GraphModule};
use crate::graph::{build_graph, read_edges, write_edges, FactorTable, HeteroGraph, MetapathKind, SelfLoop};
use crate::numerics::{check_gradients, HasParameters, Matrix, Parameter, Rng};
use crate::quantizer::{read_assignments, write_assignments, FactorAssignment, QuantizerConfig, QuantizerModel};
use crate::recommender::{BackboneKind, Checkpoint, EdgeMask, RecConfig, RecModel};
use crate::semantic::{EmbeddingSet, SemanticVector};

/// Largest relative error a gradient check may show.
pub const GRADIENT_TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub group: String,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    fn new(group: &str, name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self {
            group: group.into(),
            name: name.into(),
            passed,
            detail: detail.into(),
        }
    }

    fn gradient(name: impl Into<String>, worst: f64) -> Self {
        Self::new("gradients", name, worst < GRADIENT_TOLERANCE, format!("worst relative error {worst:.2e}"))
    }

    fn failed(group: &str, name: impl Into<String>, err: impl std::fmt::Display) -> Self {
        Self::new(group, name, false, err.to_string())
    }
}

/// Dataset with 4 to 7 positives per user plus a two-level factor graph.
pub fn toy_world(n_users: usize, n_items: usize, seed: u64) -> (SplitDataset, HeteroGraph) {
    let mut rng = Rng::new(seed);
    let per_user: Vec<Vec<u32>> = (0..n_users)
        .map(|_| {
            let len = 4 + rng.below(4);
            (0..len).map(|_| 1 + rng.below(n_items) as u32).collect()
        })
        .collect();
    let users = Vocab::from_raw((1..=n_users).map(|u| format!("u{u}")).collect());
    let items = Vocab::from_raw((1..=n_items).map(|i| format!("i{i}")).collect());
    let cfg = PreprocessConfig {
        max_len: 6,
        ..PreprocessConfig::default()
    };
    let ds = SplitDataset::from_sequences(cfg, users, items, per_user).expect("valid toy sequences");
    let uq = FactorTable::from_rows(2, 3, &(0..n_users).map(|u| vec![(u % 3) as u32, (u % 2) as u32]).collect::<Vec<_>>());
    let iq = FactorTable::from_rows(2, 3, &(0..n_items).map(|i| vec![(i % 3) as u32, (i / 3 % 3) as u32]).collect::<Vec<_>>());
    let levels = [0usize, 1].into_iter().collect();
    let g = build_graph(&ds, &uq, &iq, &levels, true).expect("valid toy graph");
    (ds, g)
}

fn quantizer_gradients() -> CheckOutcome {
    let mut rng = Rng::new(3);
    let cfg = QuantizerConfig {
        levels: 2,
        codebook_size: 4,
        code_dim: 4,
        hidden: vec![8],
        ..QuantizerConfig::default()
    };
    let run = || -> Result<f64, String> {
        let mut m = QuantizerModel::<f64>::new(6, cfg, &mut rng).map_err(|e| e.to_string())?;
        for cb in &mut m.codebooks {
            cb.value = Matrix::from_fn(4, 4, |_, _| rng.normal() * 0.5);
        }
        let v = Matrix::from_fn(5, 6, |_, _| rng.normal());
        let frozen = m.freeze(&v).map_err(|e| e.to_string())?;
        m.loss_and_backward(&v).map_err(|e| e.to_string())?;
        Ok(check_gradients(&mut m, EPS, |mm| mm.surrogate_loss(&v, &frozen).expect("frozen shapes match")))
    };
    match run() {
        Ok(worst) => CheckOutcome::gradient("quantizer encoder, decoder and straight-through path", worst),
        Err(e) => CheckOutcome::failed("gradients", "quantizer", e),
    }
}

struct GatProbe {
    layer: GatLayer<f64>,
    src: Parameter<f64>,
    tgt: Parameter<f64>,
    mix: Matrix<f64>,
}

impl HasParameters<f64> for GatProbe {
    fn parameters_mut(&mut self) -> Vec<&mut Parameter<f64>> {
        let [w, a] = self.layer.params_mut();
        vec![w, a, &mut self.src, &mut self.tgt]
    }
}

fn gat_probe_loss(p: &GatProbe, lists: &[Vec<u32>], self_loop: SelfLoop) -> f64 {
    let (h, _) = p.layer.forward(lists, &p.src.value, &p.tgt.value, self_loop).expect("probe shapes match");
    h.data().iter().zip(p.mix.data()).map(|(a, b)| a * b).sum::<f64>() + 0.5 * h.frobenius_sq()
}

fn gat_gradients() -> Vec<CheckOutcome> {
    let mut rng = Rng::new(5);
    let mut out = Vec::new();
    for (heads, self_loop) in [(1, SelfLoop::Always), (2, SelfLoop::Never), (2, SelfLoop::IfIsolated)] {
        let lists: Vec<Vec<u32>> = if self_loop == SelfLoop::Never {
            vec![vec![0, 1, 4], vec![2], vec![1], vec![3, 4, 0, 1]]
        } else {
            vec![vec![0, 1, 4], vec![2], vec![], vec![3, 4, 0, 1]]
        };
        let name = format!("attention layer, {heads} head(s), self loop {self_loop:?}");
        let run = |rng: &mut Rng| -> Result<f64, String> {
            let mut p = GatProbe {
                layer: GatLayer::new("g", 3, 4, heads, 0.2, rng).map_err(|e| e.to_string())?,
                src: Parameter::new("src", Matrix::from_fn(5, 3, |_, _| rng.normal())),
                tgt: Parameter::new("tgt", Matrix::from_fn(4, 3, |_, _| rng.normal())),
                mix: Matrix::from_fn(4, 4, |_, _| rng.normal()),
            };
            let (h, cache) = p.layer.forward(&lists, &p.src.value, &p.tgt.value, self_loop).map_err(|e| e.to_string())?;
            let mut d = p.mix.clone();
            d.add_scaled(1.0, &h).map_err(|e| e.to_string())?;
            let (ds, dt) = p.layer.backward(&lists, self_loop, &cache, &d).map_err(|e| e.to_string())?;
            p.src.grad = ds;
            p.tgt.grad = dt;
            Ok(check_gradients(&mut p, EPS, |m| gat_probe_loss(m, &lists, self_loop)))
        };
        out.push(match run(&mut rng) {
            Ok(worst) => CheckOutcome::gradient(name, worst),
            Err(e) => CheckOutcome::failed("gradients", name, e),
        });
    }
    out
}

fn module_gradients() -> Vec<CheckOutcome> {
    let (_, g) = toy_world(5, 9, 3);
    let all: BTreeSet<MetapathKind> = MetapathKind::ALL.into_iter().collect();
    let semantic: BTreeSet<MetapathKind> = all.iter().copied().filter(|k| k.is_semantic()).collect();
    let mut out = Vec::new();
    for (label, active) in [("all metapaths", all), ("semantic metapaths", semantic)] {
        let name = format!("two-stage propagation, {label}");
        let run = || -> Result<f64, String> {
            let cfg = GnnConfig {
                dim: 4,
                heads: 2,
                degree_cap: 3,
                ..GnnConfig::default()
            };
            let mut rng = Rng::new(11);
            let mut m = GraphModule::<f64>::new(&g, cfg, &mut rng).map_err(|e| e.to_string())?;
            let sgs = extract_all(&g, &m.config, &active, 3);
            let wu = Matrix::from_fn(g.n_users + 1, 4, |_, _| rng.normal());
            let wi = Matrix::from_fn(g.n_items + 1, 4, |_, _| rng.normal());
            let loss = |m: &GraphModule<f64>| {
                let (o, _) = m.forward(&sgs, &active).expect("subgraphs cover the active set");
                let dot = |a: &Matrix<f64>, b: &Matrix<f64>| a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>();
                dot(&o.hat_user, &wu) + dot(&o.hat_item, &wi) + 0.25 * o.hat_user.frobenius_sq()
            };
            let (o, cache) = m.forward(&sgs, &active).map_err(|e| e.to_string())?;
            let mut du = wu.clone();
            du.add_scaled(0.5, &o.hat_user).map_err(|e| e.to_string())?;
            m.backward(&sgs, &cache, &du, &wi).map_err(|e| e.to_string())?;
            Ok(check_gradients(&mut m, EPS, loss))
        };
        out.push(match run() {
            Ok(worst) => CheckOutcome::gradient(name, worst),
            Err(e) => CheckOutcome::failed("gradients", name, e),
        });
    }
    out
}

fn small_rec_config(backbone: BackboneKind, use_graph: bool) -> RecConfig {
    RecConfig {
        backbone,
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

fn backbones() -> Vec<BackboneKind> {
    let mut kinds = vec![BackboneKind::PooledMlp, BackboneKind::Recurrent];
    if cfg!(feature = "self-attention") {
        kinds.push(BackboneKind::SelfAttention);
    }
    kinds
}

fn recommender_gradients() -> Vec<CheckOutcome> {
    let (ds, g) = toy_world(5, 9, 3);
    let mut out = Vec::new();
    for kind in backbones() {
        for use_graph in [false, true] {
            let name = format!("{kind:?} backbone{}", if use_graph { " with graph fusion" } else { "" });
            let run = || -> Result<f64, String> {
                let batch = sample_batch(&ds, 6, 4, &mut Rng::new(4)).map_err(|e| e.to_string())?;
                let cfg = small_rec_config(kind, use_graph);
                let mut model = RecModel::<f64>::new(cfg, ds.n_users(), ds.n_items(), ds.config.max_len, Some(&g))
                    .map_err(|e| e.to_string())?;
                model.zero_grad();
                model.accumulate_gradients(&batch).map_err(|e| e.to_string())?;
                Ok(check_gradients(&mut model, EPS, |m| m.loss(&batch).expect("batch fits the model")))
            };
            out.push(match run() {
                Ok(worst) => CheckOutcome::gradient(name, worst),
                Err(e) => CheckOutcome::failed("gradients", name, e),
            });
        }
    }
    let name = "PooledMlp with graph fusion over masked edges";
    let run = || -> Result<f64, String> {
        let batch = sample_batch(&ds, 6, 4, &mut Rng::new(4)).map_err(|e| e.to_string())?;
        let cfg = small_rec_config(BackboneKind::PooledMlp, true);
        let mut model = RecModel::<f64>::new(cfg, ds.n_users(), ds.n_items(), ds.config.max_len, Some(&g))
            .map_err(|e| e.to_string())?;
        let hidden = ds.user_ids().map(|u| ds.train_items(u)[..1].to_vec());
        let mask = EdgeMask::new(std::iter::once(Vec::new()).chain(hidden).collect());
        let view = model.masked_subgraphs(&mask);
        model.zero_grad();
        model.accumulate_gradients_over(&batch, view.as_ref()).map_err(|e| e.to_string())?;
        Ok(check_gradients(&mut model, EPS, |m| m.loss_over(&batch, view.as_ref()).expect("batch fits the model")))
    };
    out.push(match run() {
        Ok(worst) => CheckOutcome::gradient(name, worst),
        Err(e) => CheckOutcome::failed("gradients", name, e),
    });
    out
}

/// Central-difference checks of every hand-written backward pass in 64-bit mode.
pub fn gradient_suite() -> Vec<CheckOutcome> {
    let mut out = vec![quantizer_gradients()];
    out.extend(gat_gradients());
    out.extend(module_gradients());
    out.extend(recommender_gradients());
    out
}

/// Metrics of one ranked list computed by sorting and scanning.
fn brute_force(user: u32, scores: &[f64], items: &[u32], target: usize, k: usize) -> UserMetrics {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(items[a].cmp(&items[b])));
    let rank = order.iter().position(|&j| j == target).expect("target is listed") + 1;
    let dcg: f64 = order
        .iter()
        .take(k)
        .enumerate()
        .filter(|&(_, &j)| j == target)
        .map(|(p, _)| 1.0 / ((p + 2) as f64).log2())
        .sum();
    let mut pairs = 0.0;
    for (j, &s) in scores.iter().enumerate() {
        if j != target {
            pairs += if s < scores[target] { 1.0 } else if s == scores[target] { 0.5 } else { 0.0 };
        }
    }
    let ties = scores.iter().enumerate().filter(|&(j, &s)| j != target && s == scores[target]).count();
    UserMetrics {
        user,
        rank,
        ties,
        candidates: items.len(),
        ndcg: dcg,
        hr: if order.iter().take(k).any(|&j| j == target) { 1.0 } else { 0.0 },
        rr: 1.0 / rank as f64,
        auc: (items.len() > 1).then(|| pairs / (items.len() - 1) as f64),
    }
}

/// NDCG, HR, MRR and GAUC against sorting oracles on random instances of at
/// most 20 candidates, with coarse scores so ties occur, plus analytic values.
pub fn metric_oracles(instances: usize, seed: u64) -> Vec<CheckOutcome> {
    const K: usize = 10;
    let mut rng = Rng::new(seed);
    let mut mismatches = Vec::new();
    let mut fast = Vec::with_capacity(instances);
    let mut slow = Vec::with_capacity(instances);
    for n in 0..instances {
        let len = 2 + rng.below(19);
        let mut items: Vec<u32> = (1..=60).collect();
        rng.shuffle(&mut items);
        items.truncate(len);
        let scores: Vec<f64> = (0..len).map(|_| rng.below(6) as f64 * 0.5).collect();
        let target = rng.below(len);
        let a = UserMetrics::from_scores(n as u32 + 1, &scores, &items, target, K);
        let b = brute_force(n as u32 + 1, &scores, &items, target, K);
        if a != b {
            mismatches.push(n);
        }
        fast.push(a);
        slow.push(b);
    }
    let mut out = vec![CheckOutcome::new(
        "metrics",
        format!("per-user metrics on {instances} random instances"),
        mismatches.is_empty(),
        format!("{} mismatches", mismatches.len()),
    )];
    let aggregate = match MetricReport::from_users(K, fast) {
        Ok(r) => {
            let n = slow.len() as f64;
            let mean = |f: fn(&UserMetrics) -> f64| slow.iter().map(f).sum::<f64>() / n;
            let num: f64 = slow.iter().filter_map(|u| u.auc.map(|a| a * u.candidates as f64)).sum();
            let den: f64 = slow.iter().filter(|u| u.auc.is_some()).map(|u| u.candidates as f64).sum();
            let expect = [mean(|u| u.ndcg), mean(|u| u.hr), mean(|u| u.rr), num / den];
            let got = [r.ndcg, r.hr, r.mrr, r.gauc];
            CheckOutcome::new("metrics", "aggregate report", got == expect, format!("{got:?} vs {expect:?}"))
        }
        Err(e) => CheckOutcome::failed("metrics", "aggregate report", e),
    };
    out.push(aggregate);
    let items: Vec<u32> = (1..=5).collect();
    let ranked = |rank: usize| {
        let scores: Vec<f64> = (0..5).map(|j| (5 - j) as f64).collect();
        UserMetrics::from_scores(1, &scores, &items, rank - 1, K)
    };
    let (r3, r4) = (ranked(3), ranked(4));
    out.push(CheckOutcome::new(
        "metrics",
        "analytic spot values",
        r3.ndcg == 0.5 && r4.rr == 0.25,
        format!("rank 3 NDCG {} and rank 4 MRR {}", r3.ndcg, r4.rr),
    ));
    out
}

/// `write -> read -> write` must reproduce the first bytes exactly.
fn round_trip<T, E: std::fmt::Display>(
    name: &str,
    value: &T,
    write: impl Fn(&T, &mut Vec<u8>) -> Result<(), E>,
    read: impl Fn(&[u8]) -> Result<T, E>,
) -> CheckOutcome {
    let run = || -> Result<(bool, usize), E> {
        let mut first = Vec::new();
        write(value, &mut first)?;
        let back = read(&first)?;
        let mut second = Vec::new();
        write(&back, &mut second)?;
        Ok((first == second, first.len()))
    };
    match run() {
        Ok((same, n)) => CheckOutcome::new("formats", name, same, format!("{n} bytes")),
        Err(e) => CheckOutcome::failed("formats", name, e),
    }
}

/// Byte-identical second writes for every persisted artifact format.
pub fn format_round_trips(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = Rng::new(seed);
    let mut set = EmbeddingSet::new(8);
    for id in 1..=20u64 {
        let values = (0..8).map(|_| rng.normal() as f32).collect();
        set.insert(SemanticVector { id, values }).expect("distinct ids");
    }
    let qcfg = QuantizerConfig {
        levels: 2,
        codebook_size: 4,
        code_dim: 4,
        hidden: vec![8],
        ..QuantizerConfig::default()
    };
    let quantizer = QuantizerModel::<f32>::new(8, qcfg, &mut rng).expect("valid quantizer config");
    let assignments: Vec<FactorAssignment> = (1..=20u64)
        .map(|entity| FactorAssignment {
            entity,
            indices: vec![rng.below(4) as u32, rng.below(4) as u32],
        })
        .collect();
    let (ds, g) = toy_world(12, 20, seed);
    let rec_cfg = RecConfig {
        dim: 8,
        gnn: GnnConfig {
            dim: 8,
            ..GnnConfig::default()
        },
        ..RecConfig::default()
    };
    let checkpoint = RecModel::<f32>::new(rec_cfg, ds.n_users(), ds.n_items(), ds.config.max_len, Some(&g))
        .map(|mut m| {
            m.refresh().expect("toy graph propagates");
            Checkpoint::from_model(&m)
        });
    let mut out = vec![
        round_trip("embedding file (binary)", &set, |s, w| s.write_binary(w), |b| EmbeddingSet::read_binary(b, None).map_err(|e| std::io::Error::other(e.to_string()))),
        round_trip("embedding file (jsonl)", &set, |s, w| s.write_jsonl(w), |b| EmbeddingSet::read_jsonl(b, None).map_err(|e| std::io::Error::other(e.to_string()))),
        round_trip("quantizer model file", &quantizer, |q, w| q.write_to(w), |b| QuantizerModel::read_from(b)),
        round_trip("factor assignment file", &assignments, |a, w| write_assignments(w, a), |b| read_assignments(b)),
        round_trip("graph edge export", &g, |g, w| write_edges(g, w), |b| read_edges(b)),
    ];
    out.push(match checkpoint {
        Ok(c) => round_trip("checkpoint file", &c, |c, w| c.write_to(w), |b| Checkpoint::read_from(b)),
        Err(e) => CheckOutcome::failed("formats", "checkpoint file", e),
    });
    out
}

/// Every check, in a fixed order.
pub fn run_all(seed: u64) -> Vec<CheckOutcome> {
    let mut out = gradient_suite();
    out.extend(metric_oracles(100, seed));
    out.extend(format_round_trips(seed));
    out
}

/// Groups outcomes by their `group` field, keeping order inside each group.
pub fn by_group(outcomes: &[CheckOutcome]) -> BTreeMap<&str, Vec<&CheckOutcome>> {
    let mut map: BTreeMap<&str, Vec<&CheckOutcome>> = BTreeMap::new();
    for o in outcomes {
        map.entry(o.group.as_str()).or_default().push(o);
    }
    map
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for o in run_all(7) {
            assert!(o.passed, "{}: {} ({})", o.group, o.name, o.detail);
        }
    }

    #[test]
    fn oracle_catches_a_wrong_rank() {
        let scores = [3.0, 2.0, 1.0];
        let items = [1, 2, 3];
        let mut m = brute_force(1, &scores, &items, 1, 10);
        assert_eq!((m.rank, m.rr), (2, 0.5));
        m.rank = 1;
        assert_ne!(m, UserMetrics::from_scores(1, &scores, &items, 1, 10));
    }

    #[test]
    fn corrupted_write_is_reported() {
        let o = round_trip("flip", &1u8, |v, w: &mut Vec<u8>| -> Result<(), String> {
            w.push(*v);
            Ok(())
        }, |b| Ok(b[0] + 1));
        assert!(!o.passed);
        assert_eq!(by_group(&[o.clone()])["formats"][0], &o);
    }
}
