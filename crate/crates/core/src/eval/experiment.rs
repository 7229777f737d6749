//! Train-then-test runs, metapath ablations and level selection.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{evaluate, MetricReport, MetricSummary, ModelScorer, Result};
use crate::dataio::{build_candidates, CandidateMode, EvalSplit, SplitDataset};
use crate::graph::{ablate, build_graph, FactorTable, HeteroGraph, MetapathKind};
use crate::numerics::Rng;
use crate::recommender::{fit, FitReport, RecConfig, RecModel};

/// Stream tag for sampled test negatives.
pub const TEST_STREAM: u64 = 0x7465_73;

pub struct ExperimentOutput {
    pub model: RecModel<f32>,
    pub fit: FitReport,
    pub test: MetricReport,
}

/// Builds, trains and tests one model. `graph` may be `None` for vanilla configs.
pub fn run_experiment(
    ds: &SplitDataset,
    graph: Option<&HeteroGraph>,
    config: &RecConfig,
    test_mode: CandidateMode,
) -> Result<ExperimentOutput> {
    let mut model = RecModel::new(config.clone(), ds.n_users(), ds.n_items(), ds.config.max_len, graph)?;
    let fit = fit(&mut model, ds)?;
    let sets = build_candidates(ds, EvalSplit::Test, test_mode, &Rng::derived(config.seed, &[TEST_STREAM]))?;
    let test = evaluate(&ModelScorer::new(&model)?, &sets, config.eval_k)?;
    Ok(ExperimentOutput { model, fit, test })
}

/// One ablation row: the metapaths to drop, or `None` for the vanilla backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSpec {
    pub label: String,
    pub removed: Option<BTreeSet<MetapathKind>>,
}

/// Full model, each semantic path removed, both interaction paths removed, and vanilla.
pub fn default_ablation_rows() -> Vec<AblationSpec> {
    let row = |label: &str, removed: Option<&[MetapathKind]>| AblationSpec {
        label: label.into(),
        removed: removed.map(|r| r.iter().copied().collect()),
    };
    vec![
        row("full", Some(&[])),
        row("-u->q->u", Some(&[MetapathKind::UserSemantic])),
        row("-i->q->i", Some(&[MetapathKind::ItemSemantic])),
        row("-u->i -i->u", Some(&[MetapathKind::ItemToUser, MetapathKind::UserToItem])),
        row("N/A", None),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub active: Vec<MetapathKind>,
    pub metrics: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub k: usize,
    pub rows: Vec<AblationRow>,
}

fn metric_header(k: usize) -> [String; 4] {
    [format!("NDCG@{k}"), format!("HR@{k}"), "MRR".into(), "GAUC".into()]
}

fn metric_cells(m: &MetricSummary) -> [String; 4] {
    [m.ndcg, m.hr, m.mrr, m.gauc].map(|v| format!("{v:.6}"))
}

fn aligned(first: &str, k: usize, rows: &[(String, MetricSummary)]) -> String {
    let w = rows.iter().map(|(l, _)| l.len()).chain([first.len()]).max().unwrap_or(0);
    let mut out = format!("{first:<w$}");
    for h in metric_header(k) {
        out.push_str(&format!(" {h:>10}"));
    }
    out.push('\n');
    for (label, m) in rows {
        out.push_str(&format!("{label:<w$}"));
        for c in metric_cells(m) {
            out.push_str(&format!(" {c:>10}"));
        }
        out.push('\n');
    }
    out
}

fn csv(first: &str, k: usize, rows: &[(String, MetricSummary)]) -> String {
    let mut out = std::iter::once(first.to_string()).chain(metric_header(k)).collect::<Vec<_>>().join(",");
    out.push('\n');
    for (label, m) in rows {
        let line: Vec<String> = std::iter::once(label.clone()).chain(metric_cells(m)).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}

impl AblationTable {
    fn labelled(&self) -> Vec<(String, MetricSummary)> {
        self.rows.iter().map(|r| (r.label.clone(), r.metrics)).collect()
    }

    pub fn to_csv(&self) -> String {
        csv("metapaths", self.k, &self.labelled())
    }

    pub fn to_text(&self) -> String {
        aligned("metapaths", self.k, &self.labelled())
    }

    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }
}

/// Config for one ablation row; the vanilla row turns graph features off.
pub fn ablation_config(base: &RecConfig, spec: &AblationSpec) -> RecConfig {
    let mut cfg = base.clone();
    match &spec.removed {
        None => cfg.use_graph = false,
        Some(r) => {
            cfg.use_graph = true;
            cfg.metapaths = ablate(r);
        }
    }
    cfg
}

/// Trains and tests one model per row with the same seed.
pub fn run_ablation(
    ds: &SplitDataset,
    graph: &HeteroGraph,
    base: &RecConfig,
    specs: &[AblationSpec],
    test_mode: CandidateMode,
) -> Result<AblationTable> {
    let mut rows = Vec::with_capacity(specs.len());
    for spec in specs {
        let cfg = ablation_config(base, spec);
        let out = run_experiment(ds, Some(graph), &cfg, test_mode)?;
        log::info!("ablation {}: ndcg {:.4}", spec.label, out.test.ndcg);
        rows.push(AblationRow {
            label: spec.label.clone(),
            active: if cfg.graph_enabled() { cfg.metapaths.iter().copied().collect() } else { Vec::new() },
            metrics: out.test.summary(),
        });
    }
    Ok(AblationTable { k: base.eval_k, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelRow {
    pub levels: Vec<usize>,
    pub factor_edges: usize,
    pub metrics: MetricSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelTable {
    pub k: usize,
    pub rows: Vec<LevelRow>,
}

impl LevelTable {
    fn labelled(&self) -> Vec<(String, MetricSummary)> {
        self.rows
            .iter()
            .map(|r| {
                let l: Vec<String> = r.levels.iter().map(|t| t.to_string()).collect();
                (format!("{{{}}}", l.join(" ")), r.metrics)
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        csv("levels", self.k, &self.labelled())
    }

    pub fn to_text(&self) -> String {
        aligned("levels", self.k, &self.labelled())
    }
}

/// Rebuilds the graph with each set of quantization levels and trains the full model on it.
pub fn run_level_selection(
    ds: &SplitDataset,
    user_q: &FactorTable,
    item_q: &FactorTable,
    base: &RecConfig,
    level_sets: &[BTreeSet<usize>],
    test_mode: CandidateMode,
) -> Result<LevelTable> {
    let mut rows = Vec::with_capacity(level_sets.len());
    for levels in level_sets {
        let g = build_graph(ds, user_q, item_q, levels, true)?;
        let cfg = RecConfig {
            use_graph: true,
            ..base.clone()
        };
        let out = run_experiment(ds, Some(&g), &cfg, test_mode)?;
        rows.push(LevelRow {
            levels: levels.iter().copied().collect(),
            factor_edges: g.user_factors.edge_count() + g.item_factors.edge_count(),
            metrics: out.test.summary(),
        });
    }
    Ok(LevelTable { k: base.eval_k, rows })
}
