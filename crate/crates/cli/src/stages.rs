//! One function per subcommand; every stage reads and writes the run directory.

use std::fs;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use factorgraph::checks;
use factorgraph::dataio::{
    build_candidates, load_features, load_interactions, preprocess, EntityKind, EvalSplit, FeatureTable, SplitDataset,
};
use factorgraph::eval::{
    default_ablation_rows, evaluate, run_ablation, run_experiment, run_level_selection, MetricReport, MetricSummary,
    ModelScorer, TEST_STREAM,
};
use factorgraph::graph::{build_graph, export_edges, import_edges, FactorTable, GraphSummary, HeteroGraph};
use factorgraph::numerics::Rng;
use factorgraph::pipeline::quantize_side;
use factorgraph::quantizer::{read_assignments, write_assignments, FactorAssignment, QuantizerMetrics, QuantizerModel};
use factorgraph::recommender::{fit, Checkpoint, FitReport, RecConfig, RecModel};
use factorgraph::semantic::{
    provide_file, provide_http, provide_synthetic, provide_with, render_prompt, DriverOptions, EmbedRequest,
    EmbeddingSet, MockEndpoint, PromptTemplate, ProviderOutput, ProviderStats, SemanticVector,
};
use factorgraph::synthetic::generate;

use crate::config::{DataSource, PipelineConfig, ProviderKind};
use crate::error::CliError;

pub const DATASET: &str = "dataset.json";
pub const USER_VECTORS: &str = "user.semv";
pub const ITEM_VECTORS: &str = "item.semv";
pub const USER_QUANTIZER: &str = "user.rqvq";
pub const ITEM_QUANTIZER: &str = "item.rqvq";
pub const USER_FACTORS: &str = "user.factors";
pub const ITEM_FACTORS: &str = "item.factors";
pub const GRAPH: &str = "graph.edges";
pub const CHECKPOINT: &str = "model.ckpt";
pub const REPORT: &str = "report.json";
pub const RESOLVED_CONFIG: &str = "config.resolved.toml";

const USER_STREAM: u64 = 1;
const ITEM_STREAM: u64 = 2;

/// A resolved config bound to its content-addressed output directory.
pub struct Run {
    pub config: PipelineConfig,
    pub dir: PathBuf,
}

impl Run {
    /// Creates the run directory and writes the resolved config into it.
    pub fn open(config: PipelineConfig) -> Result<Self, CliError> {
        let dir = config.run_dir();
        fs::create_dir_all(&dir).map_err(|source| CliError::Io { path: dir.clone(), source })?;
        let run = Self { config, dir };
        run.write(RESOLVED_CONFIG, run.config.to_toml().as_bytes())?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Path of an artifact produced by `stage`, which must already exist.
    fn input(&self, name: &str, stage: &'static str) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        if path.is_file() {
            Ok(path)
        } else {
            Err(CliError::MissingArtifact { path, stage })
        }
    }

    fn write(&self, name: &str, bytes: &[u8]) -> Result<PathBuf, CliError> {
        let path = self.path(name);
        fs::write(&path, bytes).map_err(|source| CliError::Io { path: path.clone(), source })?;
        Ok(path)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf, CliError> {
        let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(name, e))?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    fn read_json<T: for<'de> Deserialize<'de>>(&self, name: &str, stage: &'static str) -> Result<T, CliError> {
        let path = self.input(name, stage)?;
        let text = fs::read_to_string(&path).map_err(|source| CliError::Io { path: path.clone(), source })?;
        serde_json::from_str(&text).map_err(|e| CliError::runtime(path.display().to_string(), e))
    }

    fn dataset(&self) -> Result<SplitDataset, CliError> {
        let mut ds: SplitDataset = self.read_json(DATASET, "ingest")?;
        ds.reindex();
        Ok(ds)
    }

    fn graph(&self) -> Result<HeteroGraph, CliError> {
        let path = self.input(GRAPH, "graph")?;
        import_edges(&path).map_err(|e| CliError::runtime("graph", e))
    }

    fn factor_table(&self, model: &str, factors: &str) -> Result<FactorTable, CliError> {
        let q = QuantizerModel::load(&self.input(model, "quantize")?).map_err(|e| CliError::runtime(model, e))?;
        let path = self.input(factors, "quantize")?;
        let file = fs::File::open(&path).map_err(|source| CliError::Io { path: path.clone(), source })?;
        let rows = read_assignments(file).map_err(|e| CliError::runtime(factors, e))?;
        if rows.iter().enumerate().any(|(i, a)| a.entity != i as u64 + 1) {
            return Err(CliError::runtime(factors, "entity ids must run 1..=n in order"));
        }
        let indices: Vec<Vec<u32>> = rows.into_iter().map(|a| a.indices).collect();
        Ok(FactorTable::from_rows(q.levels(), q.codebook_size(), &indices))
    }

    /// Graph for `rec`, or `None` when graph features are off.
    fn graph_for(&self, rec: &RecConfig) -> Result<Option<HeteroGraph>, CliError> {
        if rec.graph_enabled() {
            self.graph().map(Some)
        } else {
            Ok(None)
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct IngestSummary {
    pub fingerprint: String,
    pub users: usize,
    pub items: usize,
    pub train_examples: usize,
    pub skipped_lines: usize,
}

pub fn ingest(run: &Run) -> Result<IngestSummary, CliError> {
    let c = &run.config.data;
    let (ds, skipped) = match c.source {
        DataSource::Synthetic => {
            let world = generate(&c.synthetic).map_err(|e| CliError::Validation(e.to_string()))?;
            (world.dataset, 0)
        }
        DataSource::File => {
            let path = c.interactions.as_ref().expect("validated");
            let log = load_interactions(path, &c.schema).map_err(|e| CliError::runtime("ingest", e))?;
            let skipped = log.skipped;
            (preprocess(&log, c.preprocess).map_err(|e| CliError::runtime("ingest", e))?, skipped)
        }
    };
    run.write_json(DATASET, &ds)?;
    let summary = IngestSummary {
        fingerprint: format!("{:016x}", ds.fingerprint()),
        users: ds.n_users(),
        items: ds.n_items(),
        train_examples: ds.train_examples().len(),
        skipped_lines: skipped,
    };
    run.write_json("ingest.json", &summary)?;
    Ok(summary)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedSummary {
    pub user: ProviderStats,
    pub item: ProviderStats,
    pub dim: usize,
}

fn features(path: &Option<PathBuf>, run: &Run, kind: EntityKind) -> Result<FeatureTable, CliError> {
    match path {
        Some(p) => load_features(p, &run.config.data.feature_delimiter, kind).map_err(|e| CliError::runtime("features", e)),
        None => Ok(FeatureTable::empty(kind)),
    }
}

/// One prompt per entity, ids in dense order.
fn requests(run: &Run, ds: &SplitDataset, kind: EntityKind) -> Result<Vec<EmbedRequest>, CliError> {
    let p = &run.config.provider;
    let (template, table, n) = match kind {
        EntityKind::User => (&p.user_template, features(&run.config.data.user_features, run, kind)?, ds.n_users()),
        EntityKind::Item => (&p.item_template, features(&run.config.data.item_features, run, kind)?, ds.n_items()),
    };
    let tpl = match template {
        Some(t) => PromptTemplate::new(kind, t.clone()),
        None => PromptTemplate::default_for(kind),
    };
    let vocab = match kind {
        EntityKind::User => &ds.users,
        EntityKind::Item => &ds.items,
    };
    (1..=n as u32)
        .map(|id| {
            let raw = vocab.raw(id).unwrap_or_default();
            let history: Vec<String> = match kind {
                EntityKind::User => {
                    let items = ds.train_items(id);
                    let from = items.len().saturating_sub(p.history_items);
                    items[from..].iter().filter_map(|&i| ds.items.raw(i).map(str::to_owned)).collect()
                }
                EntityKind::Item => Vec::new(),
            };
            let prompt = render_prompt(&tpl, &table.row(raw), &history).map_err(|e| CliError::Validation(e.to_string()))?;
            Ok(EmbedRequest { id: id as u64, prompt })
        })
        .collect()
}

/// Vectors keyed by raw numeric id re-keyed to dense ids.
fn rekey(set: &EmbeddingSet, ds: &SplitDataset, kind: EntityKind) -> Result<EmbeddingSet, CliError> {
    let (vocab, n) = match kind {
        EntityKind::User => (&ds.users, ds.n_users()),
        EntityKind::Item => (&ds.items, ds.n_items()),
    };
    let mut out = EmbeddingSet::new(set.dim);
    for id in 1..=n as u32 {
        let raw = vocab.raw(id).unwrap_or_default();
        let key: u64 = raw
            .parse()
            .map_err(|_| CliError::runtime("embed", format!("raw id {raw:?} is not numeric")))?;
        let values = set
            .get(key)
            .ok_or_else(|| CliError::runtime("embed", format!("no vector for {kind:?} {raw}")))?
            .to_vec();
        out.insert(SemanticVector { id: id as u64, values }).map_err(|e| CliError::runtime("embed", e))?;
    }
    Ok(out)
}

fn complete(out: ProviderOutput, kind: EntityKind) -> Result<(EmbeddingSet, ProviderStats), CliError> {
    if let Some((id, err)) = out.failures.first() {
        return Err(CliError::runtime(
            "embed",
            format!("{} {kind:?} entities failed, first {id}: {err}", out.failures.len()),
        ));
    }
    Ok((out.vectors, out.stats))
}

fn embed_side(run: &Run, ds: &SplitDataset, kind: EntityKind) -> Result<(EmbeddingSet, ProviderStats), CliError> {
    let c = &run.config;
    let p = &c.provider;
    let (n, stream) = match kind {
        EntityKind::User => (ds.n_users(), USER_STREAM),
        EntityKind::Item => (ds.n_items(), ITEM_STREAM),
    };
    match p.kind {
        ProviderKind::Planted => {
            let world = generate(&c.data.synthetic).map_err(|e| CliError::Validation(e.to_string()))?;
            let set = match kind {
                EntityKind::User => world.user_vectors,
                EntityKind::Item => world.item_vectors,
            };
            let stats = ProviderStats {
                calls: set.len(),
                entities: set.len(),
                failures: 0,
                attempts: set.len(),
            };
            Ok((set, stats))
        }
        ProviderKind::Synthetic => {
            let mut rng = Rng::derived(c.seed, &[stream]);
            let (set, _, stats) =
                provide_synthetic(n, p.dim, p.clusters, p.noise, &mut rng).map_err(|e| CliError::Validation(e.to_string()))?;
            Ok((set, stats))
        }
        ProviderKind::File => {
            let path = match kind {
                EntityKind::User => p.user_path.as_ref(),
                EntityKind::Item => p.item_path.as_ref(),
            }
            .expect("validated");
            let (raw, stats) = provide_file(path, p.dim).map_err(|e| CliError::runtime("embed", e))?;
            Ok((rekey(&raw, ds, kind)?, stats))
        }
        ProviderKind::Http => complete(provide_http(&p.http, &requests(run, ds, kind)?).map_err(|e| CliError::runtime("embed", e))?, kind),
        ProviderKind::Mock => {
            let endpoint = MockEndpoint::new(p.dim, c.seed);
            let out = provide_with(&endpoint, &requests(run, ds, kind)?, &DriverOptions::default())
                .map_err(|e| CliError::runtime("embed", e))?;
            complete(out, kind)
        }
    }
}

pub fn embed(run: &Run) -> Result<EmbedSummary, CliError> {
    let ds = run.dataset()?;
    let (users, user) = embed_side(run, &ds, EntityKind::User)?;
    let (items, item) = embed_side(run, &ds, EntityKind::Item)?;
    for (set, name) in [(&users, USER_VECTORS), (&items, ITEM_VECTORS)] {
        set.save(&run.path(name)).map_err(|e| CliError::runtime(name, e))?;
    }
    let summary = EmbedSummary { user, item, dim: users.dim };
    run.write_json("embed.json", &summary)?;
    Ok(summary)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct QuantizeSummary {
    pub user: QuantizerMetrics,
    pub item: QuantizerMetrics,
}

pub fn quantize(run: &Run) -> Result<QuantizeSummary, CliError> {
    let ds = run.dataset()?;
    let c = &run.config.quantizer;
    let mut finals = Vec::new();
    for (vectors, n, cfg, stream, model, factors) in [
        (USER_VECTORS, ds.n_users(), &c.user, USER_STREAM, USER_QUANTIZER, USER_FACTORS),
        (ITEM_VECTORS, ds.n_items(), &c.item, ITEM_STREAM, ITEM_QUANTIZER, ITEM_FACTORS),
    ] {
        let set = EmbeddingSet::load(&run.input(vectors, "embed")?, None).map_err(|e| CliError::runtime(vectors, e))?;
        let (trained, _) = quantize_side(&set, n, cfg, stream).map_err(|e| CliError::runtime("quantize", e))?;
        trained.model.save(&run.path(model)).map_err(|e| CliError::runtime(model, e))?;
        let rows: Vec<FactorAssignment> = trained
            .assignments
            .iter()
            .enumerate()
            .map(|(i, a)| FactorAssignment {
                entity: i as u64 + 1,
                indices: a.clone(),
            })
            .collect();
        let mut text = Vec::new();
        write_assignments(&mut text, &rows).map_err(|e| CliError::runtime(factors, e))?;
        run.write(factors, &text)?;
        finals.push(trained.history.last().cloned().ok_or_else(|| CliError::runtime("quantize", "no epochs ran"))?);
    }
    let item = finals.pop().expect("two sides");
    let user = finals.pop().expect("two sides");
    let summary = QuantizeSummary { user, item };
    run.write_json("quantize.json", &summary)?;
    Ok(summary)
}

pub fn graph(run: &Run) -> Result<GraphSummary, CliError> {
    let ds = run.dataset()?;
    let uq = run.factor_table(USER_QUANTIZER, USER_FACTORS)?;
    let iq = run.factor_table(ITEM_QUANTIZER, ITEM_FACTORS)?;
    let g = build_graph(&ds, &uq, &iq, &run.config.graph.levels_used, run.config.graph.dedupe)
        .map_err(|e| CliError::runtime("graph", e))?;
    export_edges(&g, &run.path(GRAPH)).map_err(|e| CliError::runtime("graph", e))?;
    let summary = g.summary();
    run.write_json("graph.json", &summary)?;
    Ok(summary)
}

pub fn train(run: &Run) -> Result<FitReport, CliError> {
    let ds = run.dataset()?;
    let rec = &run.config.recommender;
    let g = run.graph_for(rec)?;
    let mut model =
        RecModel::<f32>::new(rec.clone(), ds.n_users(), ds.n_items(), ds.config.max_len, g.as_ref()).map_err(|e| CliError::runtime("train", e))?;
    let report = fit(&mut model, &ds).map_err(|e| CliError::runtime("train", e))?;
    Checkpoint::from_model(&model).save(&run.path(CHECKPOINT)).map_err(|e| CliError::runtime("train", e))?;
    run.write_json("train.json", &report)?;
    Ok(report)
}

pub fn eval(run: &Run) -> Result<MetricReport, CliError> {
    let ckpt = Checkpoint::load(&run.input(CHECKPOINT, "train")?).map_err(|e| CliError::runtime("eval", e))?;
    let ds = run.dataset()?;
    let h = &ckpt.header;
    let g = run.graph_for(&h.config)?;
    let mut model = RecModel::<f32>::new(h.config.clone(), h.n_users, h.n_items, h.max_len, g.as_ref()).map_err(|e| CliError::runtime("eval", e))?;
    ckpt.restore_into(&mut model).map_err(|e| CliError::runtime("eval", e))?;
    let sets = build_candidates(&ds, EvalSplit::Test, run.config.eval.test_candidates, &Rng::derived(h.config.seed, &[TEST_STREAM]))
        .map_err(|e| CliError::runtime("eval", e))?;
    let scorer = ModelScorer::new(&model).map_err(|e| CliError::runtime("eval", e))?;
    let report = evaluate(&scorer, &sets, h.config.eval_k).map_err(|e| CliError::runtime("eval", e))?;
    run.write_json(REPORT, &report)?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum AblateMode {
    /// Drop metapaths one group at a time.
    Metapath,
    /// Rebuild the graph from different quantization levels.
    Levels,
    /// Learning-rate and batch-size grid selected on validation NDCG.
    Grid,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRow {
    pub lr: f64,
    pub batch_size: usize,
    pub best_valid_ndcg: f64,
    pub best_epoch: usize,
    pub test: MetricSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridTable {
    pub rows: Vec<GridRow>,
    /// Index of the row with the highest validation NDCG.
    pub selected: usize,
}

impl GridTable {
    pub fn to_text(&self) -> String {
        let mut out = format!("{:>8} {:>6} {:>10} {:>10}\n", "lr", "batch", "valid", "test NDCG");
        for (i, r) in self.rows.iter().enumerate() {
            let mark = if i == self.selected { " *" } else { "" };
            out.push_str(&format!(
                "{:>8} {:>6} {:>10.6} {:>10.6}{mark}\n",
                r.lr, r.batch_size, r.best_valid_ndcg, r.test.ndcg
            ));
        }
        out
    }
}

/// Runs one ablation family and returns its text table.
pub fn ablate(run: &Run, mode: AblateMode) -> Result<String, CliError> {
    let ds = run.dataset()?;
    let c = &run.config;
    let test_mode = c.eval.test_candidates;
    let (stem, text) = match mode {
        AblateMode::Metapath => {
            let g = run.graph()?;
            let t = run_ablation(&ds, &g, &c.recommender, &default_ablation_rows(), test_mode).map_err(|e| CliError::runtime("ablate", e))?;
            run.write_json("ablation.json", &t)?;
            run.write("ablation.csv", t.to_csv().as_bytes())?;
            ("ablation", t.to_text())
        }
        AblateMode::Levels => {
            let levels = c.quantizer.user.levels;
            if let Some(t) = c.ablate.level_sets.iter().flatten().find(|&&t| t >= levels) {
                return Err(CliError::Validation(format!("ablate.level_sets uses level {t} of a {levels}-level quantizer")));
            }
            let uq = run.factor_table(USER_QUANTIZER, USER_FACTORS)?;
            let iq = run.factor_table(ITEM_QUANTIZER, ITEM_FACTORS)?;
            let t = run_level_selection(&ds, &uq, &iq, &c.recommender, &c.ablate.level_sets, test_mode)
                .map_err(|e| CliError::runtime("ablate", e))?;
            run.write_json("levels.json", &t)?;
            run.write("levels.csv", t.to_csv().as_bytes())?;
            ("levels", t.to_text())
        }
        AblateMode::Grid => {
            let g = run.graph_for(&c.recommender)?;
            let mut rows = Vec::new();
            for &lr in &c.ablate.lr_grid {
                for &batch_size in &c.ablate.batch_grid {
                    let cfg = RecConfig {
                        lr,
                        batch_size,
                        ..c.recommender.clone()
                    };
                    let out = run_experiment(&ds, g.as_ref(), &cfg, test_mode).map_err(|e| CliError::runtime("ablate", e))?;
                    rows.push(GridRow {
                        lr,
                        batch_size,
                        best_valid_ndcg: out.fit.best_valid_ndcg,
                        best_epoch: out.fit.best_epoch,
                        test: out.test.summary(),
                    });
                }
            }
            let selected = (0..rows.len())
                .max_by(|&a, &b| rows[a].best_valid_ndcg.total_cmp(&rows[b].best_valid_ndcg).then(b.cmp(&a)))
                .ok_or_else(|| CliError::Validation("ablate grids are empty".into()))?;
            let t = GridTable { rows, selected };
            run.write_json("grid.json", &t)?;
            ("grid", t.to_text())
        }
    };
    run.write(&format!("{stem}.txt"), text.as_bytes())?;
    Ok(text)
}

/// Runs the invariant suite; fails when any check fails.
pub fn check(run: &Run) -> Result<Vec<checks::CheckOutcome>, CliError> {
    let outcomes = checks::run_all(run.config.seed);
    run.write_json("check.json", &outcomes)?;
    Ok(outcomes)
}
