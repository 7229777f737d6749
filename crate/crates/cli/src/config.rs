//! Pipeline configuration: TOML with `${VAR}` interpolation, validated on load.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use factorgraph::dataio::{CandidateMode, Delimiter, PreprocessConfig, Schema};
use factorgraph::quantizer::QuantizerConfig;
use factorgraph::recommender::RecConfig;
use factorgraph::semantic::HttpConfig;
use factorgraph::synthetic::SyntheticConfig;

use crate::error::CliError;

/// The bundled planted-cluster pipeline.
pub const BUNDLED_SYNTHETIC: &str = include_str!("../configs/synthetic.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub interactions: Option<PathBuf>,
    pub schema: Schema,
    pub user_features: Option<PathBuf>,
    pub item_features: Option<PathBuf>,
    pub feature_delimiter: Delimiter,
    pub preprocess: PreprocessConfig,
    pub synthetic: SyntheticConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synthetic,
            interactions: None,
            schema: Schema::movielens(),
            user_features: None,
            item_features: None,
            feature_delimiter: Delimiter::Csv,
            preprocess: PreprocessConfig::default(),
            synthetic: SyntheticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProviderKind {
    /// The semantic vectors planted by the synthetic data source.
    Planted,
    /// Clustered random vectors, independent of the interactions.
    Synthetic,
    /// Pre-computed vectors keyed by raw entity id.
    File,
    /// A remote embedding endpoint fed with rendered prompts.
    Http,
    /// Deterministic prompt hashing, for dry runs of the prompt path.
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProviderConfig {
    pub kind: ProviderKind,
    pub dim: usize,
    pub clusters: usize,
    pub noise: f64,
    pub user_path: Option<PathBuf>,
    pub item_path: Option<PathBuf>,
    pub user_template: Option<String>,
    pub item_template: Option<String>,
    /// Most recent training items quoted in a user prompt.
    pub history_items: usize,
    pub http: HttpConfig,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            kind: ProviderKind::Planted,
            dim: 64,
            clusters: 8,
            noise: 0.05,
            user_path: None,
            item_path: None,
            user_template: None,
            item_template: None,
            history_items: 10,
            http: HttpConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantizerSides {
    pub user: QuantizerConfig,
    pub item: QuantizerConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub levels_used: BTreeSet<usize>,
    pub dedupe: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            levels_used: [0, 1].into_iter().collect(),
            dedupe: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub test_candidates: CandidateMode,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            test_candidates: CandidateMode::Full,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub level_sets: Vec<BTreeSet<usize>>,
    pub lr_grid: Vec<f64>,
    pub batch_grid: Vec<usize>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            level_sets: vec![
                BTreeSet::new(),
                [0].into_iter().collect(),
                [0, 1].into_iter().collect(),
                [0, 1, 2].into_iter().collect(),
            ],
            lr_grid: vec![1e-3, 2e-3, 1e-2, 2e-2],
            batch_grid: vec![64, 128, 256],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub provider: ProviderConfig,
    pub quantizer: QuantizerSides,
    pub graph: GraphConfig,
    pub recommender: RecConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            data: DataConfig::default(),
            provider: ProviderConfig::default(),
            quantizer: QuantizerSides::default(),
            graph: GraphConfig::default(),
            recommender: RecConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

/// Replaces every `${NAME}` with the value of environment variable `NAME`.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String, CliError> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| CliError::Validation("unterminated ${ in config".into()))?;
        let name = &after[..end];
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(CliError::Validation(format!("invalid variable name {name:?} in config")));
        }
        let value = lookup(name)
            .ok_or_else(|| CliError::Validation(format!("environment variable {name} is not set")))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let text = interpolate(text, |n| std::env::var(n).ok())?;
        let cfg: Self = toml::from_str(&text).map_err(|e| CliError::Validation(format!("config: {e}")))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Pushes the top-level seed into every stage and checks the result.
    pub fn resolve(mut self, seed: Option<u64>, out_dir: Option<PathBuf>) -> Result<Self, CliError> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if let Some(o) = out_dir {
            self.out_dir = o;
        }
        self.data.synthetic.seed = self.seed;
        self.quantizer.user.seed = self.seed;
        self.quantizer.item.seed = self.seed;
        self.recommender.seed = self.seed;
        self.data.synthetic.max_len = self.data.preprocess.max_len;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        if self.data.source == DataSource::File && self.data.interactions.is_none() {
            return bad("data.interactions is required for the file source".into());
        }
        if self.provider.kind == ProviderKind::Planted && self.data.source != DataSource::Synthetic {
            return bad("provider.kind = \"planted\" needs data.source = \"synthetic\"".into());
        }
        if self.provider.kind == ProviderKind::File && (self.provider.user_path.is_none() || self.provider.item_path.is_none()) {
            return bad("the file provider needs provider.user_path and provider.item_path".into());
        }
        if self.provider.kind == ProviderKind::Http && self.provider.http.url.is_empty() {
            return bad("the http provider needs provider.http.url".into());
        }
        if self.provider.dim == 0 {
            return bad("provider.dim must be positive".into());
        }
        for (side, q) in [("user", &self.quantizer.user), ("item", &self.quantizer.item)] {
            q.validate().map_err(|e| CliError::Validation(format!("quantizer.{side}: {e}")))?;
            if let Some(&t) = self.graph.levels_used.iter().find(|&&t| t >= q.levels) {
                return bad(format!("graph.levels_used has level {t} but quantizer.{side} has {} levels", q.levels));
            }
        }
        if self.quantizer.user.levels != self.quantizer.item.levels {
            return bad("user and item quantizers must use the same number of levels".into());
        }
        self.recommender
            .validate()
            .map_err(|e| CliError::Validation(format!("recommender: {e}")))?;
        if let CandidateMode::Sampled(0) = self.eval.test_candidates {
            return bad("eval.test_candidates needs at least one negative".into());
        }
        if self.ablate.lr_grid.iter().any(|&lr| !(lr > 0.0)) || self.ablate.batch_grid.contains(&0) {
            return bad("ablate grids need positive learning rates and batch sizes".into());
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// First eight hex digits of the SHA-256 of the resolved config, output
    /// directory excluded.
    pub fn hash8(&self) -> String {
        let mut keyed = self.clone();
        keyed.out_dir = PathBuf::new();
        let digest = Sha256::digest(keyed.to_toml().as_bytes());
        digest[..4].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(format!("run-{}", self.hash8()))
    }
}
