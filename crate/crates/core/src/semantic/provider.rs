//! Semantic vector providers.
//!
//! Every provider reports [`ProviderStats`]. `calls` counts logical calls, one
//! per requested entity; transport retries are tracked separately in
//! `attempts` and never inflate `calls`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EmbeddingSet, SemanticError, SemanticVector};
use crate::numerics::Rng;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProviderStats {
    pub calls: usize,
    pub entities: usize,
    pub failures: usize,
    /// Transport-level attempts including retries.
    pub attempts: usize,
}

/// A single entity to embed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EmbedRequest {
    pub id: u64,
    pub prompt: String,
}

/// Anything that turns one prompt into one vector.
pub trait EmbeddingEndpoint: Sync {
    fn embed(&self, prompt: &str) -> Result<Vec<f32>, String>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpConfig {
    pub url: String,
    /// Name of the environment variable holding a bearer token.
    pub auth_token_env: Option<String>,
    pub model: Option<String>,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
    pub retries: usize,
    pub backoff_ms: u64,
    /// Where to store the collected vectors as a `SEMV` file.
    pub cache_path: Option<PathBuf>,
}

impl Default for HttpConfig {
    fn default() -> Self {
        Self {
            url: String::new(),
            auth_token_env: None,
            model: None,
            timeout_ms: 30_000,
            max_in_flight: 4,
            retries: 3,
            backoff_ms: 200,
            cache_path: None,
        }
    }
}

/// Knobs for [`provide_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DriverOptions {
    pub max_in_flight: usize,
    pub retries: usize,
    pub backoff_ms: u64,
    /// The run aborts when more than this fraction of entities fail.
    pub max_failure_ratio: f64,
}

impl Default for DriverOptions {
    fn default() -> Self {
        Self {
            max_in_flight: 4,
            retries: 3,
            backoff_ms: 200,
            max_failure_ratio: 0.10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProviderOutput {
    pub vectors: EmbeddingSet,
    pub stats: ProviderStats,
    /// `(entity id, last error)` for entities that never succeeded.
    pub failures: Vec<(u64, String)>,
}

/// Embeds every request through `endpoint` with bounded concurrency.
///
/// Results are keyed by entity id, so completion order does not matter.
pub fn provide_with(
    endpoint: &dyn EmbeddingEndpoint,
    requests: &[EmbedRequest],
    opts: &DriverOptions,
) -> Result<ProviderOutput, SemanticError> {
    let calls = AtomicUsize::new(0);
    let attempts = AtomicUsize::new(0);
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<Result<Vec<f32>, String>>>> =
        Mutex::new(vec![None; requests.len()]);
    let workers = opts.max_in_flight.max(1).min(requests.len().max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                let Some(req) = requests.get(idx) else { break };
                calls.fetch_add(1, Ordering::SeqCst);
                let mut result = Err(String::new());
                for attempt in 0..=opts.retries {
                    if attempt > 0 && opts.backoff_ms > 0 {
                        std::thread::sleep(Duration::from_millis(
                            opts.backoff_ms << (attempt - 1).min(16),
                        ));
                    }
                    attempts.fetch_add(1, Ordering::SeqCst);
                    result = endpoint.embed(&req.prompt);
                    match &result {
                        Ok(_) => break,
                        Err(e) => log::debug!("entity {} attempt {attempt} failed: {e}", req.id),
                    }
                }
                slots.lock().expect("no worker panics while holding the lock")[idx] = Some(result);
            });
        }
    });

    let slots = slots.into_inner().expect("workers joined");
    let mut dim = None;
    let mut vectors = EmbeddingSet::default();
    let mut failures = Vec::new();
    for (req, slot) in requests.iter().zip(slots) {
        match slot.unwrap_or_else(|| Err("not attempted".into())) {
            Ok(values) => {
                let d = *dim.get_or_insert(values.len());
                vectors.dim = d;
                if let Err(e) = vectors.insert(SemanticVector { id: req.id, values }) {
                    failures.push((req.id, e.to_string()));
                }
            }
            Err(e) => failures.push((req.id, e)),
        }
    }
    let stats = ProviderStats {
        calls: calls.into_inner(),
        entities: requests.len(),
        failures: failures.len(),
        attempts: attempts.into_inner(),
    };
    if failures.len() as f64 > opts.max_failure_ratio * requests.len() as f64 {
        let summary = failures
            .iter()
            .take(5)
            .map(|(id, e)| format!("{id}: {e}"))
            .collect::<Vec<_>>()
            .join("; ");
        return Err(SemanticError::TooManyFailures {
            failed: failures.len(),
            total: requests.len(),
            summary,
        });
    }
    for (id, e) in &failures {
        log::warn!("no semantic vector for entity {id}: {e}");
    }
    Ok(ProviderOutput {
        vectors,
        stats,
        failures,
    })
}

/// JSON-over-HTTP embedding endpoint.
///
/// Sends `{"input": prompt, "model": ...}` and accepts `{"embedding": [...]}`,
/// `{"data": [{"embedding": [...]}]}` or `{"v": [...]}` back.
pub struct HttpEndpoint {
    agent: ureq::Agent,
    url: String,
    token: Option<String>,
    model: Option<String>,
}

impl HttpEndpoint {
    pub fn new(cfg: &HttpConfig) -> Result<Self, SemanticError> {
        if cfg.url.is_empty() {
            return Err(SemanticError::Argument("http provider needs a url".into()));
        }
        let token = match &cfg.auth_token_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                SemanticError::Argument(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .build()
            .into();
        Ok(Self {
            agent,
            url: cfg.url.clone(),
            token,
            model: cfg.model.clone(),
        })
    }
}

fn parse_embedding(body: &serde_json::Value) -> Option<Vec<f32>> {
    let arr = body
        .get("embedding")
        .or_else(|| body.get("v"))
        .or_else(|| body.get("data")?.get(0)?.get("embedding"))?
        .as_array()?;
    arr.iter().map(|x| x.as_f64().map(|f| f as f32)).collect()
}

impl EmbeddingEndpoint for HttpEndpoint {
    fn embed(&self, prompt: &str) -> Result<Vec<f32>, String> {
        let mut body = serde_json::json!({ "input": prompt });
        if let Some(m) = &self.model {
            body["model"] = serde_json::Value::String(m.clone());
        }
        let mut req = self.agent.post(&self.url);
        if let Some(t) = &self.token {
            req = req.header("Authorization", &format!("Bearer {t}"));
        }
        let mut resp = req.send_json(&body).map_err(|e| e.to_string())?;
        let value: serde_json::Value = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        parse_embedding(&value).ok_or_else(|| "response has no embedding array".to_owned())
    }
}

/// Embeds prompts through a remote endpoint; writes the cache file when configured.
pub fn provide_http(cfg: &HttpConfig, requests: &[EmbedRequest]) -> Result<ProviderOutput, SemanticError> {
    let endpoint = HttpEndpoint::new(cfg)?;
    let out = provide_with(
        &endpoint,
        requests,
        &DriverOptions {
            max_in_flight: cfg.max_in_flight,
            retries: cfg.retries,
            backoff_ms: cfg.backoff_ms,
            ..Default::default()
        },
    )?;
    if let Some(path) = &cfg.cache_path {
        out.vectors.save(path)?;
    }
    Ok(out)
}

/// Deterministic stand-in for a language-model encoder.
///
/// The vector is a unit-norm Gaussian draw seeded by the prompt's digest.
/// Optionally fails the first `fail_attempts` calls for each prompt.
pub struct MockEndpoint {
    pub dim: usize,
    pub seed: u64,
    fail_attempts: u32,
    seen: Mutex<HashMap<String, u32>>,
    pub raw_calls: AtomicUsize,
}

impl MockEndpoint {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self::flaky(dim, seed, 0)
    }

    pub fn flaky(dim: usize, seed: u64, fail_attempts: u32) -> Self {
        Self {
            dim,
            seed,
            fail_attempts,
            seen: Mutex::new(HashMap::new()),
            raw_calls: AtomicUsize::new(0),
        }
    }
}

impl EmbeddingEndpoint for MockEndpoint {
    fn embed(&self, prompt: &str) -> Result<Vec<f32>, String> {
        self.raw_calls.fetch_add(1, Ordering::SeqCst);
        if self.fail_attempts > 0 {
            let mut seen = self.seen.lock().map_err(|e| e.to_string())?;
            let n = seen.entry(prompt.to_owned()).or_insert(0);
            *n += 1;
            if *n <= self.fail_attempts {
                return Err(format!("injected failure {n}"));
            }
        }
        let digest = Sha256::digest(prompt.as_bytes());
        let tag = u64::from_le_bytes(digest[..8].try_into().expect("32-byte digest"));
        let mut rng = Rng::derived(self.seed, &[tag]);
        let mut v: Vec<f64> = (0..self.dim).map(|_| rng.normal()).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v.into_iter().map(|x| x as f32).collect())
    }
}

/// Loads pre-stored vectors; each vector read counts as one call.
pub fn provide_file(path: &Path, expected_dim: usize) -> Result<(EmbeddingSet, ProviderStats), SemanticError> {
    let set = match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") => {
            let f = std::fs::File::open(path).map_err(|e| SemanticError::io(path, e))?;
            EmbeddingSet::read_jsonl(f, Some(expected_dim))?
        }
        _ => EmbeddingSet::load(path, Some(expected_dim))?,
    };
    let stats = ProviderStats {
        calls: set.len(),
        entities: set.len(),
        failures: 0,
        attempts: set.len(),
    };
    Ok((set, stats))
}

/// Planted-cluster vectors with ids `1..=n_entities`.
///
/// Centers are uniform on the unit sphere; labels are balanced then shuffled.
pub fn provide_synthetic(
    n_entities: usize,
    dim: usize,
    n_clusters: usize,
    noise_sigma: f64,
    rng: &mut Rng,
) -> Result<(EmbeddingSet, Vec<usize>, ProviderStats), SemanticError> {
    if n_clusters == 0 || n_clusters > n_entities {
        return Err(SemanticError::Argument(format!(
            "need 1 <= clusters <= entities, got {n_clusters} clusters for {n_entities} entities"
        )));
    }
    if dim == 0 {
        return Err(SemanticError::Argument("dimension must be positive".into()));
    }
    if !(noise_sigma >= 0.0) {
        return Err(SemanticError::Argument(format!("noise sigma must be >= 0, got {noise_sigma}")));
    }
    let centers: Vec<Vec<f64>> = (0..n_clusters).map(|_| unit_vector(dim, rng)).collect();
    let mut labels: Vec<usize> = (0..n_entities).map(|i| i % n_clusters).collect();
    rng.shuffle(&mut labels);
    let mut set = EmbeddingSet::new(dim);
    for (i, &l) in labels.iter().enumerate() {
        let values = centers[l]
            .iter()
            .map(|&c| (c + noise_sigma * rng.normal()) as f32)
            .collect();
        set.insert(SemanticVector {
            id: i as u64 + 1,
            values,
        })?;
    }
    let stats = ProviderStats {
        calls: n_entities,
        entities: n_entities,
        failures: 0,
        attempts: n_entities,
    };
    Ok((set, labels, stats))
}

pub(crate) fn unit_vector(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn requests(n: usize) -> Vec<EmbedRequest> {
        (0..n)
            .map(|i| EmbedRequest {
                id: i as u64 + 1,
                prompt: format!("entity {i}"),
            })
            .collect()
    }

    fn fast() -> DriverOptions {
        DriverOptions {
            backoff_ms: 0,
            ..Default::default()
        }
    }

    #[test]
    fn one_call_per_entity() {
        let ep = MockEndpoint::new(8, 1);
        let out = provide_with(&ep, &requests(37), &fast()).unwrap();
        assert_eq!(out.stats.calls, 37);
        assert_eq!(out.stats.entities, 37);
        assert_eq!(out.vectors.len(), 37);
        assert_eq!(ep.raw_calls.load(Ordering::SeqCst), 37);
    }

    #[test]
    fn retries_do_not_count_as_calls() {
        let ep = MockEndpoint::flaky(4, 1, 1);
        let out = provide_with(&ep, &requests(10), &fast()).unwrap();
        assert_eq!(out.stats.calls, 10);
        assert_eq!(out.stats.failures, 0);
        assert_eq!(out.stats.attempts, 20);
    }

    #[test]
    fn dead_endpoint_aborts() {
        let ep = MockEndpoint::flaky(4, 1, u32::MAX);
        match provide_with(&ep, &requests(10), &fast()) {
            Err(SemanticError::TooManyFailures { failed, total, .. }) => {
                assert_eq!((failed, total), (10, 10));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn result_independent_of_concurrency() {
        let ep = MockEndpoint::new(6, 3);
        let serial = provide_with(&ep, &requests(50), &DriverOptions { max_in_flight: 1, ..fast() })
            .unwrap();
        let parallel = provide_with(&ep, &requests(50), &DriverOptions { max_in_flight: 8, ..fast() })
            .unwrap();
        assert_eq!(serial.vectors, parallel.vectors);
    }

    #[test]
    fn synthetic_without_noise_is_clustered() {
        let (set, labels, stats) = provide_synthetic(40, 5, 4, 0.0, &mut Rng::new(2)).unwrap();
        assert_eq!(stats.calls, 40);
        for a in 1..=40u64 {
            for b in 1..=40u64 {
                if labels[a as usize - 1] == labels[b as usize - 1] {
                    assert_eq!(set.get(a), set.get(b));
                }
            }
        }
    }

    #[test]
    fn synthetic_single_cluster_within_three_sigma() {
        let sigma = 0.1;
        let dim = 32;
        let (set, _, _) = provide_synthetic(200, dim, 1, sigma, &mut Rng::new(5)).unwrap();
        let mean: Vec<f64> = (0..dim)
            .map(|d| set.vectors.values().map(|v| v[d] as f64).sum::<f64>() / 200.0)
            .collect();
        for v in set.vectors.values() {
            let dist: f64 = v.iter().zip(&mean).map(|(&a, b)| (a as f64 - b).powi(2)).sum();
            assert!((dist / dim as f64).sqrt() <= 3.0 * sigma);
        }
    }

    #[test]
    fn synthetic_argument_errors_and_determinism() {
        assert!(provide_synthetic(3, 4, 5, 0.1, &mut Rng::new(0)).is_err());
        assert!(provide_synthetic(3, 4, 2, -1.0, &mut Rng::new(0)).is_err());
        let a = provide_synthetic(30, 4, 3, 0.2, &mut Rng::new(8)).unwrap();
        let b = provide_synthetic(30, 4, 3, 0.2, &mut Rng::new(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn response_shapes() {
        let a = serde_json::json!({"embedding": [1.0, 2.0]});
        let b = serde_json::json!({"data": [{"embedding": [3.0]}]});
        let c = serde_json::json!({"v": [0.5]});
        assert_eq!(parse_embedding(&a), Some(vec![1.0, 2.0]));
        assert_eq!(parse_embedding(&b), Some(vec![3.0]));
        assert_eq!(parse_embedding(&c), Some(vec![0.5]));
        assert_eq!(parse_embedding(&serde_json::json!({"x": 1})), None);
    }
}
