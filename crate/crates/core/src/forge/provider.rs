//! Sources of abstractions and generalized captions.
//!
//! A provider answers two kinds of [`ProviderRequest`]: `abstract` (name the
//! concept shared by the input texts) and `generalize` (write a caption for a
//! concept node). [`RuleProvider`] answers from a lookup table, [`HttpProvider`]
//! forwards to a remote service, and [`CachedProvider`] wraps either with a
//! replayable on-disk cache.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::encoder::normalize_text;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProviderError {
    #[error("provider failure after {attempts} attempt(s): {message}")]
    Failure { attempts: usize, message: String },
    #[error("no rule for {0:?}")]
    NoRule(String),
    #[error("cache error: {0}")]
    Cache(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Abstract,
    Generalize,
}

/// Wire format of a provider call.
///
/// * `abstract`: `inputs` are the texts to abstract; `context` is the chain
///   inferred so far.
/// * `generalize`: `inputs` are member captions; `context` is the node's
///   concept followed by its ancestors' concepts, nearest first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProviderRequest {
    pub task: Task,
    pub inputs: Vec<String>,
    pub context: Vec<String>,
}

pub trait AbstractionProvider: Send + Sync {
    /// Stable identifier; part of the cache key.
    fn id(&self) -> String;

    fn complete(&self, request: &ProviderRequest) -> Result<String, ProviderError>;
}

pub fn abstract_texts(p: &dyn AbstractionProvider, texts: &[String], context: &[String]) -> Result<String, ProviderError> {
    p.complete(&ProviderRequest {
        task: Task::Abstract,
        inputs: texts.to_vec(),
        context: context.to_vec(),
    })
}

pub fn generalize(
    p: &dyn AbstractionProvider,
    concept: &str,
    ancestors: &[String],
    captions: &[String],
) -> Result<String, ProviderError> {
    p.complete(&ProviderRequest {
        task: Task::Generalize,
        inputs: captions.to_vec(),
        context: std::iter::once(concept.to_string()).chain(ancestors.iter().cloned()).collect(),
    })
}

/// Table-driven provider.
///
/// `leaf_rules` maps a caption key to its level-1 concept; a caption carries
/// its key as a `leaf:<key>` token. `parent_rules` maps a concept (normalized)
/// to the next more abstract one. Generalized captions use the template
/// `a scene of <concept>`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RuleProvider {
    pub leaf_rules: BTreeMap<String, String>,
    pub parent_rules: BTreeMap<String, String>,
}

pub const GENERALIZE_TEMPLATE: &str = "a scene of ";

impl RuleProvider {
    /// A single hand-written chain, handy for demos and docs.
    pub fn example() -> Self {
        let mut p = Self::default();
        p.leaf_rules.insert("birthday_party".into(), "birthday".into());
        for (c, parent) in [
            ("birthday", "celebration"),
            ("celebration", "social gathering"),
            ("social gathering", "social activity"),
        ] {
            p.parent_rules.insert(c.into(), parent.into());
        }
        p
    }

    pub fn load(path: &Path) -> Result<Self, ProviderError> {
        let text = std::fs::read_to_string(path).map_err(|e| ProviderError::NoRule(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ProviderError::NoRule(format!("{}: {e}", path.display())))
    }

    fn leaf_key(text: &str) -> Option<&str> {
        text.split_whitespace().find_map(|tok| tok.strip_prefix("leaf:"))
    }
}

impl AbstractionProvider for RuleProvider {
    fn id(&self) -> String {
        "rules".into()
    }

    fn complete(&self, request: &ProviderRequest) -> Result<String, ProviderError> {
        match request.task {
            Task::Abstract => {
                for text in &request.inputs {
                    if let Some(key) = Self::leaf_key(text) {
                        if let Some(c) = self.leaf_rules.get(key) {
                            return Ok(c.clone());
                        }
                    }
                    if let Some(c) = self.parent_rules.get(&normalize_text(text)) {
                        return Ok(c.clone());
                    }
                }
                Err(ProviderError::NoRule(request.inputs.first().cloned().unwrap_or_default()))
            }
            Task::Generalize => {
                let concept = request.context.first().ok_or_else(|| ProviderError::NoRule("generalize without concept".into()))?;
                Ok(format!("{GENERALIZE_TEMPLATE}{concept}"))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HttpConfig {
    pub url: String,
    pub api_key: Option<String>,
    pub timeout: Duration,
    pub max_retries: usize,
    pub backoff: Duration,
}

impl HttpConfig {
    pub fn new(url: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            api_key: None,
            timeout: Duration::from_secs(30),
            max_retries: 3,
            backoff: Duration::from_millis(250),
        }
    }

    /// `GLASS_PROVIDER_URL` and, if set, `GLASS_PROVIDER_KEY`.
    pub fn from_env() -> Option<Self> {
        let url = std::env::var("GLASS_PROVIDER_URL").ok()?;
        let mut c = Self::new(url);
        c.api_key = std::env::var("GLASS_PROVIDER_KEY").ok();
        Some(c)
    }
}

/// POSTs the request as JSON and expects `{"output": "..."}` back. Transport
/// errors and non-2xx replies are retried with doubling backoff.
pub struct HttpProvider {
    config: HttpConfig,
    agent: ureq::Agent,
}

#[derive(Deserialize)]
struct HttpReply {
    output: String,
}

impl HttpProvider {
    pub fn new(config: HttpConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(config.timeout))
            .build()
            .new_agent();
        Self { config, agent }
    }

    fn attempt(&self, request: &ProviderRequest) -> Result<String, String> {
        let mut req = self.agent.post(&self.config.url);
        if let Some(key) = &self.config.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = req.send_json(request).map_err(|e| e.to_string())?;
        let reply: HttpReply = resp.body_mut().read_json().map_err(|e| e.to_string())?;
        Ok(reply.output)
    }
}

impl AbstractionProvider for HttpProvider {
    fn id(&self) -> String {
        format!("http:{}", self.config.url)
    }

    fn complete(&self, request: &ProviderRequest) -> Result<String, ProviderError> {
        let attempts = self.config.max_retries + 1;
        let mut delay = self.config.backoff;
        let mut last = String::new();
        for k in 0..attempts {
            match self.attempt(request) {
                Ok(out) => return Ok(out),
                Err(e) => {
                    log::warn!("provider attempt {}/{attempts} failed: {e}", k + 1);
                    last = e;
                }
            }
            if k + 1 < attempts {
                std::thread::sleep(delay);
                delay *= 2;
            }
        }
        Err(ProviderError::Failure { attempts, message: last })
    }
}

#[derive(Serialize, Deserialize)]
struct CacheEntry {
    provider_id: String,
    request: ProviderRequest,
    output: String,
}

/// Memoizes another provider in memory and, optionally, on disk: one JSON
/// file per request named by `sha256(provider_id, request)`. Files are
/// written to a temporary name and renamed, so an interrupted run never
/// leaves a truncated entry. Failed requests are not cached.
pub struct CachedProvider<P> {
    inner: P,
    dir: Option<PathBuf>,
    memory: Mutex<HashMap<String, String>>,
    misses: AtomicUsize,
}

impl<P: AbstractionProvider> CachedProvider<P> {
    pub fn new(inner: P, dir: Option<PathBuf>) -> Self {
        Self {
            inner,
            dir,
            memory: Mutex::new(HashMap::new()),
            misses: AtomicUsize::new(0),
        }
    }

    /// Requests forwarded to the wrapped provider so far.
    pub fn inner_calls(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    pub fn inner(&self) -> &P {
        &self.inner
    }

    pub fn key(&self, request: &ProviderRequest) -> String {
        let mut h = Sha256::new();
        h.update(self.inner.id().as_bytes());
        h.update([0u8]);
        h.update(serde_json::to_vec(request).expect("request serializes"));
        hex::encode(h.finalize())
    }

    fn read_disk(&self, key: &str) -> Option<String> {
        let path = self.dir.as_ref()?.join(format!("{key}.json"));
        let text = std::fs::read_to_string(path).ok()?;
        let entry: CacheEntry = serde_json::from_str(&text).ok()?;
        Some(entry.output)
    }

    fn write_disk(&self, key: &str, request: &ProviderRequest, output: &str) -> Result<(), ProviderError> {
        let Some(dir) = &self.dir else { return Ok(()) };
        let err = |e: std::io::Error| ProviderError::Cache(format!("{}: {e}", dir.display()));
        std::fs::create_dir_all(dir).map_err(err)?;
        let entry = CacheEntry {
            provider_id: self.inner.id(),
            request: request.clone(),
            output: output.to_string(),
        };
        let tmp = dir.join(format!(".{key}.{}.tmp", std::process::id()));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&entry).expect("entry serializes")).map_err(err)?;
        std::fs::rename(&tmp, dir.join(format!("{key}.json"))).map_err(err)
    }
}

impl<P: AbstractionProvider> AbstractionProvider for CachedProvider<P> {
    fn id(&self) -> String {
        self.inner.id()
    }

    fn complete(&self, request: &ProviderRequest) -> Result<String, ProviderError> {
        let key = self.key(request);
        if let Some(hit) = self.memory.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        if let Some(hit) = self.read_disk(&key) {
            self.memory.lock().expect("cache lock").insert(key, hit.clone());
            return Ok(hit);
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let out = self.inner.complete(request)?;
        self.write_disk(&key, request, &out)?;
        self.memory.lock().expect("cache lock").insert(key, out.clone());
        Ok(out)
    }
}

impl AbstractionProvider for Box<dyn AbstractionProvider> {
    fn id(&self) -> String {
        (**self).id()
    }

    fn complete(&self, request: &ProviderRequest) -> Result<String, ProviderError> {
        (**self).complete(request)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rule_chain_example() {
        let p = RuleProvider::example();
        let mut chain = vec![abstract_texts(&p, &["leaf:birthday_party item 7".into()], &[]).unwrap()];
        for _ in 0..3 {
            let next = abstract_texts(&p, &[chain.last().unwrap().clone()], &chain).unwrap();
            chain.push(next);
        }
        assert_eq!(chain, ["birthday", "celebration", "social gathering", "social activity"]);
        assert!(matches!(abstract_texts(&p, &["nothing".into()], &[]), Err(ProviderError::NoRule(_))));
        assert_eq!(generalize(&p, "birthday", &["celebration".into()], &[]).unwrap(), "a scene of birthday");
    }

    #[test]
    fn disk_cache_replays_without_inner_calls() {
        let dir = tempfile::tempdir().unwrap();
        let req = ProviderRequest {
            task: Task::Abstract,
            inputs: vec!["celebration".into()],
            context: vec![],
        };
        let a = CachedProvider::new(RuleProvider::example(), Some(dir.path().to_path_buf()));
        assert_eq!(a.complete(&req).unwrap(), "social gathering");
        assert_eq!(a.complete(&req).unwrap(), "social gathering");
        assert_eq!(a.inner_calls(), 1);

        // A fresh wrapper over an empty table still answers from disk.
        let b = CachedProvider::new(RuleProvider::default(), Some(dir.path().to_path_buf()));
        assert_eq!(b.complete(&req).unwrap(), "social gathering");
        assert_eq!(b.inner_calls(), 0);
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn failures_are_not_cached() {
        let dir = tempfile::tempdir().unwrap();
        let c = CachedProvider::new(RuleProvider::default(), Some(dir.path().to_path_buf()));
        let req = ProviderRequest {
            task: Task::Abstract,
            inputs: vec!["x".into()],
            context: vec![],
        };
        assert!(c.complete(&req).is_err());
        assert!(c.complete(&req).is_err());
        assert_eq!(c.inner_calls(), 2);
        assert_eq!(std::fs::read_dir(dir.path()).map(|d| d.count()).unwrap_or(0), 0);
    }

    #[test]
    fn unreachable_http_provider_fails_after_retries() {
        let mut cfg = HttpConfig::new("http://127.0.0.1:9/unreachable");
        cfg.max_retries = 1;
        cfg.backoff = Duration::from_millis(1);
        cfg.timeout = Duration::from_secs(2);
        let p = HttpProvider::new(cfg);
        let err = abstract_texts(&p, &["a".into()], &[]).unwrap_err();
        assert!(matches!(err, ProviderError::Failure { attempts: 2, .. }), "{err}");
    }
}
