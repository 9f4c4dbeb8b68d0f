//! Response generation backends and the response cache.
//!
//! Three backends produce [`ResponseRecord`]s for an (instance, view) pair:
//!
//! * `Remote`: a chat-completions style HTTP service; the image is sent as a
//!   base64 data URL next to a prompt asking for `<thinking>`/`<answer>` tags.
//! * `Synthetic`: a deterministic stand-in for a VLM over the synthbench
//!   corpus. It reads the cell correctly iff the view's legibility score is at
//!   least τ, and otherwise rambles for longer and answers wrongly.
//! * `Replay`: serves records from an existing cache and never generates.
//!
//! Every generated record goes through a [`ResponseCache`], keyed by
//! (instance, view, policy, decode digest), so retries and reruns never store
//! duplicates and replayed runs are bit-identical.

use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Duration;

use base64::Engine;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{
    self, CorpusError, DecodeParams, QaInstance, RecordKey, ResponseRecord, ViewSpec,
};
use crate::degrade;
use crate::dpocore;
use crate::jsonl;
use crate::synthbench::{self, DEFAULT_TAU};

pub const TOKEN_ENV: &str = "VDFORGE_API_TOKEN";
pub const DEFAULT_JOBS: usize = 8;

/// Generation prompt; `{question}` is substituted.
pub const DEFAULT_PROMPT_TEMPLATE: &str = "Answer the question about the image. \
Reason step by step inside <thinking></thinking> tags, then give only the final \
answer inside <answer></answer> tags.\n\nQuestion: {question}";

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("service returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("unexpected service response: {0}")]
    Protocol(String),
    #[error("cache corrupted: {0}")]
    CacheCorruption(String),
    #[error("replay cache has no record for {0}")]
    ReplayMiss(String),
    #[error("image for view `{view}` not found at {path}")]
    MissingImage { view: String, path: String },
    #[error("synthetic policy: {0}")]
    Synthetic(String),
    #[error("invalid backend config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PolicyError + '_ {
    move |source| PolicyError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RemoteConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub token_env: String,
    pub timeout_ms: u64,
    /// Total attempts per request.
    pub max_retries: u32,
    /// First backoff delay; doubles after every failed attempt.
    pub backoff_ms: u64,
    pub prompt_template: String,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            token_env: TOKEN_ENV.to_string(),
            timeout_ms: 60_000,
            max_retries: 3,
            backoff_ms: 500,
            prompt_template: DEFAULT_PROMPT_TEMPLATE.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticConfig {
    /// Legibility threshold in pixels.
    pub tau: f64,
    /// Extra hedging sentences per pixel of legibility deficit.
    pub verbosity: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            verbosity: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendKind {
    Remote(RemoteConfig),
    Synthetic(SyntheticConfig),
    Replay(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyBackend {
    pub policy_id: String,
    pub kind: BackendKind,
}

impl PolicyBackend {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.policy_id.is_empty() {
            return Err(PolicyError::Config("policy_id must be non-empty".into()));
        }
        match &self.kind {
            BackendKind::Remote(r) if r.timeout_ms == 0 => {
                Err(PolicyError::Config("remote timeout must be > 0".into()))
            }
            BackendKind::Remote(r) if r.max_retries == 0 => Err(PolicyError::Config(
                "remote needs at least one attempt".into(),
            )),
            BackendKind::Synthetic(s) if s.tau.is_nan() || s.tau <= 0.0 || s.verbosity < 0.0 => {
                Err(PolicyError::Config(
                    "synthetic tau must be > 0 and verbosity >= 0".into(),
                ))
            }
            _ => Ok(()),
        }
    }
}

/// Cache index sidecar entry: one per line of the responses file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    instance_id: String,
    view_label: String,
    policy_id: String,
    decode_digest: String,
    line: usize,
}

/// Records keyed by identity, optionally persisted as `responses.jsonl` plus
/// an `.idx` sidecar.
#[derive(Debug, Default)]
pub struct ResponseCache {
    path: Option<PathBuf>,
    read_only: bool,
    records: HashMap<RecordKey, ResponseRecord>,
    lines: usize,
}

fn index_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".idx");
    PathBuf::from(s)
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (creating if absent) a persistent cache and checks its sidecar.
    pub fn open(path: &Path) -> Result<Self, PolicyError> {
        Self::open_with(path, false)
    }

    /// Opens an existing cache for lookups only.
    pub fn open_read_only(path: &Path) -> Result<Self, PolicyError> {
        if !path.exists() {
            return Err(PolicyError::CacheCorruption(format!(
                "{} does not exist",
                path.display()
            )));
        }
        Self::open_with(path, true)
    }

    fn open_with(path: &Path, read_only: bool) -> Result<Self, PolicyError> {
        let records = if path.exists() {
            corpus::load_records(path).map_err(|e| match e {
                CorpusError::Io { .. } => PolicyError::Corpus(e),
                other => PolicyError::CacheCorruption(other.to_string()),
            })?
        } else {
            Vec::new()
        };
        let idx = index_path(path);
        let entries: Vec<IndexEntry> = records
            .iter()
            .enumerate()
            .map(|(i, r)| {
                let k = r.key();
                IndexEntry {
                    instance_id: k.instance_id,
                    view_label: k.view_label,
                    policy_id: k.policy_id,
                    decode_digest: k.decode_digest,
                    line: i + 1,
                }
            })
            .collect();
        if idx.exists() {
            let text = fs::read_to_string(&idx).map_err(io_err(&idx))?;
            let stored: Vec<IndexEntry> = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(serde_json::from_str)
                .collect::<Result<_, _>>()
                .map_err(|e| PolicyError::CacheCorruption(format!("index: {e}")))?;
            if stored != entries {
                return Err(PolicyError::CacheCorruption(format!(
                    "index {} does not match {}",
                    idx.display(),
                    path.display()
                )));
            }
        } else if !read_only {
            let mut buf = String::new();
            for e in &entries {
                buf.push_str(&jsonl::to_line(e).expect("index entry serializes"));
                buf.push('\n');
            }
            fs::write(&idx, buf).map_err(io_err(&idx))?;
        }
        let lines = records.len();
        Ok(Self {
            path: Some(path.to_path_buf()),
            read_only,
            records: records.into_iter().map(|r| (r.key(), r)).collect(),
            lines,
        })
    }

    pub fn get(&self, key: &RecordKey) -> Option<&ResponseRecord> {
        self.records.get(key)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Stores `record` unless its key is present; returns the stored record.
    pub fn insert(&mut self, record: ResponseRecord) -> Result<ResponseRecord, PolicyError> {
        let key = record.key();
        if let Some(existing) = self.records.get(&key) {
            return Ok(existing.clone());
        }
        if let Some(path) = &self.path {
            if self.read_only {
                return Err(PolicyError::Config("cache is read-only".into()));
            }
            corpus::append_records(path, std::slice::from_ref(&record))?;
            self.lines += 1;
            let entry = IndexEntry {
                instance_id: key.instance_id.clone(),
                view_label: key.view_label.clone(),
                policy_id: key.policy_id.clone(),
                decode_digest: key.decode_digest.clone(),
                line: self.lines,
            };
            let idx = index_path(path);
            let mut f = OpenOptions::new()
                .create(true)
                .append(true)
                .open(&idx)
                .map_err(io_err(&idx))?;
            let line = format!(
                "{}\n",
                jsonl::to_line(&entry).expect("index entry serializes")
            );
            f.write_all(line.as_bytes()).map_err(io_err(&idx))?;
        }
        self.records.insert(key, record.clone());
        Ok(record)
    }
}

/// Where instance images and their degraded views live on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageLocator {
    /// The instance manifest; `image_path` values are relative to its directory.
    pub manifest: PathBuf,
    /// Directory holding `<stem>__<view>.png` files.
    pub degraded_dir: PathBuf,
}

impl ImageLocator {
    pub fn new(manifest: impl Into<PathBuf>, degraded_dir: impl Into<PathBuf>) -> Self {
        Self {
            manifest: manifest.into(),
            degraded_dir: degraded_dir.into(),
        }
    }

    pub fn hq_path(&self, instance: &QaInstance) -> PathBuf {
        corpus::resolve_path(&self.manifest, &instance.image_path)
    }

    pub fn view_path(&self, instance: &QaInstance, view: &ViewSpec) -> PathBuf {
        degrade::degraded_path(&self.hq_path(instance), &self.degraded_dir, view)
    }
}

pub fn whitespace_token_count(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for part in parts {
        for &b in *part {
            h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
        }
        h = (h ^ 0xff).wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

const HEDGES: [&str; 8] = [
    "The strokes blend into the background.",
    "Several characters could be more than one digit.",
    "I have to guess the shape of each character.",
    "The edges of the numbers are smeared together.",
    "Neighbouring cells do not help settle the reading.",
    "The last digit in particular is ambiguous.",
    "It is hard to tell where one character ends.",
    "I will go with the most plausible reading.",
];

/// Response of the synthetic policy for `instance` seen through `view`.
pub fn synthetic_response(
    cfg: &SyntheticConfig,
    instance: &QaInstance,
    view: &ViewSpec,
    decode: &DecodeParams,
) -> Result<String, PolicyError> {
    let glyph_px =
        synthbench::glyph_px_from_source(instance.source.as_deref()).ok_or_else(|| {
            PolicyError::Synthetic(format!(
                "instance `{}` carries no glyph height",
                instance.id
            ))
        })?;
    let gold = instance.gold_answer.as_deref().ok_or_else(|| {
        PolicyError::Synthetic(format!("instance `{}` has no gold answer", instance.id))
    })?;
    let label = view.label();
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(&[
        instance.id.as_bytes(),
        label.as_bytes(),
        &decode.seed.to_le_bytes(),
    ]));
    let mut score = synthbench::legibility_score(glyph_px, view);
    if decode.temperature > 0.0 {
        let u1 = ((rng.next_u64() >> 11) + 1) as f64 / (1u64 << 53) as f64;
        let u2 = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        score *= (decode.temperature * z).exp();
    }

    if score >= cfg.tau {
        return Ok(format!(
            "<thinking>Locate the requested cell. The digits are clear and read {gold}.</thinking>\n<answer>{gold}</answer>"
        ));
    }

    let wrong = match gold.parse::<i64>() {
        Ok(v) => {
            let step = rng.random_range(1..=9i64);
            if rng.random_bool(0.5) {
                v + step
            } else {
                v - step
            }
            .to_string()
        }
        Err(_) => "unreadable".to_string(),
    };
    let extra = 1 + (cfg.verbosity * (cfg.tau - score)).floor().max(0.0) as usize;
    let start = rng.random_range(0..HEDGES.len());
    let hedges: Vec<&str> = (0..extra)
        .map(|i| HEDGES[(start + i) % HEDGES.len()])
        .collect();
    Ok(format!(
        "<thinking>Locate the requested cell. The digits are blurry. {} I will estimate the value as {wrong}.</thinking>\n<answer>{wrong}</answer>",
        hedges.join(" ")
    ))
}

fn render_prompt(template: &str, question: &str) -> String {
    template.replace("{question}", question)
}

/// JSON body of a chat-completions request.
pub fn chat_request_body(
    cfg: &RemoteConfig,
    question: &str,
    image_bytes: &[u8],
    mime: &str,
    decode: &DecodeParams,
) -> Value {
    let data = base64::engine::general_purpose::STANDARD.encode(image_bytes);
    json!({
        "model": cfg.model,
        "messages": [{
            "role": "user",
            "content": [
                {"type": "image_url", "image_url": {"url": format!("data:{mime};base64,{data}")}},
                {"type": "text", "text": render_prompt(&cfg.prompt_template, question)},
            ],
        }],
        "temperature": decode.temperature,
        "max_tokens": decode.max_tokens,
        "seed": decode.seed,
    })
}

fn mime_for(path: &Path) -> &'static str {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .as_deref()
    {
        Some("jpg") | Some("jpeg") => "image/jpeg",
        _ => "image/png",
    }
}

fn remote_completion(cfg: &RemoteConfig, body: &Value) -> Result<String, PolicyError> {
    let url = format!("{}/v1/chat/completions", cfg.endpoint.trim_end_matches('/'));
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
        .http_status_as_error(false)
        .build()
        .into();
    let token = std::env::var(&cfg.token_env).ok();
    let mut delay = cfg.backoff_ms;
    let mut last = String::new();
    for attempt in 1..=cfg.max_retries {
        let mut req = agent.post(&url).header("Content-Type", "application/json");
        if let Some(t) = &token {
            req = req.header("Authorization", format!("Bearer {t}"));
        }
        match req.send(body.to_string()) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let text = resp.body_mut().read_to_string().unwrap_or_default();
                if (200..300).contains(&status) {
                    let v: Value = serde_json::from_str(&text)
                        .map_err(|e| PolicyError::Protocol(format!("invalid JSON: {e}")))?;
                    return v["choices"][0]["message"]["content"]
                        .as_str()
                        .map(str::to_string)
                        .ok_or_else(|| {
                            PolicyError::Protocol("missing choices[0].message.content".into())
                        });
                }
                if status != 429 && status < 500 {
                    return Err(PolicyError::Status { status, body: text });
                }
                last = format!("HTTP {status}");
            }
            Err(e) => last = e.to_string(),
        }
        if attempt < cfg.max_retries {
            log::warn!("request to {url} failed ({last}); retrying in {delay} ms");
            std::thread::sleep(Duration::from_millis(delay));
            delay = delay.saturating_mul(2);
        }
    }
    Err(PolicyError::Transport {
        attempts: cfg.max_retries,
        message: last,
    })
}

/// A backend plus its cache and image locations.
#[derive(Debug)]
pub struct Generator {
    backend: PolicyBackend,
    images: ImageLocator,
    cache: Mutex<ResponseCache>,
}

impl Generator {
    pub fn new(
        backend: PolicyBackend,
        images: ImageLocator,
        cache: ResponseCache,
    ) -> Result<Self, PolicyError> {
        backend.validate()?;
        Ok(Self {
            backend,
            images,
            cache: Mutex::new(cache),
        })
    }

    /// A generator whose cache is the replay file itself.
    pub fn replay(
        policy_id: &str,
        cache_path: &Path,
        images: ImageLocator,
    ) -> Result<Self, PolicyError> {
        let cache = ResponseCache::open_read_only(cache_path)?;
        Self::new(
            PolicyBackend {
                policy_id: policy_id.to_string(),
                kind: BackendKind::Replay(cache_path.to_path_buf()),
            },
            images,
            cache,
        )
    }

    pub fn backend(&self) -> &PolicyBackend {
        &self.backend
    }

    pub fn policy_id(&self) -> &str {
        &self.backend.policy_id
    }

    fn key(&self, instance: &QaInstance, view: &ViewSpec, decode: &DecodeParams) -> RecordKey {
        RecordKey {
            instance_id: instance.id.clone(),
            view_label: view.label(),
            policy_id: self.backend.policy_id.clone(),
            decode_digest: decode.digest(),
        }
    }

    /// Returns the cached record for the key or produces and caches a new one.
    pub fn generate(
        &self,
        instance: &QaInstance,
        view: &ViewSpec,
        decode: &DecodeParams,
    ) -> Result<ResponseRecord, PolicyError> {
        decode.validate().map_err(PolicyError::Config)?;
        let key = self.key(instance, view, decode);
        if let Some(hit) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(hit.clone());
        }
        let (text, token_count) = match &self.backend.kind {
            BackendKind::Replay(_) => return Err(PolicyError::ReplayMiss(key.to_string())),
            BackendKind::Synthetic(cfg) => {
                let text = synthetic_response(cfg, instance, view, decode)?;
                let n = dpocore::token_count(&text) as u64;
                (text, n)
            }
            BackendKind::Remote(cfg) => {
                let path = self.images.view_path(instance, view);
                if !path.exists() {
                    return Err(PolicyError::MissingImage {
                        view: view.label(),
                        path: path.display().to_string(),
                    });
                }
                let bytes = fs::read(&path).map_err(io_err(&path))?;
                let body =
                    chat_request_body(cfg, &instance.question, &bytes, mime_for(&path), decode);
                let text = remote_completion(cfg, &body)?;
                let n = whitespace_token_count(&text);
                (text, n)
            }
        };
        let record = ResponseRecord {
            instance_id: key.instance_id,
            view_label: key.view_label,
            policy_id: key.policy_id,
            decode: *decode,
            text,
            token_count,
            extracted_answer: None,
            correct: None,
        };
        self.cache.lock().expect("cache lock").insert(record)
    }

    /// HQ and `Resolution(alpha)` responses with identical decode params.
    pub fn generate_paired(
        &self,
        instance: &QaInstance,
        alpha: f64,
        decode: &DecodeParams,
    ) -> Result<(ResponseRecord, ResponseRecord), PolicyError> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(PolicyError::Config(format!(
                "paired alpha {alpha} outside (0, 1)"
            )));
        }
        let hq = self.generate(instance, &ViewSpec::Hq, decode)?;
        let lq = self.generate(instance, &ViewSpec::Resolution { alpha }, decode)?;
        Ok((hq, lq))
    }

    /// Runs `requests` on up to `jobs` workers; results keep request order.
    pub fn generate_many(
        &self,
        requests: &[(&QaInstance, ViewSpec, DecodeParams)],
        jobs: usize,
    ) -> Vec<Result<ResponseRecord, PolicyError>> {
        let run = || {
            requests
                .par_iter()
                .map(|(inst, view, decode)| self.generate(inst, view, decode))
                .collect()
        };
        match rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
        {
            Ok(pool) => pool.install(run),
            Err(_) => run(),
        }
    }
}
