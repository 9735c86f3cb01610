//! Zero-shot LLM baseline.
//!
//! Every problem is rendered into a prompt from a template, sent to a
//! chat-completion style HTTP endpoint, and the first JSON array of 0/1 in
//! the reply is taken as the label vector. Raw replies are cached on disk,
//! so a warm re-run performs no network IO and reproduces its report.
//! Replies that cannot be parsed after all retries fall back to all-zero
//! labels and are tallied in the report.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{ChangeLabels, Dataset, Problem};
use crate::error::{Error, Result};
use crate::eval::EvalReport;

/// Approximation of a linguistically informed prompt. Replace it with the
/// exact wording under study via `template_path`.
pub const DEFAULT_TEMPLATE: &str = "\
You are an expert in stylometry and authorship analysis.
The document below consists of {{n_sentences}} numbered sentences written by one or more authors.
For every pair of consecutive sentences, decide whether the writing style changes between them.
Base the decision on style: function words, punctuation habits, capitalization, sentence length,
spelling and register. Do not rely on topic shifts alone.

{{numbered_sentences}}

Answer with a JSON array of exactly {{n_labels}} integers, one per consecutive pair in order:
1 if the style changes between the two sentences, 0 otherwise. Output only the array.
";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the API key.
    pub api_key_env: String,
    pub template_path: Option<PathBuf>,
    pub max_retries: u32,
    pub timeout_secs: f64,
    pub requests_per_minute: f64,
    pub max_in_flight: usize,
    /// Dot-separated path to the reply text in the response JSON; numeric
    /// segments index arrays.
    pub response_content_path: String,
    pub temperature: f64,
    pub cache_dir: PathBuf,
}

impl Default for LlmConfig {
    fn default() -> Self {
        LlmConfig {
            endpoint: "https://api.openai.com/v1/chat/completions".into(),
            model: "claude-3-7-sonnet".into(),
            api_key_env: "SSPC_API_KEY_DEFAULT".into(),
            template_path: None,
            max_retries: 3,
            timeout_secs: 60.0,
            requests_per_minute: 50.0,
            max_in_flight: 1,
            response_content_path: "choices.0.message.content".into(),
            temperature: 0.0,
            cache_dir: PathBuf::from("cache"),
        }
    }
}

impl LlmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.timeout_secs > 0.0) {
            return Err(Error::InvalidArgument("timeout must be positive".into()));
        }
        if !(self.requests_per_minute > 0.0) {
            return Err(Error::InvalidArgument("requests per minute must be positive".into()));
        }
        if self.max_in_flight == 0 {
            return Err(Error::InvalidArgument("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }

    pub fn load_template(&self) -> Result<String> {
        match &self.template_path {
            Some(path) => fs::read_to_string(path).map_err(|e| Error::io(path, e)),
            None => Ok(DEFAULT_TEMPLATE.to_string()),
        }
    }
}

/// Fills `{{n_sentences}}`, `{{numbered_sentences}}` and, when present,
/// `{{n_labels}}`.
pub fn render_prompt(template: &str, problem: &Problem) -> Result<String> {
    for placeholder in ["{{n_sentences}}", "{{numbered_sentences}}"] {
        if !template.contains(placeholder) {
            return Err(Error::InvalidArgument(format!(
                "prompt template lacks {placeholder}"
            )));
        }
    }
    if problem.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "{}: nothing to classify (single sentence)",
            problem.id
        )));
    }
    let numbered = problem
        .sentences
        .iter()
        .enumerate()
        .map(|(i, s)| format!("{}. {s}", i + 1))
        .collect::<Vec<_>>()
        .join("\n");
    Ok(template
        .replace("{{n_sentences}}", &problem.len().to_string())
        .replace("{{n_labels}}", &problem.adjacencies().to_string())
        .replace("{{numbered_sentences}}", &numbered))
}

/// Extracts the first JSON array of integers from `text`.
pub fn parse_llm_response(text: &str, expected_len: usize) -> Result<ChangeLabels> {
    for (start, _) in text.match_indices('[') {
        let Some(len) = text[start..].find(']') else { break };
        let candidate = &text[start..=start + len];
        let Ok(values) = serde_json::from_str::<Vec<serde_json::Value>>(candidate) else {
            continue;
        };
        if values.is_empty() && expected_len > 0 {
            continue;
        }
        if !values.iter().all(|v| v.is_i64() || v.is_u64()) {
            continue;
        }
        let labels = values
            .iter()
            .map(|v| match v.as_i64() {
                Some(0) => Ok(0u8),
                Some(1) => Ok(1u8),
                _ => Err(Error::Llm(format!("label {v} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if labels.len() != expected_len {
            return Err(Error::Llm(format!(
                "expected {expected_len} labels, reply has {}",
                labels.len()
            )));
        }
        return ChangeLabels::new(labels);
    }
    Err(Error::Llm("no JSON array of labels in reply".into()))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Timeouts, rate limiting, server errors, refused connections.
    Retryable(String),
    Auth(String),
    Fatal(String),
}

/// Sends one prompt and returns the reply text.
pub trait ChatTransport: Sync {
    fn complete(&self, prompt: &str) -> std::result::Result<String, TransportError>;
}

/// JSON chat-completion client.
pub struct HttpTransport {
    agent: ureq::Agent,
    endpoint: String,
    model: String,
    temperature: f64,
    content_path: String,
    api_key: Option<String>,
}

impl HttpTransport {
    /// Reads the API key from the environment variable named in `cfg`.
    pub fn from_config(cfg: &LlmConfig) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        HttpTransport {
            agent,
            endpoint: cfg.endpoint.clone(),
            model: cfg.model.clone(),
            temperature: cfg.temperature,
            content_path: cfg.response_content_path.clone(),
            api_key: std::env::var(&cfg.api_key_env).ok(),
        }
    }
}

/// Follows a dot-separated path through a JSON value.
pub fn json_path<'a>(value: &'a serde_json::Value, path: &str) -> Option<&'a serde_json::Value> {
    path.split('.')
        .filter(|s| !s.is_empty())
        .try_fold(value, |v, seg| match seg.parse::<usize>() {
            Ok(i) => v.get(i),
            Err(_) => v.get(seg),
        })
}

impl ChatTransport for HttpTransport {
    fn complete(&self, prompt: &str) -> std::result::Result<String, TransportError> {
        let key = self
            .api_key
            .as_ref()
            .ok_or_else(|| TransportError::Auth("API key environment variable is not set".into()))?;
        let body = serde_json::json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [{ "role": "user", "content": prompt }],
        });
        let response = self
            .agent
            .post(&self.endpoint)
            .header("Authorization", &format!("Bearer {key}"))
            .send_json(&body)
            .map_err(|e| TransportError::Retryable(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response
            .into_body()
            .read_to_string()
            .map_err(|e| TransportError::Retryable(e.to_string()))?;
        match status {
            200..=299 => {}
            401 | 403 => return Err(TransportError::Auth(format!("HTTP {status}"))),
            408 | 429 | 500..=599 => return Err(TransportError::Retryable(format!("HTTP {status}"))),
            _ => return Err(TransportError::Fatal(format!("HTTP {status}: {text}"))),
        }
        let json: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| TransportError::Fatal(format!("response is not JSON: {e}")))?;
        json_path(&json, &self.content_path)
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| TransportError::Fatal(format!("no string at {}", self.content_path)))
    }
}

pub trait Clock: Sync {
    fn now(&self) -> Duration;
    fn sleep(&self, d: Duration);
}

pub struct SystemClock {
    origin: Instant,
}

impl Default for SystemClock {
    fn default() -> Self {
        SystemClock { origin: Instant::now() }
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.origin.elapsed()
    }

    fn sleep(&self, d: Duration) {
        std::thread::sleep(d);
    }
}

/// Clock that only advances when slept on.
#[derive(Default)]
pub struct ManualClock {
    now: Mutex<Duration>,
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        *self.now.lock().expect("clock lock")
    }

    fn sleep(&self, d: Duration) {
        *self.now.lock().expect("clock lock") += d;
    }
}

/// Token bucket of capacity one: consecutive requests are at least
/// `60 / requests_per_minute` seconds apart.
pub struct RateLimiter {
    interval: Duration,
    next_free: Mutex<Option<Duration>>,
}

impl RateLimiter {
    pub fn new(requests_per_minute: f64) -> Self {
        RateLimiter {
            interval: Duration::from_secs_f64(60.0 / requests_per_minute),
            next_free: Mutex::new(None),
        }
    }

    /// Blocks until a request may be sent; returns the send time.
    pub fn acquire(&self, clock: &dyn Clock) -> Duration {
        let mut next = self.next_free.lock().expect("limiter lock");
        let now = clock.now();
        if let Some(at) = *next {
            if at > now {
                clock.sleep(at - now);
            }
        }
        let sent = clock.now();
        *next = Some(sent + self.interval);
        sent
    }
}

pub fn template_hash(template: &str) -> String {
    Sha256::digest(template.as_bytes())
        .iter()
        .take(8)
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CachedResponse {
    model: String,
    problem_id: String,
    template_hash: String,
    response: String,
}

/// `cache/<model>/<template-hash>/<problem-id>.json`
pub struct ResponseCache {
    dir: PathBuf,
    model: String,
    template_hash: String,
    write_lock: Mutex<()>,
}

impl ResponseCache {
    pub fn new(root: &Path, model: &str, template_hash: &str) -> Self {
        let safe_model: String = model
            .chars()
            .map(|c| if c.is_alphanumeric() || "-_.".contains(c) { c } else { '_' })
            .collect();
        ResponseCache {
            dir: root.join(safe_model).join(template_hash),
            model: model.to_string(),
            template_hash: template_hash.to_string(),
            write_lock: Mutex::new(()),
        }
    }

    fn path(&self, problem_id: &str) -> PathBuf {
        self.dir.join(format!("{problem_id}.json"))
    }

    pub fn get(&self, problem_id: &str) -> Option<String> {
        let text = fs::read_to_string(self.path(problem_id)).ok()?;
        let cached: CachedResponse = serde_json::from_str(&text).ok()?;
        (cached.model == self.model && cached.template_hash == self.template_hash)
            .then_some(cached.response)
    }

    pub fn put(&self, problem_id: &str, response: &str) -> Result<()> {
        let _guard = self.write_lock.lock().expect("cache lock");
        fs::create_dir_all(&self.dir).map_err(|e| Error::io(&self.dir, e))?;
        let record = CachedResponse {
            model: self.model.clone(),
            problem_id: problem_id.to_string(),
            template_hash: self.template_hash.clone(),
            response: response.to_string(),
        };
        let path = self.path(problem_id);
        let text = serde_json::to_string_pretty(&record).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmReport {
    pub report: EvalReport,
    pub model: String,
    pub template_hash: String,
    pub network_requests: usize,
    pub cache_hits: usize,
    /// Problems whose labels are the all-zero fallback.
    pub fallbacks: usize,
    pub parse_failures: usize,
    pub transport_failures: usize,
    pub parse_failure_rate: f64,
    pub fallback_problems: Vec<String>,
}

enum Outcome {
    Labels(ChangeLabels),
    ParseFailure,
    TransportFailure,
}

struct Tally {
    network_requests: AtomicUsize,
    cache_hits: AtomicUsize,
}

fn backoff(attempt: u32) -> Duration {
    Duration::from_millis(500u64.saturating_mul(1 << attempt.min(10)))
}

#[allow(clippy::too_many_arguments)]
fn classify_problem(
    problem: &Problem,
    prompt: &str,
    cfg: &LlmConfig,
    transport: &dyn ChatTransport,
    clock: &dyn Clock,
    limiter: &RateLimiter,
    cache: &ResponseCache,
    tally: &Tally,
) -> Result<Outcome> {
    let expected = problem.adjacencies();
    if let Some(cached) = cache.get(&problem.id) {
        tally.cache_hits.fetch_add(1, Ordering::Relaxed);
        return Ok(match parse_llm_response(&cached, expected) {
            Ok(labels) => Outcome::Labels(labels),
            Err(_) => Outcome::ParseFailure,
        });
    }
    let mut last_reply = None;
    let mut transport_failed = false;
    for attempt in 0..=cfg.max_retries {
        if attempt > 0 {
            clock.sleep(backoff(attempt - 1));
        }
        limiter.acquire(clock);
        tally.network_requests.fetch_add(1, Ordering::Relaxed);
        match transport.complete(prompt) {
            Ok(reply) => {
                transport_failed = false;
                if let Ok(labels) = parse_llm_response(&reply, expected) {
                    cache.put(&problem.id, &reply)?;
                    return Ok(Outcome::Labels(labels));
                }
                last_reply = Some(reply);
            }
            Err(TransportError::Auth(msg)) => {
                return Err(Error::Llm(format!("authentication failed: {msg}")));
            }
            Err(TransportError::Retryable(_)) => transport_failed = last_reply.is_none(),
            Err(TransportError::Fatal(_)) => {
                transport_failed = last_reply.is_none();
                break;
            }
        }
    }
    match last_reply {
        Some(reply) if !transport_failed => {
            cache.put(&problem.id, &reply)?;
            Ok(Outcome::ParseFailure)
        }
        Some(_) => Ok(Outcome::ParseFailure),
        None => Ok(Outcome::TransportFailure),
    }
}

/// Runs the baseline over a labeled dataset and scores it. Single-sentence
/// problems need no request and get empty labels.
pub fn run_llm_baseline(
    cfg: &LlmConfig,
    dataset: &Dataset,
    transport: &dyn ChatTransport,
    clock: &dyn Clock,
) -> Result<LlmReport> {
    cfg.validate()?;
    dataset.truths()?;
    let template = cfg.load_template()?;
    let hash = template_hash(&template);
    let cache = ResponseCache::new(&cfg.cache_dir, &cfg.model, &hash);
    let limiter = RateLimiter::new(cfg.requests_per_minute);
    let tally = Tally {
        network_requests: AtomicUsize::new(0),
        cache_hits: AtomicUsize::new(0),
    };

    let prompts = dataset
        .items
        .iter()
        .map(|item| {
            if item.problem.len() < 2 {
                Ok(None)
            } else {
                render_prompt(&template, &item.problem).map(Some)
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let outcomes: Vec<Mutex<Option<Result<Outcome>>>> =
        (0..dataset.len()).map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..cfg.max_in_flight.min(dataset.len().max(1)) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                if k >= dataset.len() {
                    break;
                }
                let problem = &dataset.items[k].problem;
                let outcome = match &prompts[k] {
                    None => Ok(Outcome::Labels(ChangeLabels::default())),
                    Some(prompt) => classify_problem(problem, prompt, cfg, transport, clock, &limiter, &cache, &tally),
                };
                let is_err = outcome.is_err();
                *outcomes[k].lock().expect("outcome lock") = Some(outcome);
                if is_err {
                    next.store(dataset.len(), Ordering::SeqCst);
                }
            });
        }
    });

    let mut predictions = Vec::with_capacity(dataset.len());
    let (mut parse_failures, mut transport_failures) = (0, 0);
    let mut fallback_problems = Vec::new();
    let mut attempted = 0;
    for (item, slot) in dataset.items.iter().zip(outcomes) {
        let outcome = slot.into_inner().expect("outcome lock");
        let Some(outcome) = outcome else {
            continue;
        };
        let problem = &item.problem;
        if problem.len() >= 2 {
            attempted += 1;
        }
        let labels = match outcome? {
            Outcome::Labels(labels) => labels,
            Outcome::ParseFailure => {
                parse_failures += 1;
                fallback_problems.push(problem.id.clone());
                ChangeLabels::zeros(problem.adjacencies())
            }
            Outcome::TransportFailure => {
                transport_failures += 1;
                fallback_problems.push(problem.id.clone());
                ChangeLabels::zeros(problem.adjacencies())
            }
        };
        predictions.push((problem.id.clone(), labels));
    }
    if attempted > 0 && transport_failures == attempted {
        return Err(Error::Llm(format!("endpoint {} unreachable for every problem", cfg.endpoint)));
    }
    let report = EvalReport::from_predictions(&cfg.model, dataset, predictions)?;
    Ok(LlmReport {
        report,
        model: cfg.model.clone(),
        template_hash: hash,
        network_requests: tally.network_requests.into_inner(),
        cache_hits: tally.cache_hits.into_inner(),
        fallbacks: fallback_problems.len(),
        parse_failures,
        transport_failures,
        parse_failure_rate: if attempted == 0 {
            0.0
        } else {
            parse_failures as f64 / attempted as f64
        },
        fallback_problems,
    })
}
