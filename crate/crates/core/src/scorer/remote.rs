//! Completions-protocol client that scores candidate continuations.
//!
//! Each candidate is sent as its own request: the prompt followed by the
//! candidate continuation, with `echo: true`, `max_tokens: 0`, `logprobs`
//! and `temperature: 0`. The candidate score is the sum of the echoed
//! log-probabilities of the tokens that overlap the continuation, located
//! through `text_offset` (character offsets into the submitted text).

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::PathBuf;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{CandidateScore, ScoreError, Scorer};
use crate::prompting::RenderedPrompt;
use crate::seeding;

fn default_max_in_flight() -> usize {
    8
}
fn default_max_retries() -> u32 {
    4
}
fn default_initial_backoff_ms() -> u64 {
    250
}
fn default_max_backoff_ms() -> u64 {
    8_000
}
fn default_timeout_ms() -> u64 {
    60_000
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteConfig {
    /// Full URL of the completions endpoint.
    pub endpoint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_max_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_initial_backoff_ms")]
    pub initial_backoff_ms: u64,
    #[serde(default = "default_max_backoff_ms")]
    pub max_backoff_ms: u64,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    /// Divide each candidate's summed log-probability by its token count.
    #[serde(default)]
    pub normalize_by_tokens: bool,
    /// Reject prompts longer than this many characters.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_prompt_chars: Option<usize>,
    /// Append request/response digests here, one JSON object per line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit_log: Option<PathBuf>,
}

impl RemoteConfig {
    pub fn new(endpoint: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: None,
            api_key_env: None,
            max_in_flight: default_max_in_flight(),
            max_retries: default_max_retries(),
            initial_backoff_ms: default_initial_backoff_ms(),
            max_backoff_ms: default_max_backoff_ms(),
            timeout_ms: default_timeout_ms(),
            normalize_by_tokens: false,
            max_prompt_chars: None,
            audit_log: None,
        }
    }

    pub fn validate(&self) -> Result<(), ScoreError> {
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(ScoreError::Config(format!(
                "endpoint {:?} must be an http(s) URL",
                self.endpoint
            )));
        }
        if self.max_in_flight == 0 {
            return Err(ScoreError::Config("max_in_flight must be at least 1".into()));
        }
        Ok(())
    }

    fn backoff(&self, retry: u32) -> Duration {
        let factor = 1u64.checked_shl(retry.min(32)).unwrap_or(u64::MAX);
        Duration::from_millis(
            self.initial_backoff_ms
                .saturating_mul(factor)
                .min(self.max_backoff_ms),
        )
    }
}

/// Counting semaphore bounding in-flight requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Gate);

impl Gate {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.free.lock().expect("gate lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("gate lock");
        }
        *free -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("gate lock") += 1;
        self.0.cv.notify_one();
    }
}

#[derive(Serialize)]
struct AuditEntry<'a> {
    query_id: &'a str,
    attempt: u32,
    status: Option<u16>,
    request_sha256: String,
    response_sha256: Option<String>,
}

pub struct RemoteScorer {
    config: RemoteConfig,
    agent: ureq::Agent,
    token: Option<String>,
    gate: Gate,
    audit: Option<Mutex<File>>,
}

impl std::fmt::Debug for RemoteScorer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteScorer")
            .field("endpoint", &self.config.endpoint)
            .field("model", &self.config.model)
            .finish_non_exhaustive()
    }
}

enum Attempt {
    Done(Value),
    Retry(String),
    Fatal(String),
}

impl RemoteScorer {
    pub fn new(config: RemoteConfig) -> Result<Self, ScoreError> {
        config.validate()?;
        let token = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                ScoreError::Config(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let audit = match &config.audit_log {
            Some(path) => Some(Mutex::new(
                OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(path)
                    .map_err(|e| {
                        ScoreError::Config(format!("cannot open audit log {}: {e}", path.display()))
                    })?,
            )),
            None => None,
        };
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .max_idle_connections_per_host(config.max_in_flight.max(1))
            .build()
            .into();
        Ok(Self {
            gate: Gate::new(config.max_in_flight),
            config,
            agent,
            token,
            audit,
        })
    }

    pub fn config(&self) -> &RemoteConfig {
        &self.config
    }

    fn audit(&self, entry: AuditEntry<'_>) {
        if let Some(file) = &self.audit {
            let mut line = serde_json::to_string(&entry).expect("audit entry serializes");
            line.push('\n');
            // Audit failures must not fail scoring.
            let _ = file.lock().expect("audit lock").write_all(line.as_bytes());
        }
    }

    fn attempt(&self, query_id: &str, attempt: u32, body: &Value, body_digest: &str) -> Attempt {
        let _permit = self.gate.acquire();
        let mut request = self
            .agent
            .post(&self.config.endpoint)
            .header("Content-Type", "application/json");
        if let Some(token) = &self.token {
            request = request.header("Authorization", &format!("Bearer {token}"));
        }
        let mut response = match request.send_json(body) {
            Ok(r) => r,
            Err(e) => {
                self.audit(AuditEntry {
                    query_id,
                    attempt,
                    status: None,
                    request_sha256: body_digest.to_string(),
                    response_sha256: None,
                });
                return match e {
                    ureq::Error::BadUri(_) | ureq::Error::Http(_) | ureq::Error::InvalidProxyUrl => {
                        Attempt::Fatal(e.to_string())
                    }
                    other => Attempt::Retry(other.to_string()),
                };
            }
        };
        let status = response.status().as_u16();
        let text = response.body_mut().read_to_string();
        self.audit(AuditEntry {
            query_id,
            attempt,
            status: Some(status),
            request_sha256: body_digest.to_string(),
            response_sha256: text.as_ref().ok().map(seeding::sha256_hex),
        });
        let text = match text {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(format!("reading response body: {e}")),
        };
        match status {
            200..=299 => match serde_json::from_str(&text) {
                Ok(v) => Attempt::Done(v),
                Err(e) => Attempt::Fatal(format!("response is not JSON: {e}")),
            },
            408 | 429 | 500..=599 => Attempt::Retry(format!("HTTP {status}")),
            _ => Attempt::Fatal(format!("HTTP {status}: {}", truncate(&text, 200))),
        }
    }

    fn post_with_retries(&self, query_id: &str, body: &Value) -> Result<Value, ScoreError> {
        let body_digest = seeding::json_digest(body);
        let total = self.config.max_retries + 1;
        let mut last = String::new();
        for attempt in 1..=total {
            match self.attempt(query_id, attempt, body, &body_digest) {
                Attempt::Done(v) => return Ok(v),
                Attempt::Fatal(message) => {
                    return Err(ScoreError::Transport {
                        query_id: query_id.to_string(),
                        attempts: attempt,
                        message,
                    })
                }
                Attempt::Retry(message) => {
                    last = message;
                    if attempt < total {
                        std::thread::sleep(self.config.backoff(attempt - 1));
                    }
                }
            }
        }
        Err(ScoreError::Transport {
            query_id: query_id.to_string(),
            attempts: total,
            message: last,
        })
    }

    /// Score each candidate continuation of `context`.
    pub fn score_text(
        &self,
        query_id: &str,
        context: &str,
        candidates: &[String],
    ) -> Result<Vec<CandidateScore>, ScoreError> {
        if candidates.is_empty() {
            return Err(ScoreError::TooFewClasses(0));
        }
        let boundary = context.chars().count();
        if let Some(budget) = self.config.max_prompt_chars {
            let longest = candidates.iter().map(|c| c.chars().count()).max().unwrap_or(0);
            if boundary + longest > budget {
                return Err(ScoreError::PromptTooLong {
                    query_id: query_id.to_string(),
                    chars: boundary + longest,
                    budget,
                });
            }
        }
        candidates
            .iter()
            .enumerate()
            .map(|(label, candidate)| {
                let mut body = json!({
                    "prompt": format!("{context}{candidate}"),
                    "max_tokens": 0,
                    "echo": true,
                    "logprobs": 1,
                    "temperature": 0.0,
                });
                if let Some(model) = &self.config.model {
                    body["model"] = Value::String(model.clone());
                }
                let response = self.post_with_retries(query_id, &body)?;
                let (sum, tokens) =
                    continuation_logprob(&response, boundary).map_err(|message| ScoreError::Protocol {
                        query_id: query_id.to_string(),
                        message,
                    })?;
                let score = if self.config.normalize_by_tokens {
                    sum / tokens as f64
                } else {
                    sum
                };
                Ok(CandidateScore { label, score })
            })
            .collect()
    }
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Sum the log-probabilities of echoed tokens overlapping the continuation
/// that starts at character `boundary`. Returns `(sum, token_count)`.
fn continuation_logprob(response: &Value, boundary: usize) -> Result<(f64, usize), String> {
    let logprobs = response
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or("response missing field choices[0]")?
        .get("logprobs")
        .filter(|v| !v.is_null())
        .ok_or("response missing field choices[0].logprobs")?;
    let token_logprobs = logprobs
        .get("token_logprobs")
        .and_then(Value::as_array)
        .ok_or("response missing field choices[0].logprobs.token_logprobs")?;
    let offsets = logprobs
        .get("text_offset")
        .and_then(Value::as_array)
        .ok_or("response missing field choices[0].logprobs.text_offset")?;
    let tokens = logprobs.get("tokens").and_then(Value::as_array);
    if offsets.len() != token_logprobs.len() || tokens.is_some_and(|t| t.len() != offsets.len()) {
        return Err("choices[0].logprobs arrays differ in length".into());
    }
    let mut sum = 0.0;
    let mut count = 0;
    for (i, (offset, lp)) in offsets.iter().zip(token_logprobs).enumerate() {
        let start = offset
            .as_u64()
            .ok_or_else(|| format!("choices[0].logprobs.text_offset[{i}] is not an integer"))?
            as usize;
        let end = match tokens.and_then(|t| t[i].as_str()) {
            Some(tok) => start + tok.chars().count(),
            None => start + 1,
        };
        if end <= boundary {
            continue;
        }
        let value = lp
            .as_f64()
            .ok_or_else(|| format!("choices[0].logprobs.token_logprobs[{i}] is null inside the continuation"))?;
        if !value.is_finite() {
            return Err(format!("choices[0].logprobs.token_logprobs[{i}] is not finite"));
        }
        sum += value;
        count += 1;
    }
    if count == 0 {
        return Err("no echoed tokens cover the continuation".into());
    }
    Ok((sum, count))
}

/// One-shot convenience: build a client for `config` and score `candidates`.
pub fn score_remote(
    config: &RemoteConfig,
    prompt: &str,
    candidates: &[String],
) -> Result<Vec<CandidateScore>, ScoreError> {
    RemoteScorer::new(config.clone())?.score_text("-", prompt, candidates)
}

impl Scorer for RemoteScorer {
    fn identity(&self) -> String {
        format!(
            "remote:{}",
            json!({
                "endpoint": self.config.endpoint,
                "model": self.config.model,
                "normalize_by_tokens": self.config.normalize_by_tokens,
            })
        )
    }

    fn score(&self, prompt: &RenderedPrompt, candidates: &[String]) -> Result<Vec<f64>, ScoreError> {
        Ok(self
            .score_text(&prompt.query_id, &prompt.text, candidates)?
            .into_iter()
            .map(|s| s.score)
            .collect())
    }
}
