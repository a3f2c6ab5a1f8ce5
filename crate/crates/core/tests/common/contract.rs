//! Remote backend contract checks against a scripted stub server. Each
//! check returns `Err` with a description on the first violation.

use std::collections::HashMap;

use iclmc::prompting::RenderedPrompt;
use iclmc::scorer::{self, RemoteConfig, RemoteScorer, ScoreError};
use serde_json::json;

use super::{echo_response, StubResponse, StubServer};

fn ensure(cond: bool, what: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what())
    }
}

fn fast_config(url: &str) -> RemoteConfig {
    let mut c = RemoteConfig::new(url);
    c.initial_backoff_ms = 1;
    c.max_backoff_ms = 4;
    c.max_in_flight = 2;
    c
}

fn table_server(table: &[(&str, f64)], default: f64) -> StubServer {
    let table: HashMap<String, f64> = table.iter().map(|(t, v)| (t.to_string(), *v)).collect();
    StubServer::start(true, move |req, _| {
        let prompt = req.json()["prompt"].as_str().unwrap_or_default().to_string();
        StubResponse::ok(echo_response(&prompt, |tok| table.get(tok).copied().unwrap_or(default)))
    })
}

fn prompt(text: &str) -> RenderedPrompt {
    RenderedPrompt {
        text: text.into(),
        prefix_ids: vec![],
        query_id: "q0".into(),
    }
}

/// The score of a continuation is the sum of its tokens' log-probabilities;
/// context tokens do not count.
pub fn summed_logprob() -> Result<(), String> {
    let server = table_server(&[(" good", -1.0), (" very", -1.0), (":", -9.0)], -3.0);
    let scores = scorer::score_remote(
        &fast_config(&server.url),
        "Review: good",
        &[" very good".to_string(), " bad".to_string()],
    )
    .map_err(|e| e.to_string())?;
    ensure(scores[0].score == -2.0, || format!("expected -2.0 for \" very good\", got {}", scores[0].score))?;
    ensure(scores[1].score == -3.0, || format!("expected -3.0 for \" bad\", got {}", scores[1].score))?;
    ensure(server.requests() == 2, || format!("expected one request per candidate, saw {}", server.requests()))
}

/// Equal scores resolve to the lowest class index.
pub fn tie_break() -> Result<(), String> {
    let server = table_server(&[], -0.75);
    let backend = RemoteScorer::new(fast_config(&server.url)).map_err(|e| e.to_string())?;
    let candidates: Vec<String> = [" alpha", " beta", " gamma"].iter().map(|s| s.to_string()).collect();
    let c = scorer::classify(&backend, &prompt("Text: x\nAnswer:"), &candidates).map_err(|e| e.to_string())?;
    ensure(c.scores.iter().all(|s| s.score == -0.75), || format!("unexpected scores {:?}", c.scores))?;
    ensure(c.predicted == 0, || format!("tie resolved to class {}, expected 0", c.predicted))
}

/// Three 500 responses followed by success: the request is retried and
/// scoring succeeds.
pub fn retry_then_succeed() -> Result<(), String> {
    let server = StubServer::start(true, |req, i| {
        if i < 3 {
            StubResponse::status(500)
        } else {
            let prompt = req.json()["prompt"].as_str().unwrap_or_default().to_string();
            StubResponse::ok(echo_response(&prompt, |_| -0.5))
        }
    });
    let scores = scorer::score_remote(&fast_config(&server.url), "a b", &[" c".to_string(), " d".to_string()])
        .map_err(|e| e.to_string())?;
    ensure(scores.iter().all(|s| s.score == -0.5), || format!("unexpected scores {scores:?}"))?;
    ensure(server.requests() == 5, || format!("expected 3 failed + 2 successful requests, saw {}", server.requests()))?;
    let log = server.log();
    ensure(log[0].body == log[3].body, || "retried request body differs from the original".into())
}

/// Persistent 503: the client gives up after `max_retries` retries with a
/// transport error naming the query.
pub fn retries_exhausted() -> Result<(), String> {
    let server = StubServer::start(true, |_, _| StubResponse::status(503));
    let mut config = fast_config(&server.url);
    config.max_retries = 2;
    let backend = RemoteScorer::new(config).map_err(|e| e.to_string())?;
    match backend.score_text("q7", "x", &[" y".to_string(), " z".to_string()]) {
        Err(ScoreError::Transport {
            query_id, attempts, ..
        }) => {
            ensure(query_id == "q7", || format!("error names query {query_id}"))?;
            ensure(attempts == 3, || format!("expected 3 attempts, got {attempts}"))?;
            ensure(server.requests() == 3, || format!("expected 3 requests, saw {}", server.requests()))
        }
        other => Err(format!("expected a transport error, got {other:?}")),
    }
}

/// A success response without `logprobs` is a protocol error naming the
/// missing field, and is not retried. Other 4xx statuses are not retried
/// either.
pub fn protocol_error() -> Result<(), String> {
    let server = StubServer::start(true, |_, _| StubResponse::ok(json!({"choices": [{"text": "x"}]})));
    match scorer::score_remote(&fast_config(&server.url), "a", &[" b".to_string(), " c".to_string()]) {
        Err(e @ ScoreError::Protocol { .. }) => {
            ensure(e.to_string().contains("choices[0].logprobs"), || format!("error does not name the field: {e}"))?;
            ensure(server.requests() == 1, || format!("protocol error was retried: {} requests", server.requests()))?;
        }
        other => return Err(format!("expected a protocol error, got {other:?}")),
    }
    let server = StubServer::start(true, |_, _| StubResponse::status(400));
    match scorer::score_remote(&fast_config(&server.url), "a", &[" b".to_string(), " c".to_string()]) {
        Err(ScoreError::Transport { attempts: 1, .. }) => {
            ensure(server.requests() == 1, || format!("400 was retried: {} requests", server.requests()))
        }
        other => Err(format!("expected a fatal transport error, got {other:?}")),
    }
}

/// Requests carry the bearer token from the configured environment
/// variable and the deterministic echo-scoring parameters; repeated scoring
/// sends identical bodies.
pub fn request_shape() -> Result<(), String> {
    const VAR: &str = "ICLMC_CONTRACT_TEST_TOKEN";
    std::env::set_var(VAR, "sekrit");
    let server = table_server(&[], -1.0);
    let mut config = fast_config(&server.url);
    config.api_key_env = Some(VAR.into());
    config.model = Some("tiny".into());
    let backend = RemoteScorer::new(config).map_err(|e| e.to_string())?;
    let candidates = [" yes".to_string(), " no".to_string()];
    let first = backend.score_text("q", "Is it?", &candidates).map_err(|e| e.to_string())?;
    let second = backend.score_text("q", "Is it?", &candidates).map_err(|e| e.to_string())?;
    ensure(first == second, || "repeated scoring differs".into())?;
    let log = server.log();
    ensure(log.len() == 4, || format!("expected 4 requests, saw {}", log.len()))?;
    for req in &log {
        ensure(req.method == "POST" && req.path == "/v1/completions", || format!("{} {}", req.method, req.path))?;
        ensure(req.headers.get("authorization").map(String::as_str) == Some("Bearer sekrit"), || {
            format!("authorization header {:?}", req.headers.get("authorization"))
        })?;
        let body = req.json();
        ensure(
            body["echo"] == json!(true)
                && body["max_tokens"] == json!(0)
                && body["temperature"].as_f64() == Some(0.0)
                && body["logprobs"].is_number()
                && body["model"] == json!("tiny"),
            || format!("unexpected request body {body}"),
        )?;
    }
    ensure(log[0].json()["prompt"] == json!("Is it? yes"), || format!("prompt {}", log[0].json()["prompt"]))?;
    ensure(log[0].body == log[2].body && log[1].body == log[3].body, || "request bodies differ between runs".into())
}

pub type Check = fn() -> Result<(), String>;

pub const ALL: [(&str, Check); 6] = [
    ("summed log-probability scoring", summed_logprob),
    ("tie-breaking", tie_break),
    ("retry then succeed", retry_then_succeed),
    ("retries exhausted", retries_exhausted),
    ("protocol error", protocol_error),
    ("request shape and bearer token", request_shape),
];
