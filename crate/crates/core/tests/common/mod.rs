//! Shared helpers for integration tests: a scripted HTTP stub of the
//! completions endpoint and small on-disk experiment fixtures.
#![allow(dead_code)]

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use serde_json::{json, Value};

pub mod contract;

#[derive(Debug, Clone)]
pub struct StubRequest {
    pub method: String,
    pub path: String,
    /// Header names are lowercased.
    pub headers: HashMap<String, String>,
    pub body: String,
}

impl StubRequest {
    pub fn json(&self) -> Value {
        serde_json::from_str(&self.body).expect("request body is JSON")
    }
}

#[derive(Debug, Clone)]
pub struct StubResponse {
    pub status: u16,
    pub body: String,
}

impl StubResponse {
    pub fn ok(body: Value) -> Self {
        Self {
            status: 200,
            body: body.to_string(),
        }
    }

    pub fn status(status: u16) -> Self {
        Self {
            status,
            body: json!({"error": {"message": "scripted failure"}}).to_string(),
        }
    }
}

type Handler = dyn Fn(&StubRequest, usize) -> StubResponse + Send + Sync;

/// A minimal HTTP/1.1 server with keep-alive, one thread per connection.
/// The handler receives each request with its global arrival index.
pub struct StubServer {
    pub url: String,
    count: Arc<AtomicUsize>,
    log: Option<Arc<Mutex<Vec<StubRequest>>>>,
}

impl StubServer {
    /// `record` keeps every request for inspection; leave it off for
    /// high-volume runs.
    pub fn start<F>(record: bool, handler: F) -> Self
    where
        F: Fn(&StubRequest, usize) -> StubResponse + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").expect("bind stub server");
        let url = format!("http://{}/v1/completions", listener.local_addr().unwrap());
        let count = Arc::new(AtomicUsize::new(0));
        let log = record.then(|| Arc::new(Mutex::new(Vec::new())));
        let handler: Arc<Handler> = Arc::new(handler);
        {
            let count = Arc::clone(&count);
            let log = log.clone();
            thread::spawn(move || {
                for stream in listener.incoming() {
                    let Ok(stream) = stream else { continue };
                    let (count, log, handler) = (Arc::clone(&count), log.clone(), Arc::clone(&handler));
                    thread::spawn(move || serve(stream, &count, log.as_deref(), &*handler));
                }
            });
        }
        Self { url, count, log }
    }

    pub fn requests(&self) -> usize {
        self.count.load(Ordering::SeqCst)
    }

    pub fn log(&self) -> Vec<StubRequest> {
        self.log.as_ref().expect("server records requests").lock().unwrap().clone()
    }
}

fn read_request(reader: &mut BufReader<TcpStream>) -> Option<StubRequest> {
    let mut line = String::new();
    if reader.read_line(&mut line).ok()? == 0 {
        return None;
    }
    let mut parts = line.split_whitespace();
    let method = parts.next()?.to_string();
    let path = parts.next()?.to_string();
    let mut headers = HashMap::new();
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).ok()?;
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        let (name, value) = h.split_once(':')?;
        headers.insert(name.trim().to_ascii_lowercase(), value.trim().to_string());
    }
    let mut body = Vec::new();
    if let Some(len) = headers.get("content-length") {
        body.resize(len.parse().ok()?, 0);
        reader.read_exact(&mut body).ok()?;
    } else if headers.get("transfer-encoding").is_some_and(|v| v.eq_ignore_ascii_case("chunked")) {
        loop {
            let mut size = String::new();
            reader.read_line(&mut size).ok()?;
            let size = usize::from_str_radix(size.trim(), 16).ok()?;
            let mut chunk = vec![0; size + 2];
            reader.read_exact(&mut chunk).ok()?;
            if size == 0 {
                break;
            }
            body.extend_from_slice(&chunk[..size]);
        }
    }
    Some(StubRequest {
        method,
        path,
        headers,
        body: String::from_utf8(body).ok()?,
    })
}

fn serve(stream: TcpStream, count: &AtomicUsize, log: Option<&Mutex<Vec<StubRequest>>>, handler: &Handler) {
    let _ = stream.set_nodelay(true);
    let mut writer = stream.try_clone().expect("clone stream");
    let mut reader = BufReader::new(stream);
    while let Some(req) = read_request(&mut reader) {
        let index = count.fetch_add(1, Ordering::SeqCst);
        if let Some(log) = log {
            log.lock().unwrap().push(req.clone());
        }
        let resp = handler(&req, index);
        let reason = match resp.status {
            200 => "OK",
            400 => "Bad Request",
            404 => "Not Found",
            429 => "Too Many Requests",
            500 => "Internal Server Error",
            503 => "Service Unavailable",
            _ => "Status",
        };
        let head = format!(
            "HTTP/1.1 {} {reason}\r\nContent-Type: application/json\r\nContent-Length: {}\r\n\r\n",
            resp.status,
            resp.body.len()
        );
        if writer.write_all(head.as_bytes()).is_err() || writer.write_all(resp.body.as_bytes()).is_err() {
            return;
        }
        if req.headers.get("connection").is_some_and(|v| v.eq_ignore_ascii_case("close")) {
            return;
        }
    }
}

/// Split text into whitespace-led word tokens, returning (token, char offset).
pub fn word_tokens(text: &str) -> Vec<(String, usize)> {
    let mut out: Vec<(String, usize)> = Vec::new();
    let mut current = String::new();
    let mut start = 0;
    let mut prev_space = false;
    for (i, c) in text.chars().enumerate() {
        let space = c.is_whitespace();
        if space && !prev_space && !current.is_empty() && i > 0 {
            out.push((std::mem::take(&mut current), start));
            start = i;
        }
        current.push(c);
        prev_space = space;
    }
    if !current.is_empty() {
        out.push((current, start));
    }
    out
}

/// Echo response with one log-probability per word token; the first token
/// has none, as with real completions endpoints.
pub fn echo_response(prompt: &str, logprob: impl Fn(&str) -> f64) -> Value {
    let tokens = word_tokens(prompt);
    let lps: Vec<Value> = tokens
        .iter()
        .enumerate()
        .map(|(i, (t, _))| if i == 0 { Value::Null } else { json!(logprob(t)) })
        .collect();
    json!({
        "choices": [{
            "text": prompt,
            "logprobs": {
                "tokens": tokens.iter().map(|(t, _)| t).collect::<Vec<_>>(),
                "token_logprobs": lps,
                "text_offset": tokens.iter().map(|(_, o)| o).collect::<Vec<_>>(),
            }
        }]
    })
}

/// Compact echo: the whole context as one token and the final
/// whitespace-led word as the scored token, with a log-probability derived
/// from a hash of the full prompt. Keeps responses small for bulk runs.
pub fn compact_response(prompt: &str) -> Value {
    let chars: Vec<char> = prompt.chars().collect();
    let mut boundary = chars.len().saturating_sub(1);
    while boundary > 0 && !chars[boundary].is_whitespace() {
        boundary -= 1;
    }
    // FNV-1a
    let mut h: u64 = 0xcbf29ce484222325;
    for b in prompt.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let lp = -((h % 1000) as f64) / 100.0;
    json!({"choices": [{"logprobs": {"token_logprobs": [null, lp], "text_offset": [0, boundary]}}]})
}

pub fn compact_server() -> StubServer {
    StubServer::start(false, |req, _| {
        let prompt = req.json()["prompt"].as_str().unwrap_or_default().to_string();
        StubResponse::ok(compact_response(&prompt))
    })
}

// ---------------------------------------------------------------------------
// On-disk fixtures
// ---------------------------------------------------------------------------

/// Write a JSONL dataset with a `split` column: `n_train` train rows with
/// labels cycling over the classes and `n_eval` validation rows.
pub fn write_dataset(dir: &Path, n_train: usize, n_eval: usize, classes: usize) -> PathBuf {
    let path = dir.join("data.jsonl");
    let mut text = String::new();
    for i in 0..n_train {
        text.push_str(&json!({"idx": format!("t{i}"), "sentence": format!("train sentence {i}"), "label": i % classes, "split": "train"}).to_string());
        text.push('\n');
    }
    for i in 0..n_eval {
        text.push_str(&json!({"idx": format!("e{i}"), "sentence": format!("eval sentence {i}"), "label": (i * 7 + 3) % classes, "split": "validation"}).to_string());
        text.push('\n');
    }
    std::fs::write(&path, text).unwrap();
    path
}

pub fn class_list(classes: usize) -> String {
    let names: Vec<String> = (0..classes).map(|c| format!("\"class{c}\"")).collect();
    format!("[{}]", names.join(", "))
}

/// Config text for `data.jsonl` in the same directory.
pub fn config_text(classes: usize, run: &str, backend: &str) -> String {
    format!(
        "out_dir = \"out\"\n\n[dataset]\npath = \"data.jsonl\"\nclasses = {}\nfields = [\"sentence\"]\nid_key = \"idx\"\nsplit_key = \"split\"\n\n[run]\n{run}\n\n[backend]\n{backend}\n",
        class_list(classes)
    )
}

/// Write `config.toml` next to a fresh dataset and return its path.
pub fn write_experiment(dir: &Path, n_train: usize, n_eval: usize, classes: usize, run: &str, backend: &str) -> PathBuf {
    write_dataset(dir, n_train, n_eval, classes);
    let path = dir.join("config.toml");
    std::fs::write(&path, config_text(classes, run, backend)).unwrap();
    path
}

/// Mock smoke run: K=3, P=4, 2 trials on a 20-query eval split.
pub const SMOKE_RUN: &str = "k = 3\npermutations = 4\ntrials = 2\nseed = 7\neval_subsample = 256\nconcurrency = 4";

pub fn smoke_experiment(dir: &Path) -> PathBuf {
    write_experiment(dir, 12, 20, 2, SMOKE_RUN, "kind = \"mock\"\nmode = \"hash\"\nsalt = 11")
}

fn spawn(args: &[&str]) -> std::process::Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_iclmc"))
        .args(args)
        .output()
        .expect("spawn iclmc")
}

/// Run the `iclmc` binary; returns the exit code. Output is captured and
/// echoed to stderr when the command fails.
pub fn iclmc(args: &[&str]) -> i32 {
    let out = spawn(args);
    let code = out.status.code().unwrap_or(-1);
    if code != 0 {
        eprintln!(
            "iclmc {} exited with {code}\n{}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        );
    }
    code
}

/// Run the `iclmc` binary; returns (exit code, stdout, stderr).
pub fn iclmc_output(args: &[&str]) -> (i32, String, String) {
    let out = spawn(args);
    (
        out.status.code().unwrap_or(-1),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

/// Every file directly inside `dir`, by name, excluding the cache.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_file())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), std::fs::read(e.path()).unwrap()))
        .filter(|(name, _)| name != "cache.jsonl")
        .collect();
    files.sort();
    files
}
