//! Text generation clients.
//!
//! [`MockClient`] replays scripted replies deterministically and records every
//! request it sees. [`HttpClient`] speaks the OpenAI-compatible
//! chat-completions protocol with bounded exponential-backoff retries.

use std::collections::VecDeque;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tracing::{debug, warn};

use crate::trajectory::{split_word_tokens, TokenRecord};

/// Logprob assigned to tokens whose logprob is unknown.
pub const DEFAULT_LOGPROB: f64 = -1.0;
pub const MAX_STOP_SEQUENCES: usize = 8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ClientError {
    #[error("scripted client has no replies left")]
    ScriptExhausted,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { message: String, attempts: u32 },
    #[error("rate limited after {attempts} attempt(s) (retry after {retry_after_ms:?} ms)")]
    RateLimited {
        retry_after_ms: Option<u64>,
        attempts: u32,
    },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("client not configured: {0}")]
    NotConfigured(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub messages: Vec<Message>,
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop_sequences: Vec<String>,
}

impl GenerationRequest {
    pub fn new(messages: Vec<Message>, max_tokens: u32) -> Self {
        GenerationRequest {
            messages,
            max_tokens,
            temperature: 0.0,
            stop_sequences: Vec::new(),
        }
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_stop(mut self, stop: &[&str]) -> Self {
        self.stop_sequences = stop.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn validate(&self) -> Result<(), ClientError> {
        if self.max_tokens == 0 {
            return Err(ClientError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if self.stop_sequences.len() > MAX_STOP_SEQUENCES {
            return Err(ClientError::InvalidRequest(format!(
                "at most {MAX_STOP_SEQUENCES} stop sequences, got {}",
                self.stop_sequences.len()
            )));
        }
        if !(self.temperature >= 0.0) {
            return Err(ClientError::InvalidRequest("temperature must be >= 0".into()));
        }
        if self.stop_sequences.iter().any(String::is_empty) {
            return Err(ClientError::InvalidRequest("empty stop sequence".into()));
        }
        Ok(())
    }

    /// Concatenated content of all messages with the given role.
    pub fn content_of(&self, role: Role) -> String {
        self.messages
            .iter()
            .filter(|m| m.role == role)
            .map(|m| m.content.as_str())
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Content of a trailing assistant message being continued, if any.
    pub fn partial_assistant(&self) -> Option<&str> {
        self.messages
            .last()
            .filter(|m| m.role == Role::Assistant)
            .map(|m| m.content.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    StopSequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub text: String,
    pub finish_reason: FinishReason,
    pub token_logprobs: Option<Vec<(String, f64)>>,
}

impl Generation {
    /// Model token records covering `text` exactly.
    ///
    /// Uses the server's token logprobs when they reproduce the text,
    /// otherwise splits on whitespace and spreads the average logprob.
    pub fn token_records(&self) -> Vec<TokenRecord> {
        if let Some(lps) = &self.token_logprobs {
            let joined: String = lps.iter().map(|(t, _)| t.as_str()).collect();
            if joined == self.text {
                return lps
                    .iter()
                    .map(|(t, lp)| TokenRecord::model(t.clone(), lp.min(0.0)))
                    .collect();
            }
            let words = split_word_tokens(&self.text);
            let total: f64 = lps.iter().map(|(_, lp)| lp.min(0.0)).sum();
            let avg = if words.is_empty() {
                0.0
            } else {
                total / words.len() as f64
            };
            return words
                .into_iter()
                .map(|w| TokenRecord::model(w, avg))
                .collect();
        }
        split_word_tokens(&self.text)
            .into_iter()
            .map(|w| TokenRecord::model(w, DEFAULT_LOGPROB))
            .collect()
    }

    pub fn token_count(&self) -> usize {
        match &self.token_logprobs {
            Some(lps) => lps.len(),
            None => split_word_tokens(&self.text).len(),
        }
    }
}

pub trait LlmClient: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<Generation, ClientError>;
}

impl<C: LlmClient + ?Sized> LlmClient for &C {
    fn generate(&self, req: &GenerationRequest) -> Result<Generation, ClientError> {
        (**self).generate(req)
    }
}

impl<C: LlmClient + ?Sized> LlmClient for Arc<C> {
    fn generate(&self, req: &GenerationRequest) -> Result<Generation, ClientError> {
        (**self).generate(req)
    }
}

impl<C: LlmClient + ?Sized> LlmClient for Box<C> {
    fn generate(&self, req: &GenerationRequest) -> Result<Generation, ClientError> {
        (**self).generate(req)
    }
}

/// One scripted reply, as a token sequence with logprobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScriptedReply {
    Tokens { tokens: Vec<(String, f64)> },
    Text { text: String },
}

impl ScriptedReply {
    pub fn text(text: impl Into<String>) -> Self {
        ScriptedReply::Text { text: text.into() }
    }

    pub fn tokens(tokens: Vec<(String, f64)>) -> Self {
        ScriptedReply::Tokens { tokens }
    }

    fn into_tokens(self) -> Vec<(String, f64)> {
        match self {
            ScriptedReply::Tokens { tokens } => tokens,
            ScriptedReply::Text { text } => split_word_tokens(&text)
                .into_iter()
                .map(|t| (t.to_string(), DEFAULT_LOGPROB))
                .collect(),
        }
    }
}

impl From<&str> for ScriptedReply {
    fn from(s: &str) -> Self {
        ScriptedReply::text(s)
    }
}

impl From<String> for ScriptedReply {
    fn from(s: String) -> Self {
        ScriptedReply::text(s)
    }
}

type Responder = dyn Fn(&GenerationRequest) -> Option<ScriptedReply> + Send + Sync;

/// Deterministic client for tests and offline runs.
///
/// Replies come either from a FIFO script or from a responder function of
/// the request. Stop sequences are checked after every appended token,
/// before the `max_tokens` cap.
pub struct MockClient {
    script: Mutex<VecDeque<ScriptedReply>>,
    responder: Option<Box<Responder>>,
    transcript: Mutex<Vec<GenerationRequest>>,
}

impl MockClient {
    pub fn scripted<I, R>(replies: I) -> Self
    where
        I: IntoIterator<Item = R>,
        R: Into<ScriptedReply>,
    {
        MockClient {
            script: Mutex::new(replies.into_iter().map(Into::into).collect()),
            responder: None,
            transcript: Mutex::new(Vec::new()),
        }
    }

    /// Client whose reply is a pure function of the request, so concurrent
    /// callers get the same answers regardless of scheduling.
    pub fn with_responder<F>(f: F) -> Self
    where
        F: Fn(&GenerationRequest) -> Option<ScriptedReply> + Send + Sync + 'static,
    {
        MockClient {
            script: Mutex::new(VecDeque::new()),
            responder: Some(Box::new(f)),
            transcript: Mutex::new(Vec::new()),
        }
    }

    pub fn transcript(&self) -> Vec<GenerationRequest> {
        self.transcript
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
    }

    pub fn calls(&self) -> usize {
        self.transcript
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .len()
    }

    pub fn remaining(&self) -> usize {
        self.script.lock().unwrap_or_else(|e| e.into_inner()).len()
    }
}

impl LlmClient for MockClient {
    fn generate(&self, req: &GenerationRequest) -> Result<Generation, ClientError> {
        req.validate()?;
        self.transcript
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(req.clone());
        let reply = match &self.responder {
            Some(f) => f(req),
            None => self
                .script
                .lock()
                .unwrap_or_else(|e| e.into_inner())
                .pop_front(),
        }
        .ok_or(ClientError::ScriptExhausted)?;
        Ok(truncate_tokens(reply.into_tokens(), req))
    }
}

/// Applies stop-sequence and length truncation token by token.
fn truncate_tokens(tokens: Vec<(String, f64)>, req: &GenerationRequest) -> Generation {
    let max_stop = req.stop_sequences.iter().map(String::len).max().unwrap_or(0);
    let mut text = String::new();
    let mut kept: Vec<(String, f64)> = Vec::new();
    let total = tokens.len();
    for (i, (tok, lp)) in tokens.into_iter().enumerate() {
        let prev_len = text.len();
        text.push_str(&tok);
        kept.push((tok, lp));
        let mut from = prev_len.saturating_sub(max_stop.saturating_sub(1));
        while !text.is_char_boundary(from) {
            from -= 1;
        }
        let hit = req
            .stop_sequences
            .iter()
            .filter_map(|s| text[from..].find(s.as_str()).map(|p| from + p))
            .min();
        if let Some(cut) = hit {
            text.truncate(cut);
            let mut offset = 0;
            let mut cut_tokens = Vec::new();
            for (t, lp) in kept {
                if offset >= cut {
                    break;
                }
                let end = offset + t.len();
                if end <= cut {
                    cut_tokens.push((t, lp));
                } else {
                    cut_tokens.push((t[..cut - offset].to_string(), lp));
                }
                offset = end;
            }
            return Generation {
                text,
                finish_reason: FinishReason::StopSequence,
                token_logprobs: Some(cut_tokens),
            };
        }
        if i + 1 == req.max_tokens as usize && i + 1 < total {
            return Generation {
                text,
                finish_reason: FinishReason::Length,
                token_logprobs: Some(kept),
            };
        }
    }
    Generation {
        text,
        finish_reason: FinishReason::Stop,
        token_logprobs: Some(kept),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HttpClientConfig {
    /// Base URL up to and including the API version, e.g. `http://localhost:8000/v1`.
    pub base_url: String,
    pub model: String,
    #[serde(skip)]
    pub api_key: Option<String>,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub initial_backoff_ms: u64,
    /// Ask the server to continue a trailing assistant message instead of
    /// opening a new turn (vLLM-style `continue_final_message`).
    pub continue_final_message: bool,
}

impl Default for HttpClientConfig {
    fn default() -> Self {
        HttpClientConfig {
            base_url: String::new(),
            model: String::new(),
            api_key: None,
            timeout_secs: 600,
            max_attempts: 3,
            initial_backoff_ms: 500,
            continue_final_message: true,
        }
    }
}

pub struct HttpClient {
    config: HttpClientConfig,
    http: reqwest::blocking::Client,
}

enum Attempt {
    Retry(ClientError),
    Fatal(ClientError),
}

impl HttpClient {
    pub fn new(config: HttpClientConfig) -> Result<Self, ClientError> {
        if config.base_url.is_empty() {
            return Err(ClientError::NotConfigured(
                "base URL missing (set THOR_API_BASE or client.base_url)".into(),
            ));
        }
        if config.api_key.as_deref().unwrap_or("").is_empty() {
            return Err(ClientError::NotConfigured(
                "credential missing (set THOR_API_KEY)".into(),
            ));
        }
        if config.max_attempts == 0 {
            return Err(ClientError::NotConfigured("max_attempts must be >= 1".into()));
        }
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| ClientError::NotConfigured(e.to_string()))?;
        Ok(HttpClient { config, http })
    }

    fn endpoint(&self) -> String {
        format!("{}/chat/completions", self.config.base_url.trim_end_matches('/'))
    }

    pub fn request_body(&self, req: &GenerationRequest) -> Value {
        let messages: Vec<Value> = req
            .messages
            .iter()
            .map(|m| json!({"role": m.role, "content": m.content}))
            .collect();
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "max_tokens": req.max_tokens,
            "temperature": req.temperature,
            "logprobs": true,
        });
        if !req.stop_sequences.is_empty() {
            body["stop"] = json!(req.stop_sequences);
        }
        if self.config.continue_final_message && req.partial_assistant().is_some() {
            body["continue_final_message"] = json!(true);
            body["add_generation_prompt"] = json!(false);
        }
        body
    }

    fn attempt(&self, body: &Value, attempt: u32) -> Result<Generation, Attempt> {
        let resp = self
            .http
            .post(self.endpoint())
            .bearer_auth(self.config.api_key.as_deref().unwrap_or_default())
            .json(body)
            .send()
            .map_err(|e| {
                Attempt::Retry(ClientError::Transport {
                    message: e.to_string(),
                    attempts: attempt,
                })
            })?;
        let status = resp.status();
        if status.as_u16() == 429 {
            let retry_after_ms = resp
                .headers()
                .get("retry-after")
                .and_then(|v| v.to_str().ok())
                .and_then(|v| v.trim().parse::<f64>().ok())
                .map(|secs| (secs * 1000.0) as u64);
            return Err(Attempt::Retry(ClientError::RateLimited {
                retry_after_ms,
                attempts: attempt,
            }));
        }
        let text = resp.text().map_err(|e| {
            Attempt::Retry(ClientError::Transport {
                message: e.to_string(),
                attempts: attempt,
            })
        })?;
        if status.is_server_error() {
            return Err(Attempt::Retry(ClientError::Transport {
                message: format!("server returned {status}: {text}"),
                attempts: attempt,
            }));
        }
        if !status.is_success() {
            return Err(Attempt::Fatal(ClientError::Protocol(format!(
                "server returned {status}: {text}"
            ))));
        }
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Attempt::Fatal(ClientError::Protocol(format!("invalid JSON: {e}"))))?;
        parse_chat_response(&value).map_err(Attempt::Fatal)
    }
}

impl LlmClient for HttpClient {
    fn generate(&self, req: &GenerationRequest) -> Result<Generation, ClientError> {
        req.validate()?;
        let body = self.request_body(req);
        let mut last = None;
        for attempt in 1..=self.config.max_attempts {
            match self.attempt(&body, attempt) {
                Ok(generation) => return Ok(generation),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Retry(e)) => {
                    if attempt < self.config.max_attempts {
                        let backoff = self.config.initial_backoff_ms << (attempt - 1);
                        let wait = match &e {
                            ClientError::RateLimited {
                                retry_after_ms: Some(ms),
                                ..
                            } => (*ms).max(backoff),
                            _ => backoff,
                        };
                        warn!(attempt, wait_ms = wait, error = %e, "retrying generation request");
                        thread::sleep(Duration::from_millis(wait));
                    }
                    last = Some(e);
                }
            }
        }
        Err(last.expect("at least one attempt"))
    }
}

/// Parses a chat-completions response body.
pub fn parse_chat_response(value: &Value) -> Result<Generation, ClientError> {
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| ClientError::Protocol("response has no choices".into()))?;
    let text = choice
        .get("message")
        .and_then(|m| m.get("content"))
        .and_then(Value::as_str)
        .ok_or_else(|| ClientError::Protocol("choice has no message content".into()))?
        .to_string();
    let stop_reason_is_string = choice
        .get("stop_reason")
        .is_some_and(|s| s.is_string());
    let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
        Some("length") => FinishReason::Length,
        Some("stop") if stop_reason_is_string => FinishReason::StopSequence,
        Some("stop") | Some("eos") | None => FinishReason::Stop,
        Some(other) => {
            debug!(finish_reason = other, "unrecognised finish_reason, treating as stop");
            FinishReason::Stop
        }
    };
    let token_logprobs = choice
        .get("logprobs")
        .and_then(|l| l.get("content"))
        .and_then(Value::as_array)
        .map(|items| {
            items
                .iter()
                .filter_map(|it| {
                    let tok = it.get("token")?.as_str()?.to_string();
                    let lp = it.get("logprob")?.as_f64()?;
                    Some((tok, lp))
                })
                .collect::<Vec<_>>()
        });
    Ok(Generation {
        text,
        finish_reason,
        token_logprobs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;

    fn req(max_tokens: u32, stop: &[&str]) -> GenerationRequest {
        GenerationRequest::new(vec![Message::user("q")], max_tokens).with_stop(stop)
    }

    #[test]
    fn stop_sequence_truncates_at_fence() {
        let mock = MockClient::scripted(["hello ```python\nprint(1)\n```\nrest"]);
        let g = mock.generate(&req(100, &["```\n"])).unwrap();
        assert_eq!(g.text, "hello ```python\nprint(1)\n");
        assert_eq!(g.finish_reason, FinishReason::StopSequence);
        assert!(!g.text.contains("```\n") || !g.text.ends_with("```\n"));
        let joined: String = g.token_logprobs.unwrap().into_iter().map(|(t, _)| t).collect();
        assert_eq!(joined, g.text);
    }

    #[test]
    fn empty_script_is_exhausted() {
        let mock = MockClient::scripted(Vec::<ScriptedReply>::new());
        assert_eq!(mock.generate(&req(10, &[])), Err(ClientError::ScriptExhausted));
    }

    #[test]
    fn length_cap() {
        let mock = MockClient::scripted(["a b c d e f g h i j"]);
        let g = mock.generate(&req(3, &[])).unwrap();
        assert_eq!(g.finish_reason, FinishReason::Length);
        assert_eq!(g.token_logprobs.as_ref().unwrap().len(), 3);
        assert_eq!(g.text, "a b c ");
    }

    #[test]
    fn stop_checked_before_length() {
        let mock = MockClient::scripted(["a b STOP d"]);
        let g = mock.generate(&req(3, &["STOP"])).unwrap();
        assert_eq!(g.finish_reason, FinishReason::StopSequence);
        assert_eq!(g.text, "a b ");
        assert_eq!(g.token_logprobs.unwrap().len(), 2);
    }

    #[test]
    fn stop_spanning_tokens() {
        let mock = MockClient::scripted([ScriptedReply::tokens(vec![
            ("x`".into(), -0.1),
            ("``".into(), -0.2),
            ("\ny".into(), -0.3),
        ])]);
        let g = mock.generate(&req(10, &["```\n"])).unwrap();
        assert_eq!(g.text, "x");
        assert_eq!(g.token_logprobs.unwrap(), vec![("x".to_string(), -0.1)]);
    }

    #[test]
    fn default_logprobs_and_determinism() {
        let a = MockClient::scripted(["one two"]).generate(&req(10, &[])).unwrap();
        let b = MockClient::scripted(["one two"]).generate(&req(10, &[])).unwrap();
        assert_eq!(a, b);
        assert!(a
            .token_logprobs
            .unwrap()
            .iter()
            .all(|(_, lp)| *lp == DEFAULT_LOGPROB));
    }

    #[test]
    fn request_validation() {
        assert!(req(0, &[]).validate().is_err());
        let many: Vec<&str> = vec!["a"; 9];
        assert!(req(1, &many).validate().is_err());
        assert!(req(1, &["a"; 8]).validate().is_ok());
    }

    #[test]
    fn transcript_records_requests() {
        let mock = MockClient::scripted(["x", "y"]);
        mock.generate(&req(5, &[])).unwrap();
        assert_eq!(mock.calls(), 1);
        assert_eq!(mock.remaining(), 1);
        assert_eq!(mock.transcript()[0].messages[0].content, "q");
    }

    #[test]
    fn parses_chat_response() {
        let v = json!({
            "choices": [{
                "message": {"role": "assistant", "content": "ab"},
                "finish_reason": "stop",
                "stop_reason": "```\n",
                "logprobs": {"content": [{"token": "a", "logprob": -0.5}, {"token": "b", "logprob": -0.25}]}
            }]
        });
        let g = parse_chat_response(&v).unwrap();
        assert_eq!(g.text, "ab");
        assert_eq!(g.finish_reason, FinishReason::StopSequence);
        assert_eq!(g.token_records().len(), 2);
        assert!(parse_chat_response(&json!({"choices": []})).is_err());
    }

    #[test]
    fn http_client_requires_credential() {
        let cfg = HttpClientConfig {
            base_url: "http://127.0.0.1:1/v1".into(),
            ..HttpClientConfig::default()
        };
        assert!(matches!(HttpClient::new(cfg), Err(ClientError::NotConfigured(_))));
    }

    /// Serves the given (status, body) pairs to successive connections and
    /// returns the raw request bodies it received.
    fn serve(responses: Vec<(u16, String)>) -> (String, thread::JoinHandle<Vec<String>>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let handle = thread::spawn(move || {
            let mut bodies = Vec::new();
            for (status, body) in responses {
                let (mut stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut content_length = 0usize;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        content_length = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0u8; content_length];
                reader.read_exact(&mut buf).unwrap();
                bodies.push(String::from_utf8(buf).unwrap());
                let reply = format!(
                    "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                stream.write_all(reply.as_bytes()).unwrap();
            }
            bodies
        });
        (format!("http://{addr}/v1"), handle)
    }

    fn ok_body() -> String {
        json!({"choices": [{"message": {"content": "\\boxed{4}"}, "finish_reason": "stop"}]}).to_string()
    }

    fn http(base_url: String) -> HttpClient {
        HttpClient::new(HttpClientConfig {
            base_url,
            model: "m".into(),
            api_key: Some("k".into()),
            initial_backoff_ms: 1,
            ..HttpClientConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn http_retries_429_and_5xx_then_succeeds() {
        let (url, server) = serve(vec![
            (429, "{}".into()),
            (503, "{}".into()),
            (200, ok_body()),
        ]);
        let client = http(url);
        let mut r = GenerationRequest::new(
            vec![Message::user("2+2?"), Message::assistant("Let me see. ")],
            16,
        )
        .with_stop(&["```\n"]);
        r.temperature = 0.6;
        let g = client.generate(&r).unwrap();
        assert_eq!(g.text, "\\boxed{4}");
        let bodies = server.join().unwrap();
        assert_eq!(bodies.len(), 3);
        let sent: Value = serde_json::from_str(&bodies[0]).unwrap();
        assert_eq!(sent["model"], "m");
        assert_eq!(sent["max_tokens"], 16);
        assert_eq!(sent["stop"], json!(["```\n"]));
        assert_eq!(sent["logprobs"], true);
        assert_eq!(sent["messages"][1]["role"], "assistant");
        assert_eq!(sent["continue_final_message"], true);
    }

    #[test]
    fn http_gives_up_after_three_attempts() {
        let (url, server) = serve(vec![(500, "{}".into()), (500, "{}".into()), (500, "{}".into())]);
        let err = http(url).generate(&req(4, &[])).unwrap_err();
        assert!(matches!(err, ClientError::Transport { attempts: 3, .. }), "{err:?}");
        assert_eq!(server.join().unwrap().len(), 3);
    }

    #[test]
    fn http_client_error_is_not_retried() {
        let (url, server) = serve(vec![(400, "{\"error\":\"bad\"}".into())]);
        let err = http(url).generate(&req(4, &[])).unwrap_err();
        assert!(matches!(err, ClientError::Protocol(_)));
        assert_eq!(server.join().unwrap().len(), 1);
    }
}
