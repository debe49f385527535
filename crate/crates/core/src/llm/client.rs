//! Minimal blocking client for OpenAI-compatible `/v1/chat/completions`.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use log::{debug, warn};
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

pub const DEFAULT_TEMPERATURE: f64 = 1.0;
pub const DEFAULT_MAX_TOKENS: u32 = 4096;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub system: String,
    pub user: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, system: impl Into<String>, user: impl Into<String>) -> Self {
        ChatRequest {
            model: model.into(),
            system: system.into(),
            user: user.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }

    /// Request body in the chat-completions wire format.
    pub fn body(&self) -> serde_json::Value {
        json!({
            "model": self.model,
            "messages": [
                {"role": "system", "content": self.system},
                {"role": "user", "content": self.user},
            ],
            "temperature": self.temperature,
            "max_tokens": self.max_tokens,
        })
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChatError {
    #[error("transport error: {0}")]
    TransportError(String),
    #[error("http status {status}: {body}")]
    HttpStatusError { status: u16, body: String },
    #[error("request budget exhausted")]
    BudgetExhausted,
    #[error("malformed API response: {0}")]
    MalformedApiResponse(String),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HttpResponse {
    pub status: u16,
    pub body: String,
}

/// Sends one JSON body and returns the raw HTTP response.
pub trait ChatTransport: Send + Sync {
    fn post(&self, body: &serde_json::Value) -> Result<HttpResponse, String>;
}

/// reqwest-backed transport with bearer authentication.
pub struct HttpTransport {
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpTransport {
    /// `endpoint` is either a base URL (`http://host:port` or `.../v1`) or the
    /// full chat-completions URL.
    pub fn new(endpoint: &str, api_key: Option<String>, timeout: Duration) -> Result<Self, ChatError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| ChatError::TransportError(e.to_string()))?;
        Ok(HttpTransport {
            url: chat_url(endpoint),
            api_key,
            client,
        })
    }
}

pub fn chat_url(endpoint: &str) -> String {
    let e = endpoint.trim_end_matches('/');
    if e.ends_with("/chat/completions") {
        e.to_string()
    } else if e.ends_with("/v1") {
        format!("{e}/chat/completions")
    } else {
        format!("{e}/v1/chat/completions")
    }
}

impl ChatTransport for HttpTransport {
    fn post(&self, body: &serde_json::Value) -> Result<HttpResponse, String> {
        let mut req = self.client.post(&self.url).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.text().map_err(|e| e.to_string())?;
        Ok(HttpResponse { status, body })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 4,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

impl RetryPolicy {
    pub fn delay(&self, attempt: u32) -> Duration {
        let ms = self
            .base_delay_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_delay_ms);
        Duration::from_millis(ms)
    }
}

/// A successful completion.
#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub content: String,
    /// HTTP attempts made, including retries.
    pub attempts: usize,
}

/// Counting semaphore bounding in-flight requests.
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn enter(&self) {
        let mut f = self.free.lock().unwrap();
        while *f == 0 {
            f = self.cv.wait(f).unwrap();
        }
        *f -= 1;
    }

    fn leave(&self) {
        *self.free.lock().unwrap() += 1;
        self.cv.notify_one();
    }
}

pub struct ChatClient {
    transport: Box<dyn ChatTransport>,
    retry: RetryPolicy,
    /// Remaining chat requests; `u64::MAX` means unlimited.
    budget: AtomicU64,
    attempts: AtomicUsize,
    completions: AtomicUsize,
    gate: Gate,
}

impl ChatClient {
    pub fn new(transport: Box<dyn ChatTransport>, retry: RetryPolicy) -> Self {
        ChatClient {
            transport,
            retry,
            budget: AtomicU64::new(u64::MAX),
            attempts: AtomicUsize::new(0),
            completions: AtomicUsize::new(0),
            gate: Gate {
                free: Mutex::new(8),
                cv: Condvar::new(),
            },
        }
    }

    pub fn with_budget(self, requests: u64) -> Self {
        self.budget.store(requests, Ordering::SeqCst);
        self
    }

    pub fn with_max_in_flight(self, n: usize) -> Self {
        *self.gate.free.lock().unwrap() = n.max(1);
        self
    }

    pub fn remaining_budget(&self) -> Option<u64> {
        let b = self.budget.load(Ordering::SeqCst);
        (b != u64::MAX).then_some(b)
    }

    /// Total HTTP attempts issued (retries included).
    pub fn attempts(&self) -> usize {
        self.attempts.load(Ordering::SeqCst)
    }

    pub fn completions(&self) -> usize {
        self.completions.load(Ordering::SeqCst)
    }

    fn take_budget(&self) -> Result<(), ChatError> {
        self.budget
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |b| match b {
                u64::MAX => Some(b),
                0 => None,
                n => Some(n - 1),
            })
            .map(|_| ())
            .map_err(|_| ChatError::BudgetExhausted)
    }

    pub fn chat(&self, request: &ChatRequest) -> Result<Completion, ChatError> {
        self.take_budget()?;
        self.gate.enter();
        let out = self.chat_with_retries(request);
        self.gate.leave();
        if out.is_ok() {
            self.completions.fetch_add(1, Ordering::SeqCst);
        }
        out
    }

    fn chat_with_retries(&self, request: &ChatRequest) -> Result<Completion, ChatError> {
        let body = request.body();
        let mut attempt = 0u32;
        loop {
            self.attempts.fetch_add(1, Ordering::SeqCst);
            let error = match self.transport.post(&body) {
                Ok(resp) if (200..300).contains(&resp.status) => {
                    debug!("chat attempt {} succeeded ({})", attempt + 1, request.model);
                    return extract_content(&resp.body).map(|content| Completion {
                        content,
                        attempts: attempt as usize + 1,
                    });
                }
                Ok(resp) => ChatError::HttpStatusError {
                    status: resp.status,
                    body: resp.body,
                },
                Err(e) => ChatError::TransportError(e),
            };
            let retryable = match &error {
                ChatError::TransportError(_) => true,
                ChatError::HttpStatusError { status, .. } => *status == 429 || *status >= 500,
                _ => false,
            };
            if !retryable || attempt >= self.retry.max_retries {
                return Err(error);
            }
            warn!("chat attempt {} failed ({error}); retrying", attempt + 1);
            std::thread::sleep(self.retry.delay(attempt));
            attempt += 1;
        }
    }
}

/// First choice's message content.
pub fn extract_content(body: &str) -> Result<String, ChatError> {
    let v: serde_json::Value =
        serde_json::from_str(body).map_err(|e| ChatError::MalformedApiResponse(e.to_string()))?;
    v.pointer("/choices/0/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_string)
        .ok_or_else(|| ChatError::MalformedApiResponse("missing choices[0].message.content".into()))
}

/// Completion body in the chat-completions wire format, for mock servers.
pub fn completion_body(content: &str) -> String {
    json!({
        "id": "chatcmpl-mock",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
    })
    .to_string()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;
    use std::sync::Arc;

    struct Scripted {
        replies: Mutex<VecDeque<Result<HttpResponse, String>>>,
        seen: Arc<Mutex<Vec<serde_json::Value>>>,
    }

    impl ChatTransport for Scripted {
        fn post(&self, body: &serde_json::Value) -> Result<HttpResponse, String> {
            self.seen.lock().unwrap().push(body.clone());
            self.replies.lock().unwrap().pop_front().expect("script exhausted")
        }
    }

    fn client(replies: Vec<Result<HttpResponse, String>>) -> (ChatClient, Arc<Mutex<Vec<serde_json::Value>>>) {
        let seen = Arc::new(Mutex::new(Vec::new()));
        let t = Scripted {
            replies: Mutex::new(replies.into()),
            seen: seen.clone(),
        };
        let retry = RetryPolicy {
            max_retries: 3,
            base_delay_ms: 1,
            max_delay_ms: 2,
        };
        (ChatClient::new(Box::new(t), retry), seen)
    }

    fn ok(content: &str) -> Result<HttpResponse, String> {
        Ok(HttpResponse {
            status: 200,
            body: completion_body(content),
        })
    }

    #[test]
    fn defaults() {
        let r = ChatRequest::new("m", "s", "u");
        assert_eq!(r.temperature, 1.0);
        assert_eq!(r.max_tokens, 4096);
        let b = r.body();
        assert_eq!(b["messages"][0]["role"], "system");
        assert_eq!(b["messages"][1]["content"], "u");
    }

    #[test]
    fn pass_through() {
        let (c, seen) = client(vec![ok("hello <CODE>x</CODE>")]);
        let out = c.chat(&ChatRequest::new("m", "s", "u")).unwrap();
        assert_eq!(out.content, "hello <CODE>x</CODE>");
        assert_eq!(out.attempts, 1);
        assert_eq!(seen.lock().unwrap().len(), 1);
    }

    #[test]
    fn retries_429_once() {
        let (c, seen) = client(vec![
            Ok(HttpResponse {
                status: 429,
                body: "slow down".into(),
            }),
            ok("fine"),
        ]);
        let out = c.chat(&ChatRequest::new("m", "s", "u")).unwrap();
        assert_eq!(out.content, "fine");
        assert_eq!(out.attempts, 2);
        assert_eq!(c.attempts(), 2);
        assert_eq!(seen.lock().unwrap().len(), 2);
    }

    #[test]
    fn client_errors_are_not_retried() {
        let (c, _) = client(vec![Ok(HttpResponse {
            status: 401,
            body: "nope".into(),
        })]);
        assert!(matches!(
            c.chat(&ChatRequest::new("m", "s", "u")),
            Err(ChatError::HttpStatusError { status: 401, .. })
        ));
        assert_eq!(c.attempts(), 1);
    }

    #[test]
    fn gives_up_after_max_retries() {
        let (c, _) = client((0..4).map(|_| Err("refused".to_string())).collect());
        assert!(matches!(
            c.chat(&ChatRequest::new("m", "s", "u")),
            Err(ChatError::TransportError(_))
        ));
        assert_eq!(c.attempts(), 4);
    }

    #[test]
    fn zero_budget_issues_no_request() {
        let (c, seen) = client(vec![]);
        let c = c.with_budget(0);
        assert_eq!(
            c.chat(&ChatRequest::new("m", "s", "u")),
            Err(ChatError::BudgetExhausted)
        );
        assert!(seen.lock().unwrap().is_empty());
    }

    #[test]
    fn budget_counts_down() {
        let (c, _) = client(vec![ok("a"), ok("b")]);
        let c = c.with_budget(1);
        assert!(c.chat(&ChatRequest::new("m", "s", "u")).is_ok());
        assert_eq!(c.remaining_budget(), Some(0));
        assert_eq!(
            c.chat(&ChatRequest::new("m", "s", "u")),
            Err(ChatError::BudgetExhausted)
        );
    }

    #[test]
    fn malformed_body() {
        let (c, _) = client(vec![Ok(HttpResponse {
            status: 200,
            body: "{\"choices\": []}".into(),
        })]);
        assert!(matches!(
            c.chat(&ChatRequest::new("m", "s", "u")),
            Err(ChatError::MalformedApiResponse(_))
        ));
    }

    #[test]
    fn url_forms() {
        assert_eq!(chat_url("http://h:1"), "http://h:1/v1/chat/completions");
        assert_eq!(chat_url("http://h:1/v1/"), "http://h:1/v1/chat/completions");
        assert_eq!(chat_url("http://h/v1/chat/completions"), "http://h/v1/chat/completions");
    }

    #[test]
    fn backoff_grows_and_caps() {
        let p = RetryPolicy {
            max_retries: 10,
            base_delay_ms: 100,
            max_delay_ms: 1000,
        };
        assert_eq!(p.delay(0), Duration::from_millis(100));
        assert_eq!(p.delay(2), Duration::from_millis(400));
        assert_eq!(p.delay(9), Duration::from_millis(1000));
    }
}
