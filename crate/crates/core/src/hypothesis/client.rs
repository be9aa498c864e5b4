//! Chat-completion client. One wire shape (`model`, `messages`, `temperature`,
//! `max_tokens`), configurable auth header, and a mock provider keyed by the
//! SHA-256 of the exact prompt so offline runs are reproducible.

use std::collections::HashMap;
use std::path::Path;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{parse_llm_response, HypothesisError, HypothesisSet};

pub const DEFAULT_API_KEY_ENV: &str = "LADDER_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpRetryPolicy {
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
}

impl Default for HttpRetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, initial_backoff_ms: 500, multiplier: 2.0 }
    }
}

impl HttpRetryPolicy {
    fn delay(&self, attempt: u32) -> Duration {
        let ms = self.initial_backoff_ms as f64 * self.multiplier.powi(attempt as i32);
        Duration::from_millis(ms.min(60_000.0) as u64)
    }
}

/// Endpoint settings. The prompt itself is passed per call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmRequest {
    pub endpoint: String,
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub api_key_env: String,
    pub timeout_secs: u64,
    /// Header carrying the key; `Authorization` for most hosted APIs.
    pub auth_header: String,
    /// Prefix put before the key, e.g. `Bearer`. Empty sends the raw key.
    pub auth_scheme: String,
    pub retry: HttpRetryPolicy,
}

impl Default for LlmRequest {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: String::new(),
            temperature: 0.0,
            max_tokens: 2048,
            api_key_env: DEFAULT_API_KEY_ENV.to_string(),
            timeout_secs: 120,
            auth_header: "Authorization".to_string(),
            auth_scheme: "Bearer".to_string(),
            retry: HttpRetryPolicy::default(),
        }
    }
}

impl LlmRequest {
    pub fn validate(&self) -> Result<(), HypothesisError> {
        let bad = |m: &str| Err(HypothesisError::InvalidRequest(m.to_string()));
        if !(0.0..=2.0).contains(&self.temperature) {
            return bad("temperature must lie in [0, 2]");
        }
        if self.endpoint.is_empty() {
            return bad("endpoint is empty");
        }
        if self.model.is_empty() {
            return bad("model is empty");
        }
        if self.max_tokens == 0 {
            return bad("max_tokens must be positive");
        }
        Ok(())
    }

    fn auth_headers(&self) -> Vec<(String, String)> {
        match std::env::var(&self.api_key_env) {
            Ok(key) if !key.is_empty() => {
                let value = if self.auth_scheme.is_empty() { key } else { format!("{} {key}", self.auth_scheme) };
                vec![(self.auth_header.clone(), value)]
            }
            _ => {
                log::warn!("{} is unset; sending request without credentials", self.api_key_env);
                Vec::new()
            }
        }
    }
}

#[derive(Debug)]
pub(crate) enum HttpFailure {
    Status { status: u16, body: String },
    Transport(String),
}

fn retryable_status(status: u16) -> bool {
    status == 408 || status == 429 || (500..600).contains(&status)
}

/// POSTs `body` and returns the response text on 2xx. Transport failures and
/// 408/429/5xx are retried with exponential backoff.
pub(crate) fn post_json(
    url: &str,
    headers: &[(String, String)],
    body: &Value,
    timeout: Duration,
    retry: &HttpRetryPolicy,
) -> Result<String, HttpFailure> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(timeout))
        .http_status_as_error(false)
        .build()
        .into();
    let mut attempt = 0;
    loop {
        let mut req = agent.post(url).header("Content-Type", "application/json");
        for (k, v) in headers {
            req = req.header(k.as_str(), v.as_str());
        }
        let outcome: Result<String, HttpFailure> = match req.send_json(body) {
            Ok(mut resp) => {
                let status = resp.status().as_u16();
                let text = resp.body_mut().read_to_string().map_err(|e| e.to_string());
                match (status, text) {
                    (200..=299, Ok(text)) => return Ok(text),
                    (200..=299, Err(e)) => Err(HttpFailure::Transport(e)),
                    (_, text) => Err(HttpFailure::Status { status, body: text.unwrap_or_default() }),
                }
            }
            Err(e) => Err(HttpFailure::Transport(e.to_string())),
        };
        let failure = outcome.unwrap_err();
        let transient = match &failure {
            HttpFailure::Status { status, .. } => retryable_status(*status),
            HttpFailure::Transport(_) => true,
        };
        if !transient || attempt >= retry.max_retries {
            return Err(failure);
        }
        let wait = retry.delay(attempt);
        log::warn!("request to {url} failed ({failure:?}); retry {} in {wait:?}", attempt + 1);
        thread::sleep(wait);
        attempt += 1;
    }
}

pub fn prompt_sha256(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()).as_slice())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockEntry {
    pub prompt_sha256: String,
    pub response: String,
}

impl MockEntry {
    pub fn for_prompt(prompt: &str, response: impl Into<String>) -> Self {
        Self { prompt_sha256: prompt_sha256(prompt), response: response.into() }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MockProvider {
    responses: HashMap<String, String>,
}

impl MockProvider {
    pub fn from_entries(entries: impl IntoIterator<Item = MockEntry>) -> Self {
        Self {
            responses: entries.into_iter().map(|e| (e.prompt_sha256, e.response)).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, HypothesisError> {
        let io = |e: &dyn std::fmt::Display| HypothesisError::Io { path: path.to_path_buf(), message: e.to_string() };
        let text = std::fs::read_to_string(path).map_err(|e| io(&e))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: MockEntry =
                serde_json::from_str(line).map_err(|e| io(&format!("line {}: {e}", i + 1)))?;
            entries.push(entry);
        }
        Ok(Self::from_entries(entries))
    }

    pub fn len(&self) -> usize {
        self.responses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.responses.is_empty()
    }

    pub fn respond(&self, prompt: &str) -> Result<String, HypothesisError> {
        let key = prompt_sha256(prompt);
        self.responses.get(&key).cloned().ok_or(HypothesisError::MockMissing(key))
    }
}

#[derive(Debug, Clone)]
pub enum LlmProvider {
    Http(LlmRequest),
    Mock(MockProvider),
}

/// Stateless apart from configuration; safe to share across threads.
#[derive(Debug, Clone)]
pub struct LlmClient {
    provider: LlmProvider,
}

fn extract_content(raw: &str) -> Result<String, HypothesisError> {
    let malformed = |m: &str| HypothesisError::Parse { message: m.to_string(), raw: raw.to_string() };
    let v: Value = serde_json::from_str(raw).map_err(|e| malformed(&format!("response body is not JSON: {e}")))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| malformed("response has no choices[0].message.content"))
}

impl LlmClient {
    pub fn new(provider: LlmProvider) -> Result<Self, HypothesisError> {
        if let LlmProvider::Http(req) = &provider {
            req.validate()?;
        }
        Ok(Self { provider })
    }

    pub fn provider(&self) -> &LlmProvider {
        &self.provider
    }

    /// Sends a single user message and returns the assistant text.
    pub fn complete(&self, prompt: &str) -> Result<String, HypothesisError> {
        if prompt.is_empty() {
            return Err(HypothesisError::InvalidRequest("prompt is empty".into()));
        }
        let req = match &self.provider {
            LlmProvider::Mock(mock) => return mock.respond(prompt),
            LlmProvider::Http(req) => req,
        };
        let body = json!({
            "model": req.model,
            "messages": [{"role": "user", "content": prompt}],
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        let raw = post_json(
            &req.endpoint,
            &req.auth_headers(),
            &body,
            Duration::from_secs(req.timeout_secs),
            &req.retry,
        )
        .map_err(|f| match f {
            HttpFailure::Status { status: status @ (401 | 403), .. } => HypothesisError::Auth { status },
            HttpFailure::Status { status, body } => HypothesisError::Http {
                status: Some(status),
                message: body.chars().take(500).collect(),
            },
            HttpFailure::Transport(message) => HypothesisError::Http { status: None, message },
        })?;
        extract_content(&raw)
    }

    pub fn generate_hypotheses(&self, prompt: &str) -> Result<HypothesisSet, HypothesisError> {
        parse_llm_response(&self.complete(prompt)?)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::atomic::{AtomicUsize, Ordering};
    use std::sync::Arc;

    /// Serves `replies` (status, body) in order, one per connection, and
    /// returns the base URL plus a request counter.
    pub(crate) fn serve(replies: Vec<(u16, String)>) -> (String, Arc<AtomicUsize>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        thread::spawn(move || {
            for (status, body) in replies {
                let Ok((stream, _)) = listener.accept() else { return };
                let mut reader = BufReader::new(stream);
                let mut len = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 {
                        break;
                    }
                    let lower = line.to_ascii_lowercase();
                    if let Some(v) = lower.strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap_or(0);
                    }
                    if line == "\r\n" {
                        break;
                    }
                }
                let mut buf = vec![0; len];
                let _ = reader.read_exact(&mut buf);
                counter.fetch_add(1, Ordering::SeqCst);
                let mut stream = reader.into_inner();
                let _ = write!(
                    stream,
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                    body.len()
                );
            }
        });
        (url, hits)
    }

    fn http_client(url: String) -> LlmClient {
        LlmClient::new(LlmProvider::Http(LlmRequest {
            endpoint: url,
            model: "m".into(),
            timeout_secs: 5,
            api_key_env: "LADDER_TEST_UNSET_KEY".into(),
            retry: HttpRetryPolicy { max_retries: 3, initial_backoff_ms: 1, multiplier: 2.0 },
            ..LlmRequest::default()
        }))
        .unwrap()
    }

    const RESPONSE: &str = "hypothesis_dict = {'H1': 'biased toward water'}\nprompt_dict = {'H1_water': ['a bird over water']}";

    fn chat_body(content: &str) -> String {
        json!({"choices": [{"message": {"role": "assistant", "content": content}}]}).to_string()
    }

    #[test]
    fn mock_passthrough_is_deterministic() {
        let mock = MockProvider::from_entries([MockEntry::for_prompt("p", RESPONSE)]);
        let client = LlmClient::new(LlmProvider::Mock(mock)).unwrap();
        let a = client.generate_hypotheses("p").unwrap();
        let b = client.generate_hypotheses("p").unwrap();
        assert_eq!(a, b);
        assert_eq!(a.hypotheses[0].attribute, "water");
        assert!(matches!(client.complete("other"), Err(HypothesisError::MockMissing(_))));
    }

    #[test]
    fn mock_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mock.jsonl");
        let line = serde_json::to_string(&MockEntry::for_prompt("p", RESPONSE)).unwrap();
        std::fs::write(&path, format!("{line}\n\n")).unwrap();
        let mock = MockProvider::load(&path).unwrap();
        assert_eq!(mock.len(), 1);
        assert_eq!(mock.respond("p").unwrap(), RESPONSE);
    }

    #[test]
    fn sha256_of_known_input() {
        assert_eq!(prompt_sha256("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    }

    #[test]
    fn request_validation() {
        let base = LlmRequest { endpoint: "http://x".into(), model: "m".into(), ..LlmRequest::default() };
        assert!(base.validate().is_ok());
        assert!(LlmRequest { temperature: 2.5, ..base.clone() }.validate().is_err());
        assert!(LlmRequest { temperature: -0.1, ..base.clone() }.validate().is_err());
        assert!(LlmRequest { endpoint: String::new(), ..base }.validate().is_err());
    }

    #[test]
    fn unauthorized_maps_to_auth_error_without_retry() {
        let (url, hits) = serve(vec![(401, "{}".into()), (200, chat_body(RESPONSE))]);
        let err = http_client(url).generate_hypotheses("p").unwrap_err();
        assert!(matches!(err, HypothesisError::Auth { status: 401 }));
        assert_eq!(hits.load(Ordering::SeqCst), 1);
    }

    #[test]
    fn malformed_body_carries_raw_text() {
        let (url, _) = serve(vec![(200, "not json at all".into())]);
        match http_client(url).generate_hypotheses("p") {
            Err(HypothesisError::Parse { raw, .. }) => assert_eq!(raw, "not json at all"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn transient_failures_are_retried() {
        let (url, hits) = serve(vec![(500, "{}".into()), (429, "{}".into()), (200, chat_body(RESPONSE))]);
        let set = http_client(url).generate_hypotheses("p").unwrap();
        assert_eq!(set.hypotheses.len(), 1);
        assert_eq!(hits.load(Ordering::SeqCst), 3);
    }

    #[test]
    fn retries_are_bounded() {
        let (url, hits) = serve(vec![(503, "busy".into()); 5]);
        let err = http_client(url).complete("p").unwrap_err();
        assert!(matches!(err, HypothesisError::Http { status: Some(503), .. }));
        assert_eq!(hits.load(Ordering::SeqCst), 4);
    }
}
