//! Uniform client for chat-completion providers.
//!
//! Two implementations sit behind the [`Provider`] trait: an HTTP client for
//! live chat-completions endpoints (bearer auth, exponential-backoff retries)
//! and a deterministic scripted mock used by tests, batch scenarios, and
//! replay. Token budgeting is a pre-flight check on a characters/4 estimate;
//! exact counts come from provider usage fields after the fact.

use std::collections::VecDeque;
use std::sync::Mutex;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::warn;

#[derive(Debug, Clone, Error)]
pub enum GatewayError {
    #[error("provider failure after {retries} retries: {detail}")]
    ProviderFailure { retries: u32, detail: String },
    #[error("estimated {estimated} tokens exceeds provider limit {limit}")]
    TokenBudgetExceeded { estimated: usize, limit: usize },
    #[error("mock scenario exhausted after {consumed} replies")]
    ScriptExhausted { consumed: usize },
    #[error("auth variable {0} is not set")]
    MissingAuth(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProviderKind {
    Mock,
    Http,
}

/// Connection and budget settings for one model provider.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProviderProfile {
    pub name: String,
    pub kind: ProviderKind,
    #[serde(default)]
    pub endpoint: String,
    #[serde(default)]
    pub model_id: String,
    /// Name of the environment variable holding the bearer token. The
    /// secret itself is never stored or logged.
    #[serde(default)]
    pub auth_env: String,
    #[serde(default = "default_token_limit")]
    pub token_limit: usize,
    #[serde(default = "default_timeout_secs")]
    pub request_timeout_secs: u64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub retry_backoff_ms: u64,
    #[serde(default = "default_max_output_tokens")]
    pub max_output_tokens: u32,
}

fn default_token_limit() -> usize {
    16_000
}
fn default_timeout_secs() -> u64 {
    120
}
fn default_max_retries() -> u32 {
    3
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_max_output_tokens() -> u32 {
    4096
}

impl ProviderProfile {
    pub fn mock(name: &str) -> Self {
        ProviderProfile {
            name: name.to_string(),
            kind: ProviderKind::Mock,
            endpoint: String::new(),
            model_id: "mock".to_string(),
            auth_env: String::new(),
            token_limit: default_token_limit(),
            request_timeout_secs: default_timeout_secs(),
            max_retries: default_max_retries(),
            retry_backoff_ms: default_backoff_ms(),
            max_output_tokens: default_max_output_tokens(),
        }
    }

    /// Validation warnings (the profile stays usable). Prompts in the fix
    /// stage routinely exceed 1,200 tokens, so smaller context windows
    /// degrade results through truncation.
    pub fn validate(&self) -> Vec<String> {
        let mut warnings = Vec::new();
        if self.token_limit < 1200 {
            warnings.push(format!(
                "profile {}: token_limit {} is below the recommended minimum of 1200",
                self.name, self.token_limit
            ));
        }
        if self.kind == ProviderKind::Http && self.endpoint.is_empty() {
            warnings.push(format!(
                "profile {}: http provider without endpoint",
                self.name
            ));
        }
        warnings
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub text: String,
}

impl Message {
    pub fn system(text: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            text: text.into(),
        }
    }
    pub fn user(text: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRequest {
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output_tokens: u32,
}

impl ModelRequest {
    /// Characters/4 heuristic over all message text.
    pub fn estimated_tokens(&self) -> usize {
        let chars: usize = self.messages.iter().map(|m| m.text.len()).sum();
        chars.div_ceil(4)
    }

    /// Concatenated request text, used for digests and audit.
    pub fn canonical_text(&self) -> String {
        self.messages
            .iter()
            .map(|m| format!("[{:?}] {}", m.role, m.text))
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelReply {
    pub text: String,
    pub tokens_in: usize,
    pub tokens_out: usize,
    pub latency_ms: u64,
    pub provider: String,
    pub retries: u32,
}

/// A chat-completion backend. Implementations must be safe to call from
/// concurrent runs.
pub trait Provider: Send + Sync {
    fn profile(&self) -> &ProviderProfile;
    fn complete(&self, request: &ModelRequest) -> Result<ModelReply, GatewayError>;
}

/// Reject requests whose estimate exceeds the profile budget, before any
/// network traffic.
pub fn preflight(profile: &ProviderProfile, request: &ModelRequest) -> Result<(), GatewayError> {
    let estimated = request.estimated_tokens();
    if estimated > profile.token_limit {
        return Err(GatewayError::TokenBudgetExceeded {
            estimated,
            limit: profile.token_limit,
        });
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// scripted mock
// ---------------------------------------------------------------------------

/// Deterministic provider that replays a scripted scenario. Replies are
/// consumed strictly in order; consumption is serialized per instance so
/// concurrent calls still see a deterministic sequence.
pub struct MockProvider {
    profile: ProviderProfile,
    scenario: Mutex<VecDeque<String>>,
    consumed: Mutex<usize>,
}

impl MockProvider {
    pub fn new(profile: ProviderProfile) -> Self {
        MockProvider {
            profile,
            scenario: Mutex::new(VecDeque::new()),
            consumed: Mutex::new(0),
        }
    }

    pub fn scripted(replies: Vec<String>) -> Self {
        let mock = MockProvider::new(ProviderProfile::mock("mock"));
        mock.script(replies);
        mock
    }

    /// Append canned replies; subsequent `complete` calls consume them in
    /// order.
    pub fn script(&self, replies: Vec<String>) {
        let mut scenario = self.scenario.lock().expect("mock scenario lock");
        scenario.extend(replies);
    }

    pub fn remaining(&self) -> usize {
        self.scenario.lock().expect("mock scenario lock").len()
    }
}

impl Provider for MockProvider {
    fn profile(&self) -> &ProviderProfile {
        &self.profile
    }

    fn complete(&self, request: &ModelRequest) -> Result<ModelReply, GatewayError> {
        preflight(&self.profile, request)?;
        let mut scenario = self.scenario.lock().expect("mock scenario lock");
        let mut consumed = self.consumed.lock().expect("mock consumed lock");
        match scenario.pop_front() {
            Some(text) => {
                *consumed += 1;
                Ok(ModelReply {
                    tokens_in: request.estimated_tokens(),
                    tokens_out: text.len().div_ceil(4),
                    text,
                    latency_ms: 0,
                    provider: self.profile.name.clone(),
                    retries: 0,
                })
            }
            None => Err(GatewayError::ScriptExhausted {
                consumed: *consumed,
            }),
        }
    }
}

// ---------------------------------------------------------------------------
// live chat-completions client
// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct WireMessage<'a> {
    role: &'a str,
    content: &'a str,
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f64,
    max_tokens: u32,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireChoiceMessage,
}

#[derive(Deserialize)]
struct WireChoiceMessage {
    content: String,
}

#[derive(Deserialize, Default)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: usize,
    #[serde(default)]
    completion_tokens: usize,
}

/// Client for a chat-completions wire protocol endpoint with bearer
/// authentication. Transient failures (connection errors, timeouts, 429,
/// 5xx) are retried with exponential backoff up to the profile's budget.
pub struct HttpProvider {
    profile: ProviderProfile,
    client: reqwest::blocking::Client,
}

impl HttpProvider {
    pub fn new(profile: ProviderProfile) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(profile.request_timeout_secs))
            .build()
            .map_err(|e| GatewayError::ProviderFailure {
                retries: 0,
                detail: format!("client build failed: {e}"),
            })?;
        Ok(HttpProvider { profile, client })
    }

    fn bearer_token(&self) -> Result<Option<String>, GatewayError> {
        if self.profile.auth_env.is_empty() {
            return Ok(None);
        }
        match std::env::var(&self.profile.auth_env) {
            Ok(v) if !v.is_empty() => Ok(Some(v)),
            _ => Err(GatewayError::MissingAuth(self.profile.auth_env.clone())),
        }
    }

    fn attempt(
        &self,
        body: &WireRequest<'_>,
        token: &Option<String>,
    ) -> Result<WireResponse, (bool, String)> {
        let mut req = self.client.post(&self.profile.endpoint).json(body);
        if let Some(token) = token {
            req = req.bearer_auth(token);
        }
        let resp = req.send().map_err(|e| {
            // Connection-level failures are retryable.
            (true, format!("request error: {e}"))
        })?;
        let status = resp.status();
        if status.is_success() {
            resp.json::<WireResponse>()
                .map_err(|e| (false, format!("malformed provider response: {e}")))
        } else {
            let retryable = status.as_u16() == 429 || status.is_server_error();
            Err((retryable, format!("provider returned status {status}")))
        }
    }
}

impl Provider for HttpProvider {
    fn profile(&self) -> &ProviderProfile {
        &self.profile
    }

    fn complete(&self, request: &ModelRequest) -> Result<ModelReply, GatewayError> {
        preflight(&self.profile, request)?;
        let token = self.bearer_token()?;
        let messages: Vec<WireMessage<'_>> = request
            .messages
            .iter()
            .map(|m| WireMessage {
                role: match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                },
                content: &m.text,
            })
            .collect();
        let body = WireRequest {
            model: &self.profile.model_id,
            messages,
            temperature: request.temperature,
            max_tokens: request.max_output_tokens,
        };

        let started = Instant::now();
        let mut last_error = String::new();
        for attempt in 0..=self.profile.max_retries {
            if attempt > 0 {
                let backoff = self
                    .profile
                    .retry_backoff_ms
                    .saturating_mul(1 << (attempt - 1));
                std::thread::sleep(Duration::from_millis(backoff));
            }
            match self.attempt(&body, &token) {
                Ok(parsed) => {
                    let text = parsed
                        .choices
                        .first()
                        .map(|c| c.message.content.clone())
                        .unwrap_or_default();
                    let usage = parsed.usage.unwrap_or_default();
                    return Ok(ModelReply {
                        text,
                        tokens_in: usage.prompt_tokens,
                        tokens_out: usage.completion_tokens,
                        latency_ms: started.elapsed().as_millis() as u64,
                        provider: self.profile.name.clone(),
                        retries: attempt,
                    });
                }
                Err((retryable, detail)) => {
                    last_error = detail;
                    if !retryable {
                        return Err(GatewayError::ProviderFailure {
                            retries: attempt,
                            detail: last_error,
                        });
                    }
                    warn!(attempt, error = %last_error, "provider attempt failed, retrying");
                }
            }
        }
        Err(GatewayError::ProviderFailure {
            retries: self.profile.max_retries,
            detail: last_error,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    #[test]
    fn mock_consumes_replies_in_order() {
        let mock = MockProvider::scripted(vec!["a".into(), "b".into(), "c".into()]);
        let req = ModelRequest {
            messages: vec![Message::user("hi")],
            temperature: 0.0,
            max_output_tokens: 16,
        };
        assert_eq!(mock.complete(&req).unwrap().text, "a");
        assert_eq!(mock.complete(&req).unwrap().text, "b");
        assert_eq!(mock.complete(&req).unwrap().text, "c");
    }

    #[test]
    fn mock_exhaustion_is_an_error() {
        let mock = MockProvider::scripted(vec!["only".into()]);
        let req = ModelRequest {
            messages: vec![Message::user("hi")],
            temperature: 0.0,
            max_output_tokens: 16,
        };
        assert!(mock.complete(&req).is_ok());
        assert!(matches!(
            mock.complete(&req),
            Err(GatewayError::ScriptExhausted { consumed: 1 })
        ));
    }

    #[test]
    fn preflight_rejects_oversized_requests() {
        let mut profile = ProviderProfile::mock("tiny");
        profile.token_limit = 10;
        let mock = MockProvider::new(profile);
        mock.script(vec!["never returned".into()]);
        let req = ModelRequest {
            messages: vec![Message::user("x".repeat(200))],
            temperature: 0.0,
            max_output_tokens: 16,
        };
        assert!(matches!(
            mock.complete(&req),
            Err(GatewayError::TokenBudgetExceeded { .. })
        ));
        // The scripted reply must still be there: nothing was consumed.
        assert_eq!(mock.remaining(), 1);
    }

    #[test]
    fn token_limit_below_recommendation_warns() {
        let mut profile = ProviderProfile::mock("small");
        profile.token_limit = 800;
        let warnings = profile.validate();
        assert_eq!(warnings.len(), 1);
        assert!(warnings[0].contains("1200"));
    }

    /// Minimal HTTP/1.1 responder used to fault-inject the live client.
    fn serve_responses(listener: TcpListener, responses: Vec<(u16, String)>) {
        std::thread::spawn(move || {
            for (status, body) in responses {
                let (mut stream, _) = match listener.accept() {
                    Ok(s) => s,
                    Err(_) => return,
                };
                let mut buf = [0u8; 8192];
                let _ = stream.read(&mut buf);
                let reason = if status == 200 { "OK" } else { "Server Error" };
                let response = format!(
                    "HTTP/1.1 {status} {reason}\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
                    body.len()
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });
    }

    #[test]
    fn flaky_endpoint_retries_then_succeeds() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let ok_body = serde_json::json!({
            "choices": [{"message": {"content": "hello from live"}}],
            "usage": {"prompt_tokens": 7, "completion_tokens": 4}
        })
        .to_string();
        serve_responses(
            listener,
            vec![
                (500, "{}".to_string()),
                (500, "{}".to_string()),
                (200, ok_body),
            ],
        );

        let mut profile = ProviderProfile::mock("flaky");
        profile.kind = ProviderKind::Http;
        profile.endpoint = format!("http://{addr}/v1/chat/completions");
        profile.max_retries = 3;
        profile.retry_backoff_ms = 1;
        let provider = HttpProvider::new(profile).unwrap();
        let req = ModelRequest {
            messages: vec![Message::user("ping")],
            temperature: 0.0,
            max_output_tokens: 16,
        };
        let reply = provider.complete(&req).unwrap();
        assert_eq!(reply.text, "hello from live");
        assert_eq!(reply.retries, 2);
        assert_eq!(reply.tokens_in, 7);
    }

    #[test]
    fn exhausted_retries_surface_provider_failure() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        serve_responses(
            listener,
            vec![(500, "{}".to_string()), (500, "{}".to_string())],
        );
        let mut profile = ProviderProfile::mock("down");
        profile.kind = ProviderKind::Http;
        profile.endpoint = format!("http://{addr}/v1/chat/completions");
        profile.max_retries = 1;
        profile.retry_backoff_ms = 1;
        let provider = HttpProvider::new(profile).unwrap();
        let req = ModelRequest {
            messages: vec![Message::user("ping")],
            temperature: 0.0,
            max_output_tokens: 16,
        };
        assert!(matches!(
            provider.complete(&req),
            Err(GatewayError::ProviderFailure { retries: 1, .. })
        ));
    }
}
