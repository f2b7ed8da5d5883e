//! Chat-completion clients.
//!
//! [`RemoteLlm`] speaks the chat-completions wire format over HTTP with
//! retry and an in-flight limit. [`ScriptedLlm`] replays canned responses
//! for offline runs and refuses requests it has no entry for.

use std::collections::VecDeque;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use self::transport::{HttpTransport, RetryPolicy, TransportError};

pub const DEFAULT_TEMPERATURE: f64 = 0.4;
pub const DEFAULT_MAX_TOKENS: u32 = 1000;
pub const DEFAULT_MODEL: &str = "gpt-4o-mini";
pub const DEFAULT_ENDPOINT: &str = "https://api.openai.com/v1/chat/completions";
pub const DEFAULT_CONCURRENCY: usize = 4;

#[derive(Debug, Error)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("missing credential: environment variable {0} is not set")]
    MissingCredential(String),
    #[error("authentication failed (HTTP {0})")]
    Authentication(u16),
    #[error("request failed after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: String },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("malformed completion response: {0}")]
    Malformed(String),
    #[error("no scripted response matches request (user text starts {0:?})")]
    NoScriptMatch(String),
    #[error("invalid script: {0}")]
    Script(String),
}

impl From<TransportError> for LlmError {
    fn from(e: TransportError) -> Self {
        match e {
            TransportError::Authentication(s) => LlmError::Authentication(s),
            TransportError::Exhausted { attempts, last } => {
                LlmError::RetriesExhausted { attempts, last }
            }
            TransportError::Status { status, body } => LlmError::Http { status, body },
            TransportError::Decode(m) => LlmError::Malformed(m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub system_text: Option<String>,
    pub user_text: String,
    pub temperature: f64,
    pub max_tokens: u32,
    pub model: String,
}

impl ChatRequest {
    /// A request with the default sampling settings (temperature 0.4,
    /// 1000 max tokens).
    pub fn new(user_text: impl Into<String>) -> Self {
        Self {
            system_text: None,
            user_text: user_text.into(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            model: DEFAULT_MODEL.to_string(),
        }
    }

    pub fn with_settings(mut self, settings: &SamplingSettings) -> Self {
        self.temperature = settings.temperature;
        self.max_tokens = settings.max_tokens;
        self.model = settings.model.clone();
        self
    }

    pub fn validate(&self) -> Result<(), LlmError> {
        if self.user_text.trim().is_empty() {
            return Err(LlmError::InvalidRequest("user text is empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(LlmError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        Ok(())
    }
}

/// Model and sampling parameters shared by every call in a run.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplingSettings {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for SamplingSettings {
    fn default() -> Self {
        Self {
            model: DEFAULT_MODEL.to_string(),
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChatResponse {
    pub text: String,
    pub usage: Option<Usage>,
    pub backend: String,
    /// Number of HTTP attempts made, 1 when no retry happened.
    pub attempts: u32,
}

pub trait LlmClient: Send + Sync {
    fn backend_id(&self) -> &str;

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError>;
}

impl<C: LlmClient + ?Sized> LlmClient for &C {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }
}

impl<C: LlmClient + ?Sized> LlmClient for Box<C> {
    fn backend_id(&self) -> &str {
        (**self).backend_id()
    }
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        (**self).complete(request)
    }
}

pub mod transport {
    //! Blocking JSON-over-HTTP POST with retry on transport errors and
    //! 429/5xx responses.

    use super::*;
    use rand::Rng;
    use serde::de::DeserializeOwned;

    #[derive(Debug, Error)]
    pub enum TransportError {
        #[error("authentication failed (HTTP {0})")]
        Authentication(u16),
        #[error("gave up after {attempts} attempts: {last}")]
        Exhausted { attempts: u32, last: String },
        #[error("HTTP {status}: {body}")]
        Status { status: u16, body: String },
        #[error("could not decode response: {0}")]
        Decode(String),
    }

    #[derive(Debug, Clone, Copy, PartialEq)]
    pub struct RetryPolicy {
        /// Retries after the first attempt.
        pub max_retries: u32,
        /// Delay before the first retry; doubles each time.
        pub base_delay: Duration,
        /// Uniform jitter as a fraction of the delay.
        pub jitter: f64,
    }

    impl Default for RetryPolicy {
        fn default() -> Self {
            Self {
                max_retries: 3,
                base_delay: Duration::from_secs(1),
                jitter: 0.25,
            }
        }
    }

    impl RetryPolicy {
        /// Backoff before retry number `retry` (1-based), without jitter.
        pub fn nominal_delay(&self, retry: u32) -> Duration {
            self.base_delay * 2u32.saturating_pow(retry.saturating_sub(1))
        }

        fn delay(&self, retry: u32) -> Duration {
            let d = self.nominal_delay(retry);
            if self.jitter <= 0.0 || d.is_zero() {
                return d;
            }
            let f = rand::rng().random_range(0.0..=self.jitter);
            d.mul_f64(1.0 + f)
        }
    }

    /// Counting semaphore for in-flight requests.
    pub(crate) struct Limiter {
        slots: Mutex<usize>,
        freed: Condvar,
    }

    pub(crate) struct Permit<'a>(&'a Limiter);

    impl Limiter {
        pub(crate) fn new(limit: usize) -> Self {
            Self {
                slots: Mutex::new(limit.max(1)),
                freed: Condvar::new(),
            }
        }

        pub(crate) fn acquire(&self) -> Permit<'_> {
            let mut slots = self.slots.lock().unwrap();
            while *slots == 0 {
                slots = self.freed.wait(slots).unwrap();
            }
            *slots -= 1;
            Permit(self)
        }
    }

    impl Drop for Permit<'_> {
        fn drop(&mut self) {
            *self.0.slots.lock().unwrap() += 1;
            self.0.freed.notify_one();
        }
    }

    pub struct HttpTransport {
        agent: ureq::Agent,
        endpoint: String,
        api_key: Option<String>,
        retry: RetryPolicy,
        limiter: Option<Limiter>,
    }

    fn retryable(status: u16) -> bool {
        status == 429 || (500..600).contains(&status)
    }

    impl HttpTransport {
        pub fn new(
            endpoint: impl Into<String>,
            api_key: Option<String>,
            retry: RetryPolicy,
            timeout: Duration,
            concurrency: Option<usize>,
        ) -> Self {
            let agent: ureq::Agent = ureq::Agent::config_builder()
                .http_status_as_error(false)
                .timeout_global(Some(timeout))
                .build()
                .into();
            Self {
                agent,
                endpoint: endpoint.into(),
                api_key,
                retry,
                limiter: concurrency.map(Limiter::new),
            }
        }

        pub fn endpoint(&self) -> &str {
            &self.endpoint
        }

        /// POSTs `body` as JSON and decodes the response, returning it with
        /// the number of attempts made.
        pub fn post_json<B, R>(&self, body: &B) -> Result<(R, u32), TransportError>
        where
            B: Serialize + ?Sized,
            R: DeserializeOwned,
        {
            let _permit = self.limiter.as_ref().map(Limiter::acquire);
            let mut attempt = 0u32;
            loop {
                attempt += 1;
                let mut req = self.agent.post(&self.endpoint);
                if let Some(key) = &self.api_key {
                    req = req.header("Authorization", &format!("Bearer {key}"));
                }
                let failure = match req.send_json(body) {
                    Ok(mut resp) => {
                        let status = resp.status().as_u16();
                        if (200..300).contains(&status) {
                            return resp
                                .body_mut()
                                .read_json::<R>()
                                .map(|r| (r, attempt))
                                .map_err(|e| TransportError::Decode(e.to_string()));
                        }
                        let text = resp.body_mut().read_to_string().unwrap_or_default();
                        if status == 401 || status == 403 {
                            return Err(TransportError::Authentication(status));
                        }
                        if !retryable(status) {
                            return Err(TransportError::Status { status, body: text });
                        }
                        format!("HTTP {status}")
                    }
                    Err(e) => e.to_string(),
                };
                if attempt > self.retry.max_retries {
                    return Err(TransportError::Exhausted {
                        attempts: attempt,
                        last: failure,
                    });
                }
                let delay = self.retry.delay(attempt);
                log::warn!(
                    "{}: {failure}; retry {attempt}/{} in {:?}",
                    self.endpoint,
                    self.retry.max_retries,
                    delay
                );
                std::thread::sleep(delay);
            }
        }
    }
}

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
    usage: Option<Usage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireReply,
}

#[derive(Deserialize)]
struct WireReply {
    #[serde(default)]
    content: Option<String>,
}

/// Builds the JSON payload sent for `request`.
pub fn wire_payload(request: &ChatRequest) -> serde_json::Value {
    let mut messages = Vec::with_capacity(2);
    if let Some(sys) = &request.system_text {
        messages.push(WireMessage {
            role: "system",
            content: sys,
        });
    }
    messages.push(WireMessage {
        role: "user",
        content: &request.user_text,
    });
    serde_json::to_value(WireRequest {
        model: &request.model,
        messages,
        temperature: request.temperature,
        max_tokens: request.max_tokens,
    })
    .expect("request serializes")
}

#[derive(Debug, Clone)]
pub struct RemoteLlmConfig {
    pub endpoint: String,
    pub api_key: String,
    pub retry: RetryPolicy,
    pub timeout: Duration,
    pub concurrency: usize,
}

impl RemoteLlmConfig {
    pub fn new(endpoint: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            retry: RetryPolicy::default(),
            timeout: Duration::from_secs(120),
            concurrency: DEFAULT_CONCURRENCY,
        }
    }
}

pub struct RemoteLlm {
    transport: HttpTransport,
    id: String,
}

impl RemoteLlm {
    pub fn new(config: RemoteLlmConfig) -> Result<Self, LlmError> {
        if config.endpoint.trim().is_empty() {
            return Err(LlmError::InvalidRequest("endpoint URL is empty".into()));
        }
        if config.api_key.is_empty() {
            return Err(LlmError::MissingCredential("<api key>".into()));
        }
        Ok(Self {
            id: format!("remote:{}", config.endpoint),
            transport: HttpTransport::new(
                config.endpoint,
                Some(config.api_key),
                config.retry,
                config.timeout,
                Some(config.concurrency),
            ),
        })
    }

    /// Reads the key from the named environment variable.
    pub fn from_env(mut config: RemoteLlmConfig, key_var: &str) -> Result<Self, LlmError> {
        config.api_key =
            std::env::var(key_var).map_err(|_| LlmError::MissingCredential(key_var.to_string()))?;
        Self::new(config)
    }
}

impl LlmClient for RemoteLlm {
    fn backend_id(&self) -> &str {
        &self.id
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let (resp, attempts): (WireResponse, u32) =
            self.transport.post_json(&wire_payload(request))?;
        let text = resp
            .choices
            .into_iter()
            .next()
            .and_then(|c| c.message.content)
            .ok_or_else(|| LlmError::Malformed("no choices[0].message.content".into()))?;
        if attempts > 1 {
            log::info!("completion succeeded after {} retries", attempts - 1);
        }
        Ok(ChatResponse {
            text,
            usage: resp.usage,
            backend: self.id.clone(),
            attempts,
        })
    }
}

/// One canned response. A rule matches when every `contains` fragment
/// occurs in the request's system or user text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptRule {
    #[serde(default)]
    pub contains: Vec<String>,
    #[serde(default)]
    pub not_contains: Vec<String>,
    pub response: String,
}

impl ScriptRule {
    pub fn new(contains: &[&str], response: impl Into<String>) -> Self {
        Self {
            contains: contains.iter().map(|s| s.to_string()).collect(),
            not_contains: Vec::new(),
            response: response.into(),
        }
    }

    pub fn unless(mut self, fragment: &str) -> Self {
        self.not_contains.push(fragment.to_string());
        self
    }

    fn matches(&self, req: &ChatRequest) -> bool {
        let hay = |s: &str| {
            req.user_text.contains(s) || req.system_text.as_deref().is_some_and(|t| t.contains(s))
        };
        self.contains.iter().all(|s| hay(s)) && !self.not_contains.iter().any(|s| hay(s))
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScriptFile {
    rules: Vec<ScriptRule>,
}

/// Offline client replaying canned responses.
///
/// In rule mode the first matching rule answers and rules are reusable, so
/// replies depend only on request content. In sequence mode responses are
/// consumed front to back regardless of content.
#[derive(Debug)]
pub struct ScriptedLlm {
    rules: Vec<ScriptRule>,
    queue: Option<Mutex<VecDeque<String>>>,
}

impl ScriptedLlm {
    pub fn from_rules(rules: Vec<ScriptRule>) -> Self {
        Self { rules, queue: None }
    }

    pub fn sequence<I, S>(responses: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            rules: Vec::new(),
            queue: Some(Mutex::new(responses.into_iter().map(Into::into).collect())),
        }
    }

    /// Parses `{"rules": [{"contains": [...], "response": "..."}]}`.
    pub fn from_json(json: &str) -> Result<Self, LlmError> {
        let file: ScriptFile =
            serde_json::from_str(json).map_err(|e| LlmError::Script(e.to_string()))?;
        Ok(Self::from_rules(file.rules))
    }

    pub fn from_path(path: &std::path::Path) -> Result<Self, LlmError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LlmError::Script(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }
}

impl LlmClient for ScriptedLlm {
    fn backend_id(&self) -> &str {
        "scripted"
    }

    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, LlmError> {
        request.validate()?;
        let text = match &self.queue {
            Some(q) => q.lock().unwrap().pop_front(),
            None => self
                .rules
                .iter()
                .find(|r| r.matches(request))
                .map(|r| r.response.clone()),
        };
        let text = text
            .ok_or_else(|| LlmError::NoScriptMatch(request.user_text.chars().take(60).collect()))?;
        Ok(ChatResponse {
            text,
            usage: None,
            backend: "scripted".into(),
            attempts: 1,
        })
    }
}
