use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::prompt::TaskFormat;

use super::{
    parse_answer_with, CompletionClient, CompletionRequest, CompletionResult, GatewayError,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewayConfig {
    /// Full URL of the completions route.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub max_in_flight: usize,
    /// Maximum attempts per request, first try included.
    pub retries: u32,
    pub backoff_base_ms: u64,
    pub timeout_ms: u64,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/completions".into(),
            model: "default".into(),
            api_key_env: None,
            max_in_flight: 4,
            retries: 5,
            backoff_base_ms: 250,
            timeout_ms: 30_000,
        }
    }
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
pub struct InFlightLimiter {
    limit: usize,
    state: Mutex<(usize, usize)>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a InFlightLimiter);

impl InFlightLimiter {
    pub fn new(limit: usize) -> Self {
        Self {
            limit: limit.max(1),
            state: Mutex::new((0, 0)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut st = self.state.lock().unwrap_or_else(|e| e.into_inner());
        while st.0 >= self.limit {
            st = self.freed.wait(st).unwrap_or_else(|e| e.into_inner());
        }
        st.0 += 1;
        st.1 = st.1.max(st.0);
        Permit(self)
    }

    /// Highest concurrent count observed so far.
    pub fn peak(&self) -> usize {
        self.state.lock().unwrap_or_else(|e| e.into_inner()).1
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut st = self.0.state.lock().unwrap_or_else(|e| e.into_inner());
        st.0 -= 1;
        self.0.freed.notify_one();
    }
}

#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    prompt: &'a str,
    max_tokens: u32,
    temperature: f64,
    stop: &'a [String],
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    text: String,
}

enum Failure {
    Transient(String),
    Fatal(GatewayError),
}

/// Blocking client for a completions-style JSON endpoint.
pub struct HttpClient {
    config: GatewayConfig,
    format: TaskFormat,
    api_key: Option<String>,
    agent: ureq::Agent,
    limiter: InFlightLimiter,
}

impl HttpClient {
    pub fn new(config: GatewayConfig, format: TaskFormat) -> Result<Self, GatewayError> {
        if config.retries < 1 {
            return Err(GatewayError::Config("retries must be >= 1".into()));
        }
        if config.endpoint.is_empty() {
            return Err(GatewayError::Config("endpoint URL is empty".into()));
        }
        let api_key = match &config.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                GatewayError::Config(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(config.timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Ok(Self {
            limiter: InFlightLimiter::new(config.max_in_flight),
            config,
            format,
            api_key,
            agent,
        })
    }

    pub fn limiter(&self) -> &InFlightLimiter {
        &self.limiter
    }

    fn attempt(&self, request: &CompletionRequest) -> Result<String, Failure> {
        let body = WireRequest {
            model: &self.config.model,
            prompt: &request.prompt,
            max_tokens: request.max_tokens,
            temperature: request.temperature,
            stop: &request.stop_sequences,
        };
        let mut req = self.agent.post(&self.config.endpoint);
        if let Some(key) = &self.api_key {
            req = req.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match req.send_json(&body) {
            Ok(r) => r,
            Err(e @ (ureq::Error::Timeout(_) | ureq::Error::Io(_) | ureq::Error::ConnectionFailed)) => {
                return Err(Failure::Transient(e.to_string()))
            }
            Err(e) => return Err(Failure::Fatal(GatewayError::Transport(e.to_string()))),
        };
        let status = resp.status().as_u16();
        let text = match resp.body_mut().read_to_string() {
            Ok(t) => t,
            Err(e @ (ureq::Error::Timeout(_) | ureq::Error::Io(_))) => {
                return Err(Failure::Transient(e.to_string()))
            }
            Err(e) => return Err(Failure::Fatal(GatewayError::Malformed(e.to_string()))),
        };
        match status {
            200..=299 => {}
            401 | 403 => return Err(Failure::Fatal(GatewayError::Auth(status))),
            429 | 500..=599 => return Err(Failure::Transient(format!("HTTP {status}"))),
            _ => return Err(Failure::Fatal(GatewayError::Status { status, body: text })),
        }
        let parsed: WireResponse = serde_json::from_str(&text)
            .map_err(|e| Failure::Fatal(GatewayError::Malformed(e.to_string())))?;
        parsed
            .choices
            .into_iter()
            .next()
            .map(|c| c.text)
            .ok_or_else(|| Failure::Fatal(GatewayError::Malformed("no choices".into())))
    }
}

impl CompletionClient for HttpClient {
    fn endpoint_id(&self) -> String {
        format!("{}#{}", self.config.endpoint, self.config.model)
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        request.validate()?;
        let start = Instant::now();
        let mut last = String::new();
        for attempt in 1..=self.config.retries {
            let outcome = {
                let _permit = self.limiter.acquire();
                self.attempt(request)
            };
            match outcome {
                Ok(raw_text) => {
                    let parsed_answer =
                        parse_answer_with(&raw_text, self.format, &request.stop_sequences)?;
                    return Ok(CompletionResult {
                        raw_text,
                        parsed_answer,
                        latency_ms: start.elapsed().as_millis() as u64,
                        endpoint_id: self.endpoint_id(),
                        attempts: attempt,
                    });
                }
                Err(Failure::Fatal(e)) => return Err(e),
                Err(Failure::Transient(msg)) => {
                    last = msg;
                    if attempt < self.config.retries {
                        let shift = (attempt - 1).min(16);
                        thread::sleep(Duration::from_millis(self.config.backoff_base_ms << shift));
                    }
                }
            }
        }
        Err(GatewayError::Exhausted {
            attempts: self.config.retries,
            last,
        })
    }
}
