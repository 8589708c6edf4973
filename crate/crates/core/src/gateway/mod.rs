//! Completion endpoints: a blocking HTTP client for completions-style
//! servers and deterministic mock LLMs, behind one trait.

mod http;
mod mock;
mod scorer;
#[cfg(test)]
mod test_server;
mod transcript;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::prompt::TaskFormat;

pub use http::{GatewayConfig, HttpClient, InFlightLimiter};
pub use mock::{MockClient, MockPolicy};
pub use scorer::HttpScorer;
pub use transcript::{read_transcripts, TranscriptKey, TranscriptRecord, TranscriptWriter};

pub const DEFAULT_STOP: [&str; 2] = ["\n", "==="];

#[derive(Debug, thiserror::Error)]
pub enum GatewayError {
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: String },
    #[error("authentication rejected (HTTP {0})")]
    Auth(u16),
    #[error("HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("malformed endpoint response: {0}")]
    Malformed(String),
    #[error("empty completion")]
    EmptyCompletion,
    #[error("no scripted reply for prompt {0}")]
    UnknownPrompt(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub prompt: String,
    pub max_tokens: u32,
    pub temperature: f64,
    pub stop_sequences: Vec<String>,
}

impl CompletionRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self {
            prompt: prompt.into(),
            max_tokens: 16,
            temperature: 0.0,
            stop_sequences: DEFAULT_STOP.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_tokens < 1 {
            return Err(GatewayError::InvalidRequest("max_tokens must be >= 1".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} must be finite and >= 0",
                self.temperature
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub raw_text: String,
    pub parsed_answer: String,
    pub latency_ms: u64,
    pub endpoint_id: String,
    pub attempts: u32,
}

pub trait CompletionClient: Send + Sync {
    fn endpoint_id(&self) -> String;

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError>;
}

pub fn prompt_sha256(prompt: &str) -> String {
    hex::encode(Sha256::digest(prompt.as_bytes()))
}

/// Text before the first stop sequence, with leading whitespace skipped
/// and the result trimmed.
pub fn truncate_at_stops<'a>(raw: &'a str, stops: &[impl AsRef<str>]) -> &'a str {
    let text = raw.trim_start();
    let end = stops
        .iter()
        .filter(|s| !s.as_ref().is_empty())
        .filter_map(|s| text.find(s.as_ref()))
        .min()
        .unwrap_or(text.len());
    text[..end].trim()
}

/// First `(A)`..`(D)` in `line`, if any.
fn find_letter(line: &str) -> Option<&str> {
    let b = line.as_bytes();
    (0..b.len().saturating_sub(2))
        .find(|&i| b[i] == b'(' && (b'A'..=b'D').contains(&b[i + 1]) && b[i + 2] == b')')
        .map(|i| &line[i..i + 3])
}

/// Answer text of a completion under the default stop sequences.
pub fn parse_answer(raw: &str, format: TaskFormat) -> Result<String, GatewayError> {
    parse_answer_with(raw, format, &DEFAULT_STOP)
}

pub fn parse_answer_with(
    raw: &str,
    format: TaskFormat,
    stops: &[impl AsRef<str>],
) -> Result<String, GatewayError> {
    let line = truncate_at_stops(raw, stops);
    if line.is_empty() {
        return Err(GatewayError::EmptyCompletion);
    }
    if format.has_choices() {
        if let Some(letter) = find_letter(line) {
            return Ok(letter.to_owned());
        }
    }
    Ok(line.to_owned())
}

/// Completes every request; results keep submission order.
pub fn complete_batch(
    client: &dyn CompletionClient,
    requests: &[CompletionRequest],
) -> Vec<Result<CompletionResult, GatewayError>> {
    requests.par_iter().map(|r| client.complete(r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_examples() {
        assert_eq!(
            parse_answer(" helium\n===\nContext:", TaskFormat::Standard).unwrap(),
            "helium"
        );
        assert_eq!(parse_answer("(B) lungs", TaskFormat::MultipleChoice).unwrap(), "(B)");
        assert_eq!(parse_answer("maybe (C)", TaskFormat::ScienceHint).unwrap(), "(C)");
        assert_eq!(parse_answer("lungs", TaskFormat::MultipleChoice).unwrap(), "lungs");
        assert_eq!(parse_answer("(B) lungs", TaskFormat::Standard).unwrap(), "(B) lungs");
        assert!(matches!(parse_answer("", TaskFormat::Standard), Err(GatewayError::EmptyCompletion)));
        assert!(matches!(parse_answer(" \n===", TaskFormat::Standard), Err(GatewayError::EmptyCompletion)));
        assert_eq!(parse_answer("a b===c", TaskFormat::Standard).unwrap(), "a b");
    }

    #[test]
    fn request_defaults_and_validation() {
        let r = CompletionRequest::new("p");
        assert_eq!(r.max_tokens, 16);
        assert_eq!(r.temperature, 0.0);
        assert_eq!(r.stop_sequences, ["\n", "==="]);
        assert!(r.validate().is_ok());
        let bad = CompletionRequest {
            max_tokens: 0,
            ..r.clone()
        };
        assert!(bad.validate().is_err());
        let bad = CompletionRequest {
            temperature: -0.1,
            ..r
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sha_is_hex_of_utf8() {
        assert_eq!(
            prompt_sha256("abc"),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
