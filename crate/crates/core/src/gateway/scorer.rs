use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::artifacts::AnswerVocabulary;
use crate::heuristics::{AutoregressiveScorer, HeuristicsError};

#[derive(Serialize)]
struct ScoreRequest<'a> {
    prefix: &'a [usize],
}

#[derive(Deserialize)]
struct ScoreResponse {
    probs: Vec<f64>,
}

/// Remote generative answer model: `POST {prefix:[ids]}` → `{probs:[..]}`.
pub struct HttpScorer {
    url: String,
    vocab: AnswerVocabulary,
    agent: ureq::Agent,
    attempts: u32,
}

impl HttpScorer {
    pub fn new(url: impl Into<String>, vocab: AnswerVocabulary, timeout_ms: u64, attempts: u32) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_millis(timeout_ms)))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: url.into(),
            vocab,
            agent,
            attempts: attempts.max(1),
        }
    }

    fn fetch(&self, prefix: &[usize]) -> Result<Option<Vec<f64>>, HeuristicsError> {
        let mut resp = match self.agent.post(&self.url).send_json(&ScoreRequest { prefix }) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_) | ureq::Error::Io(_) | ureq::Error::ConnectionFailed) => {
                return Ok(None)
            }
            Err(e) => return Err(HeuristicsError::Scorer(e.to_string())),
        };
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Ok(None);
        }
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| HeuristicsError::Scorer(e.to_string()))?;
        if !(200..300).contains(&status) {
            return Err(HeuristicsError::Scorer(format!("HTTP {status}: {text}")));
        }
        let parsed: ScoreResponse = serde_json::from_str(&text)
            .map_err(|e| HeuristicsError::Scorer(format!("malformed response: {e}")))?;
        Ok(Some(parsed.probs))
    }
}

impl AutoregressiveScorer for HttpScorer {
    fn vocab(&self) -> &AnswerVocabulary {
        &self.vocab
    }

    fn next_distribution(&self, prefix: &[usize]) -> Result<Vec<f64>, HeuristicsError> {
        for attempt in 0..self.attempts {
            if let Some(p) = self.fetch(prefix)? {
                return Ok(p);
            }
            if attempt + 1 < self.attempts {
                thread::sleep(Duration::from_millis(10 << attempt.min(8)));
            }
        }
        Err(HeuristicsError::Scorer(format!(
            "scorer unavailable after {} attempts",
            self.attempts
        )))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::artifacts::{VocabType, BOS, EOS};
    use crate::gateway::test_server::TestServer;
    use crate::heuristics::beam_search;
    use std::sync::Arc;

    #[test]
    fn beam_search_over_http() {
        // [BOS], [EOS], helium: a deterministic chain.
        let server = TestServer::new(Arc::new(|body: &str| {
            let v: serde_json::Value = serde_json::from_str(body).unwrap();
            let probs = if v["prefix"].as_array().unwrap().len() == 1 {
                [0.0, 0.0, 1.0]
            } else {
                [0.0, 1.0, 0.0]
            };
            (200, serde_json::json!({ "probs": probs }).to_string())
        }));
        let vocab = AnswerVocabulary::new(
            VocabType::Generative,
            vec![BOS.into(), EOS.into(), "helium".into()],
        )
        .unwrap();
        let scorer = HttpScorer::new(server.url(), vocab, 5_000, 2);
        let out = beam_search(&scorer, 3, 4).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].answer, "helium");
        assert_eq!(out[0].confidence, 1.0);
        let first: serde_json::Value = serde_json::from_str(&server.bodies()[0]).unwrap();
        assert_eq!(first, serde_json::json!({"prefix": [0]}));
    }

    #[test]
    fn retries_then_reports() {
        let server = TestServer::scripted(vec![(503, "{}".into()), (200, r#"{"probs":[0.0,1.0]}"#.into())]);
        let vocab =
            AnswerVocabulary::new(VocabType::Generative, vec![BOS.into(), EOS.into()]).unwrap();
        let scorer = HttpScorer::new(server.url(), vocab.clone(), 5_000, 3);
        assert_eq!(scorer.next_distribution(&[0]).unwrap(), [0.0, 1.0]);
        let bad = TestServer::scripted(vec![(200, "not json".into())]);
        let scorer = HttpScorer::new(bad.url(), vocab, 5_000, 3);
        assert!(matches!(scorer.next_distribution(&[0]), Err(HeuristicsError::Scorer(_))));
    }
}
