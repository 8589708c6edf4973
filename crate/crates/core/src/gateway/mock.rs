use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::prompt::TaskFormat;
use crate::vote::normalize_answer;

use super::{
    parse_answer_with, prompt_sha256, CompletionClient, CompletionRequest, CompletionResult,
    GatewayError,
};

/// Reply used when a prompt shows no candidates.
pub const NO_CANDIDATE_REPLY: &str = "unknown";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MockPolicy {
    /// Answers with the first candidate of the testing block.
    EchoTop1,
    /// Answers with the hidden gold answer when it is among the shown
    /// candidates, else with the first candidate. Gold answers are keyed by
    /// question text.
    CandidateOracle { gold_by_question: HashMap<String, String> },
    /// Replies from a table keyed by the prompt's SHA-256 hex digest.
    Scripted {
        replies: HashMap<String, String>,
        #[serde(default)]
        strict: bool,
    },
}

impl MockPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            MockPolicy::EchoTop1 => "echo_top1",
            MockPolicy::CandidateOracle { .. } => "candidate_oracle",
            MockPolicy::Scripted { .. } => "scripted",
        }
    }
}

/// Deterministic in-process LLM stand-in.
#[derive(Debug, Clone)]
pub struct MockClient {
    policy: MockPolicy,
    format: TaskFormat,
}

/// Answers on the last `Candidates:` line, scores stripped.
pub fn prompt_candidates(prompt: &str) -> Option<Vec<String>> {
    let line = prompt
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix("Candidates: "))?;
    Some(
        line.split(", ")
            .map(|item| strip_score(item.trim()).to_owned())
            .collect(),
    )
}

fn strip_score(item: &str) -> &str {
    if let Some(body) = item.strip_suffix(')') {
        if let Some(open) = body.rfind('(') {
            if body[open + 1..].parse::<f64>().is_ok() {
                return &item[..open];
            }
        }
    }
    item
}

fn prompt_question(prompt: &str) -> Option<&str> {
    prompt.lines().rev().find_map(|l| l.strip_prefix("Question: "))
}

impl MockClient {
    pub fn new(policy: MockPolicy, format: TaskFormat) -> Self {
        Self { policy, format }
    }

    pub fn policy(&self) -> &MockPolicy {
        &self.policy
    }

    fn reply(&self, prompt: &str) -> Result<String, GatewayError> {
        let answer = match &self.policy {
            MockPolicy::EchoTop1 => prompt_candidates(prompt)
                .and_then(|c| c.into_iter().next())
                .unwrap_or_else(|| NO_CANDIDATE_REPLY.to_owned()),
            MockPolicy::CandidateOracle { gold_by_question } => {
                let question = prompt_question(prompt)
                    .ok_or_else(|| GatewayError::UnknownPrompt(prompt_sha256(prompt)))?;
                let gold = gold_by_question
                    .get(question)
                    .ok_or_else(|| GatewayError::UnknownPrompt(prompt_sha256(prompt)))?;
                match prompt_candidates(prompt) {
                    None => NO_CANDIDATE_REPLY.to_owned(),
                    Some(cands) => {
                        let key = normalize_answer(gold);
                        cands
                            .iter()
                            .find(|c| normalize_answer(c) == key)
                            .unwrap_or(&cands[0])
                            .clone()
                    }
                }
            }
            MockPolicy::Scripted { replies, strict } => {
                let digest = prompt_sha256(prompt);
                return match replies.get(&digest) {
                    Some(r) => Ok(r.clone()),
                    None if *strict => Err(GatewayError::UnknownPrompt(digest)),
                    None => Ok(format!(" {NO_CANDIDATE_REPLY}\n")),
                };
            }
        };
        Ok(format!(" {answer}\n===\n"))
    }
}

impl CompletionClient for MockClient {
    fn endpoint_id(&self) -> String {
        format!("mock:{}", self.policy.name())
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        request.validate()?;
        let raw_text = self.reply(&request.prompt)?;
        let parsed_answer = parse_answer_with(&raw_text, self.format, &request.stop_sequences)?;
        Ok(CompletionResult {
            raw_text,
            parsed_answer,
            latency_ms: 0,
            endpoint_id: self.endpoint_id(),
            attempts: 1,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const PROMPT: &str = "Head\n===\nContext: c\n===\nQuestion: q1?\n===\nCandidates: bike(0.90), race(0.10)\n===\nAnswer: bike\n===\nContext: d\n===\nQuestion: What sport?\n===\nCandidates: race(0.53), motorcycle(0.41), dirt bike(0.10)\n===\nAnswer:";

    fn ask(client: &MockClient, prompt: &str) -> Result<CompletionResult, GatewayError> {
        client.complete(&CompletionRequest::new(prompt))
    }

    #[test]
    fn echo_top1_reads_test_block() {
        let c = MockClient::new(MockPolicy::EchoTop1, TaskFormat::Standard);
        let r = ask(&c, PROMPT).unwrap();
        assert_eq!(r.parsed_answer, "race");
        assert_eq!(r.endpoint_id, "mock:echo_top1");
        assert_eq!(r, ask(&c, PROMPT).unwrap());
        let zero = ask(&c, "Context: c\n===\nQuestion: q?\n===\nAnswer:").unwrap();
        assert_eq!(zero.parsed_answer, NO_CANDIDATE_REPLY);
    }

    #[test]
    fn candidate_parsing() {
        assert_eq!(
            prompt_candidates("Candidates: dirt bike(0.28), a(b)(1.00), x").unwrap(),
            ["dirt bike", "a(b)", "x"]
        );
        assert!(prompt_candidates("Question: q").is_none());
    }

    #[test]
    fn oracle_prefers_gold_when_shown() {
        let gold = HashMap::from([("What sport?".to_string(), "Dirt Bike".to_string())]);
        let c = MockClient::new(
            MockPolicy::CandidateOracle {
                gold_by_question: gold.clone(),
            },
            TaskFormat::Standard,
        );
        assert_eq!(ask(&c, PROMPT).unwrap().parsed_answer, "dirt bike");
        let absent = HashMap::from([("What sport?".to_string(), "polo".to_string())]);
        let c = MockClient::new(
            MockPolicy::CandidateOracle {
                gold_by_question: absent,
            },
            TaskFormat::Standard,
        );
        assert_eq!(ask(&c, PROMPT).unwrap().parsed_answer, "race");
        assert!(matches!(
            ask(&c, "Question: other?\n===\nAnswer:"),
            Err(GatewayError::UnknownPrompt(_))
        ));
    }

    #[test]
    fn scripted_strict_and_lenient() {
        let replies = HashMap::from([(prompt_sha256("p"), "helium\n".to_string())]);
        let strict = MockClient::new(
            MockPolicy::Scripted {
                replies: replies.clone(),
                strict: true,
            },
            TaskFormat::Standard,
        );
        assert_eq!(ask(&strict, "p").unwrap().parsed_answer, "helium");
        assert!(matches!(ask(&strict, "q"), Err(GatewayError::UnknownPrompt(_))));
        let lenient = MockClient::new(
            MockPolicy::Scripted {
                replies,
                strict: false,
            },
            TaskFormat::Standard,
        );
        assert_eq!(ask(&lenient, "q").unwrap().parsed_answer, NO_CANDIDATE_REPLY);
    }
}
