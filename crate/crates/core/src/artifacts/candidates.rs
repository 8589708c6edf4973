use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ArtifactError;

/// One stage-1 answer with its confidence in (0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnswerCandidate {
    pub answer: String,
    pub score: f64,
}

impl AnswerCandidate {
    pub fn new(answer: impl Into<String>, score: f64) -> Self {
        Self {
            answer: answer.into(),
            score,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TableLine {
    id: String,
    candidates: Vec<AnswerCandidate>,
}

/// Per-sample candidate lists, stored as JSON Lines
/// (`{"id": ..., "candidates": [{"answer": ..., "score": ...}, ...]}`).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CandidateTable {
    k_max: Option<usize>,
    entries: BTreeMap<String, Vec<AnswerCandidate>>,
}

impl CandidateTable {
    pub fn new(k_max: Option<usize>) -> Self {
        Self {
            k_max,
            entries: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, id: impl Into<String>, cands: Vec<AnswerCandidate>) -> Result<(), ArtifactError> {
        let id = id.into();
        validate_list(&id, &cands, self.k_max)?;
        self.entries.insert(id, cands);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[AnswerCandidate]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[AnswerCandidate])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    pub fn parse(text: &str, k_max: Option<usize>) -> Result<Self, ArtifactError> {
        let mut table = Self::new(k_max);
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: TableLine = serde_json::from_str(line).map_err(|e| ArtifactError::Schema {
                line: n + 1,
                message: e.to_string(),
            })?;
            if table.entries.contains_key(&rec.id) {
                return Err(ArtifactError::DuplicateId(rec.id));
            }
            table.insert(rec.id, rec.candidates)?;
        }
        Ok(table)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (id, cands) in &self.entries {
            let line = TableLine {
                id: id.clone(),
                candidates: cands.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("candidate line serializes"));
            out.push('\n');
        }
        out
    }

    pub fn load(path: impl AsRef<Path>, k_max: Option<usize>) -> Result<Self, ArtifactError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ArtifactError::io(path, e))?;
        Self::parse(&text, k_max)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ArtifactError> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| ArtifactError::io(path, e))
    }
}

/// Checks the candidate-list invariants: non-empty answers, finite scores in
/// (0, 1], non-increasing order, and at most `k_max` entries.
pub fn validate_list(id: &str, cands: &[AnswerCandidate], k_max: Option<usize>) -> Result<(), ArtifactError> {
    if let Some(k) = k_max {
        if cands.len() > k {
            return Err(ArtifactError::Candidates(format!(
                "{id}: {} candidates exceed k_max {k}",
                cands.len()
            )));
        }
    }
    for (i, c) in cands.iter().enumerate() {
        if c.answer.is_empty() {
            return Err(ArtifactError::Candidates(format!("{id}: candidate {i} has an empty answer")));
        }
        if !(c.score.is_finite() && c.score > 0.0 && c.score <= 1.0) {
            return Err(ArtifactError::Candidates(format!(
                "{id}: candidate {i} score {} outside (0, 1]",
                c.score
            )));
        }
        if i > 0 && c.score > cands[i - 1].score {
            return Err(ArtifactError::Candidates(format!(
                "{id}: scores increase at position {i}"
            )));
        }
    }
    Ok(())
}
