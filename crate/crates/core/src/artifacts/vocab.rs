use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ArtifactError;

pub const BOS: &str = "[BOS]";
pub const EOS: &str = "[EOS]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VocabType {
    /// Whole answers, one per classifier output.
    Discriminative,
    /// Answer words plus `[BOS]` / `[EOS]` markers.
    Generative,
}

/// Ordered, duplicate-free answer (or word) vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnswerVocabulary {
    kind: VocabType,
    entries: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerVocabulary {
    pub fn new(kind: VocabType, entries: Vec<String>) -> Result<Self, ArtifactError> {
        if entries.is_empty() {
            return Err(ArtifactError::Vocab("vocabulary is empty".into()));
        }
        let mut index = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if e.is_empty() {
                return Err(ArtifactError::Vocab(format!("empty entry on line {}", i + 1)));
            }
            if index.insert(e.clone(), i).is_some() {
                return Err(ArtifactError::Vocab(format!(
                    "duplicate entry {e:?} on line {}",
                    i + 1
                )));
            }
        }
        match kind {
            VocabType::Generative => {
                for marker in [BOS, EOS] {
                    if !index.contains_key(marker) {
                        return Err(ArtifactError::Vocab(format!(
                            "generative vocabulary lacks {marker}"
                        )));
                    }
                }
            }
            VocabType::Discriminative => {}
        }
        Ok(Self {
            kind,
            entries,
            index,
        })
    }

    pub fn parse(kind: VocabType, text: &str) -> Result<Self, ArtifactError> {
        let entries = text
            .lines()
            .map(|l| l.strip_suffix('\r').unwrap_or(l).to_owned())
            .collect();
        Self::new(kind, entries)
    }

    pub fn load(kind: VocabType, path: impl AsRef<Path>) -> Result<Self, ArtifactError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| ArtifactError::io(path, e))?;
        Self::parse(kind, &text)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(e);
            out.push('\n');
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ArtifactError> {
        let path = path.as_ref();
        fs::write(path, self.to_text()).map_err(|e| ArtifactError::io(path, e))
    }

    pub fn kind(&self) -> VocabType {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[String] {
        &self.entries
    }

    pub fn get(&self, i: usize) -> Option<&str> {
        self.entries.get(i).map(String::as_str)
    }

    pub fn index_of(&self, entry: &str) -> Option<usize> {
        self.index.get(entry).copied()
    }

    pub fn bos(&self) -> Option<usize> {
        self.index_of(BOS)
    }

    pub fn eos(&self) -> Option<usize> {
        self.index_of(EOS)
    }
}
