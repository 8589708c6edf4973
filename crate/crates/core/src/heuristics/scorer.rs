use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::artifacts::{AnswerVocabulary, VocabType, BOS};

use super::HeuristicsError;

/// Next-word distributions of a generative answer model.
///
/// `prefix` always starts with the `[BOS]` id. Implementations must be
/// deterministic and safe to call from several threads.
pub trait AutoregressiveScorer: Sync {
    fn vocab(&self) -> &AnswerVocabulary;

    fn next_distribution(&self, prefix: &[usize]) -> Result<Vec<f64>, HeuristicsError>;
}

/// On-disk form of a [`SyntheticScorer`]: probability maps keyed by the
/// space-joined prefix (starting with `[BOS]`), with a default for
/// unlisted prefixes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScorerFile {
    pub default: BTreeMap<String, f64>,
    #[serde(default)]
    pub table: BTreeMap<String, BTreeMap<String, f64>>,
}

/// Table-driven scorer, used for fixtures and tests.
#[derive(Debug, Clone)]
pub struct SyntheticScorer {
    vocab: AnswerVocabulary,
    default: Vec<f64>,
    table: HashMap<String, Vec<f64>>,
}

impl SyntheticScorer {
    pub fn new(vocab: AnswerVocabulary, file: &ScorerFile) -> Result<Self, HeuristicsError> {
        if vocab.kind() != VocabType::Generative {
            return Err(HeuristicsError::Scorer(
                "synthetic scorer needs a generative vocabulary".into(),
            ));
        }
        let default = dense(&vocab, &file.default)?;
        let mut table = HashMap::with_capacity(file.table.len());
        for (prefix, probs) in &file.table {
            if !prefix.starts_with(BOS) {
                return Err(HeuristicsError::Scorer(format!(
                    "prefix {prefix:?} does not start with {BOS}"
                )));
            }
            table.insert(prefix.clone(), dense(&vocab, probs)?);
        }
        Ok(Self {
            vocab,
            default,
            table,
        })
    }

    pub fn from_json(vocab: AnswerVocabulary, text: &str) -> Result<Self, HeuristicsError> {
        let file: ScorerFile =
            serde_json::from_str(text).map_err(|e| HeuristicsError::Scorer(e.to_string()))?;
        Self::new(vocab, &file)
    }

    pub fn load(vocab: AnswerVocabulary, path: impl AsRef<Path>) -> Result<Self, HeuristicsError> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)
            .map_err(|e| HeuristicsError::Scorer(format!("{}: {e}", path.display())))?;
        Self::from_json(vocab, &text)
    }

    fn key(&self, prefix: &[usize]) -> String {
        prefix
            .iter()
            .map(|&t| self.vocab.get(t).unwrap_or("?"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn dense(vocab: &AnswerVocabulary, probs: &BTreeMap<String, f64>) -> Result<Vec<f64>, HeuristicsError> {
    let mut out = vec![0.0; vocab.len()];
    for (tok, &p) in probs {
        let i = vocab
            .index_of(tok)
            .ok_or_else(|| HeuristicsError::Scorer(format!("unknown token {tok:?}")))?;
        out[i] = p;
    }
    Ok(out)
}

impl AutoregressiveScorer for SyntheticScorer {
    fn vocab(&self) -> &AnswerVocabulary {
        &self.vocab
    }

    fn next_distribution(&self, prefix: &[usize]) -> Result<Vec<f64>, HeuristicsError> {
        Ok(self
            .table
            .get(&self.key(prefix))
            .unwrap_or(&self.default)
            .clone())
    }
}
