use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::bank::{BankKind, FeatureBank, GroupedFeatureBank};
use super::candidates::CandidateTable;
use super::vocab::{AnswerVocabulary, VocabType};
use super::ArtifactError;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One VQA item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub question: String,
    pub caption: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ocr: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choices: Option<Vec<String>>,
    pub answers: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tags: Option<Vec<String>>,
    pub split: Split,
}

impl Sample {
    /// Most frequent annotator answer; ties go to the earliest annotator.
    pub fn modal_answer(&self) -> Option<&str> {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for a in &self.answers {
            *counts.entry(a.as_str()).or_default() += 1;
        }
        let mut best: Option<(&str, usize)> = None;
        for a in &self.answers {
            let c = counts[a.as_str()];
            if best.is_none_or(|(_, bc)| c > bc) {
                best = Some((a.as_str(), c));
            }
        }
        best.map(|(a, _)| a)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BankRef {
    pub kind: BankKind,
    pub path: String,
    pub grouped: bool,
    /// When true every manifest sample must have a row in the bank.
    #[serde(default = "default_true")]
    pub complete: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabRef {
    #[serde(rename = "type")]
    pub kind: VocabType,
    pub path: String,
}

/// Where stage-1 candidates for every sample come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum CandidateSource {
    /// Computed on demand from the `answer_logits` bank and the vocabulary.
    Logits,
    /// Precomputed JSON Lines table.
    Table { path: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub dataset_name: String,
    pub samples: Vec<Sample>,
    pub banks: Vec<BankRef>,
    pub vocab: VocabRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<CandidateSource>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self, ArtifactError> {
        let m: Manifest = serde_json::from_str(text).map_err(|e| ArtifactError::Schema {
            line: e.line(),
            message: e.to_string(),
        })?;
        if m.version != MANIFEST_VERSION {
            return Err(ArtifactError::Schema {
                line: 1,
                message: format!("unsupported manifest version {}", m.version),
            });
        }
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<(), ArtifactError> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| ArtifactError::io(path, e))
    }
}

/// A loaded, cross-checked manifest with its banks and vocabulary.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub banks: BTreeMap<BankKind, FeatureBank>,
    pub grouped: Option<GroupedFeatureBank>,
    pub vocab: AnswerVocabulary,
    pub candidate_table: Option<CandidateTable>,
    index: HashMap<String, usize>,
}

impl Dataset {
    pub fn samples(&self) -> &[Sample] {
        &self.manifest.samples
    }

    pub fn sample(&self, id: &str) -> Option<&Sample> {
        self.index.get(id).map(|&i| &self.manifest.samples[i])
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.manifest.samples.iter().filter(move |s| s.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn bank(&self, kind: BankKind) -> Option<&FeatureBank> {
        self.banks.get(&kind)
    }
}

/// Loads a manifest, resolves its bank and vocabulary paths relative to the
/// manifest's directory, and verifies every cross-reference.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Dataset, ArtifactError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| ArtifactError::io(path, e))?;
    let manifest = Manifest::parse(&text)?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Dataset::from_manifest(root, manifest)
}

impl Dataset {
    pub fn from_manifest(root: PathBuf, manifest: Manifest) -> Result<Self, ArtifactError> {
        let mut index = HashMap::with_capacity(manifest.samples.len());
        for (i, s) in manifest.samples.iter().enumerate() {
            if index.insert(s.id.clone(), i).is_some() {
                return Err(ArtifactError::DuplicateId(s.id.clone()));
            }
            if let Some(ch) = &s.choices {
                if ch.len() < 2 {
                    return Err(ArtifactError::Invalid(format!(
                        "sample {}: choices must hold at least 2 entries",
                        s.id
                    )));
                }
            }
            if s.split == Split::Train && s.answers.is_empty() {
                return Err(ArtifactError::Invalid(format!(
                    "train sample {} has no answers",
                    s.id
                )));
            }
        }

        let vocab = AnswerVocabulary::load(manifest.vocab.kind, root.join(&manifest.vocab.path))?;

        let mut banks = BTreeMap::new();
        let mut grouped = None;
        for b in &manifest.banks {
            let bank_path = root.join(&b.path);
            let ids = if b.grouped {
                if grouped.is_some() {
                    return Err(ArtifactError::Invalid("more than one grouped bank".into()));
                }
                let g = GroupedFeatureBank::load(&bank_path)?;
                if g.kind() != b.kind {
                    return Err(kind_mismatch(b, g.kind()));
                }
                let ids = g.sample_ids().to_vec();
                grouped = Some(g);
                ids
            } else {
                let fb = FeatureBank::load(&bank_path)?;
                if fb.kind() != b.kind {
                    return Err(kind_mismatch(b, fb.kind()));
                }
                if b.kind == BankKind::AnswerLogits
                    && vocab.kind() == VocabType::Discriminative
                    && fb.dim() != vocab.len()
                {
                    return Err(ArtifactError::Invalid(format!(
                        "answer_logits dim {} differs from vocabulary size {}",
                        fb.dim(),
                        vocab.len()
                    )));
                }
                let ids = fb.sample_ids().to_vec();
                if banks.insert(b.kind, fb).is_some() {
                    return Err(ArtifactError::Invalid(format!(
                        "more than one {} bank",
                        b.kind.as_str()
                    )));
                }
                ids
            };
            check_cross_refs(&manifest, &index, b, &ids)?;
        }

        let candidate_table = match &manifest.candidates {
            Some(CandidateSource::Table { path }) => {
                let table = CandidateTable::load(root.join(path), None)?;
                for (id, _) in table.iter() {
                    if !index.contains_key(id) {
                        return Err(ArtifactError::DanglingId {
                            id: id.to_owned(),
                            origin: path.clone(),
                        });
                    }
                }
                Some(table)
            }
            _ => None,
        };

        Ok(Self {
            root,
            manifest,
            banks,
            grouped,
            vocab,
            candidate_table,
            index,
        })
    }
}

fn kind_mismatch(b: &BankRef, found: BankKind) -> ArtifactError {
    ArtifactError::Invalid(format!(
        "{} declares kind {} but the file holds {}",
        b.path,
        b.kind.as_str(),
        found.as_str()
    ))
}

fn check_cross_refs(
    manifest: &Manifest,
    index: &HashMap<String, usize>,
    b: &BankRef,
    ids: &[String],
) -> Result<(), ArtifactError> {
    for id in ids {
        if !index.contains_key(id) {
            return Err(ArtifactError::DanglingId {
                id: id.clone(),
                origin: b.path.clone(),
            });
        }
    }
    if b.complete {
        let present: std::collections::HashSet<&str> = ids.iter().map(String::as_str).collect();
        if let Some(s) = manifest.samples.iter().find(|s| !present.contains(s.id.as_str())) {
            return Err(ArtifactError::MissingId {
                id: s.id.clone(),
                origin: b.path.clone(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &str, split: Split, answers: &[&str]) -> Sample {
        Sample {
            id: id.into(),
            question: "q?".into(),
            caption: "c".into(),
            ocr: None,
            hint: None,
            choices: None,
            answers: answers.iter().map(|s| s.to_string()).collect(),
            category: None,
            tags: None,
            split,
        }
    }

    #[test]
    fn modal_answer_prefers_first_on_tie() {
        let s = sample("a", Split::Train, &["x", "y", "y", "x", "z"]);
        assert_eq!(s.modal_answer(), Some("x"));
        let s = sample("a", Split::Train, &["x", "y", "y"]);
        assert_eq!(s.modal_answer(), Some("y"));
    }

    #[test]
    fn schema_error_names_field_and_line() {
        let text = "{\n  \"version\": 1,\n  \"dataset_name\": \"d\",\n  \"samples\": [\n    {\"id\": \"a\", \"caption\": \"c\", \"answers\": [], \"split\": \"test\"}\n  ],\n  \"banks\": [],\n  \"vocab\": {\"type\": \"discriminative\", \"path\": \"v.txt\"}\n}\n";
        let err = Manifest::parse(text).unwrap_err();
        match err {
            ArtifactError::Schema { line, message } => {
                assert_eq!(line, 5);
                assert!(message.contains("question"), "{message}");
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let m = Manifest {
            version: 1,
            dataset_name: "d".into(),
            samples: vec![sample("a", Split::Train, &["x"]), sample("a", Split::Test, &["x"])],
            banks: vec![],
            vocab: VocabRef {
                kind: VocabType::Discriminative,
                path: "missing.txt".into(),
            },
            candidates: None,
        };
        let err = Dataset::from_manifest(PathBuf::new(), m).unwrap_err();
        assert!(matches!(err, ArtifactError::DuplicateId(ref id) if id == "a"));
    }
}
