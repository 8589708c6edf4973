//! On-disk artifacts: JSON dataset manifest, binary feature banks,
//! vocabularies and candidate tables.

mod bank;
mod candidates;
mod manifest;
mod vocab;

use std::path::{Path, PathBuf};

pub use bank::{BankKind, FeatureBank, GroupedFeatureBank, FLAT_MAGIC, FORMAT_VERSION, GROUPED_MAGIC};
pub(crate) use bank::norm64;
pub use candidates::{validate_list, AnswerCandidate, CandidateTable};
pub use manifest::{
    load_manifest, BankRef, CandidateSource, Dataset, Manifest, Sample, Split, VocabRef,
    MANIFEST_VERSION,
};
pub use vocab::{AnswerVocabulary, VocabType, BOS, EOS};

#[derive(Debug, thiserror::Error)]
pub enum ArtifactError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("schema violation at line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("duplicate sample id {0:?}")]
    DuplicateId(String),
    #[error("{origin} references unknown sample id {id:?}")]
    DanglingId { id: String, origin: String },
    #[error("{origin} has no row for sample id {id:?}")]
    MissingId { id: String, origin: String },
    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("payload length mismatch: expected {expected}, found {actual}")]
    LengthMismatch { expected: usize, actual: usize },
    #[error("file truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("non-finite value in row {row}")]
    NonFinite { row: usize },
    #[error("invalid offsets: {0}")]
    Offsets(String),
    #[error("malformed bank: {0}")]
    Format(String),
    #[error("vocabulary: {0}")]
    Vocab(String),
    #[error("candidates: {0}")]
    Candidates(String),
    #[error("{0}")]
    Invalid(String),
}

impl ArtifactError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        ArtifactError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}
