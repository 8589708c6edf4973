//! Stage-1 answer heuristics: candidates from classifier scores or beam
//! search, and answer-aware example selection by nearest-neighbor search.

mod beam;
mod knn;
mod scorer;
mod topk;

pub use crate::artifacts::AnswerCandidate;
pub use beam::{beam_search, BeamCandidate};
pub use knn::{
    combined_knn, cosine_knn, group_similarity, grouped_knn, select_examples, ExampleSelection,
    SelectionStrategy,
};
pub use scorer::{AutoregressiveScorer, ScorerFile, SyntheticScorer};
pub use topk::top_k_candidates;

use crate::artifacts::{BankKind, CandidateSource, Dataset};

#[derive(Debug, thiserror::Error)]
pub enum HeuristicsError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimMismatch { expected: usize, actual: usize },
    #[error("requested {requested} items but only {available} are available")]
    TooMany { requested: usize, available: usize },
    #[error("non-finite score at index {index}")]
    NonFinite { index: usize },
    #[error("query vector has zero norm")]
    ZeroNormQuery,
    #[error("zero-norm row {row} in group {group}")]
    ZeroNormRow { group: usize, row: usize },
    #[error("strategy needs the {0} bank")]
    MissingBank(String),
    #[error("random selection needs a seed")]
    MissingSeed,
    #[error("unknown sample {0:?}")]
    UnknownSample(String),
    #[error("scorer distribution invalid: {0}")]
    InvalidDistribution(String),
    #[error("every expansion has zero probability")]
    NoViableBeam,
    #[error("empty candidate list")]
    EmptyCandidates,
    #[error("{0}")]
    InvalidArgument(String),
    #[error("scorer: {0}")]
    Scorer(String),
}

/// The stage-1 prediction: the highest-ranked candidate.
pub fn stage1_top1(candidates: &[AnswerCandidate]) -> Result<&AnswerCandidate, HeuristicsError> {
    candidates.first().ok_or(HeuristicsError::EmptyCandidates)
}

/// Top-`k` candidates for one sample, read from the manifest's candidate
/// table or computed from its `answer_logits` bank.
pub fn sample_candidates(
    dataset: &Dataset,
    id: &str,
    k: usize,
) -> Result<Vec<AnswerCandidate>, HeuristicsError> {
    match (&dataset.manifest.candidates, &dataset.candidate_table) {
        (Some(CandidateSource::Table { .. }), Some(table)) => {
            let list = table
                .get(id)
                .ok_or_else(|| HeuristicsError::UnknownSample(id.to_owned()))?;
            Ok(list.iter().take(k).cloned().collect())
        }
        _ => {
            let bank = dataset
                .bank(BankKind::AnswerLogits)
                .ok_or_else(|| HeuristicsError::MissingBank("answer_logits".into()))?;
            let logits = bank
                .get(id)
                .ok_or_else(|| HeuristicsError::UnknownSample(id.to_owned()))?;
            top_k_candidates(logits, &dataset.vocab, k)
        }
    }
}
