use std::cmp::Ordering;

use crate::artifacts::{AnswerCandidate, AnswerVocabulary};

use super::HeuristicsError;

/// Top-`k` answers of a classifier score vector, highest score first.
/// Equal scores keep ascending vocabulary order.
pub fn top_k_candidates(
    logits: &[f32],
    vocab: &AnswerVocabulary,
    k: usize,
) -> Result<Vec<AnswerCandidate>, HeuristicsError> {
    if logits.len() != vocab.len() {
        return Err(HeuristicsError::DimMismatch {
            expected: vocab.len(),
            actual: logits.len(),
        });
    }
    if k > logits.len() {
        return Err(HeuristicsError::TooMany {
            requested: k,
            available: logits.len(),
        });
    }
    if let Some(i) = logits.iter().position(|v| !v.is_finite()) {
        return Err(HeuristicsError::NonFinite { index: i });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    let cmp = |a: &usize, b: &usize| -> Ordering {
        logits[*b].total_cmp(&logits[*a]).then(a.cmp(b))
    };
    if k < order.len() {
        order.select_nth_unstable_by(k - 1, cmp);
        order.truncate(k);
    }
    order.sort_unstable_by(cmp);
    Ok(order
        .into_iter()
        .map(|j| AnswerCandidate::new(vocab.entries()[j].clone(), f64::from(logits[j])))
        .collect())
}
