use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::artifacts::AnswerCandidate;

use super::{AutoregressiveScorer, HeuristicsError};

const SUM_TOLERANCE: f64 = 1e-6;

/// A completed beam. `tokens` holds the scored token ids (answer words,
/// then `[EOS]` unless the beam was cut at `max_len`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamCandidate {
    pub answer: String,
    /// `exp(log_score / scored_len)`, in (0, 1].
    pub confidence: f64,
    /// Accumulated natural-log probability of the scored tokens.
    pub log_score: f64,
    pub tokens: Vec<usize>,
}

impl BeamCandidate {
    pub fn scored_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn to_candidate(&self) -> AnswerCandidate {
        AnswerCandidate::new(self.answer.clone(), self.confidence)
    }
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<usize>,
    log_score: f64,
    done: bool,
}

fn hyp_order(a: &Hyp, b: &Hyp) -> Ordering {
    b.log_score
        .total_cmp(&a.log_score)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

fn check_distribution(dist: &[f64], size: usize) -> Result<(), HeuristicsError> {
    if dist.len() != size {
        return Err(HeuristicsError::InvalidDistribution(format!(
            "length {} for vocabulary of {size}",
            dist.len()
        )));
    }
    if let Some(p) = dist.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return Err(HeuristicsError::InvalidDistribution(format!("entry {p}")));
    }
    let sum: f64 = dist.iter().sum();
    if (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(HeuristicsError::InvalidDistribution(format!("sums to {sum}")));
    }
    Ok(())
}

/// Beam search over an autoregressive scorer.
///
/// Each step expands every live beam by its `beam_width` most probable next
/// tokens and keeps the global top `beam_width` by accumulated log
/// probability. Beams that emitted `[EOS]` are frozen but stay in the
/// ranking, so a later, more probable beam can push them out. Beams still
/// live after `max_len` scored tokens are cut there. `[BOS]` is never
/// emitted and `[EOS]` is not allowed as the first token, so every answer
/// has at least one word.
///
/// Results are sorted by length-normalized confidence; answers that render
/// to the same string are merged, keeping the highest confidence.
pub fn beam_search(
    scorer: &dyn AutoregressiveScorer,
    beam_width: usize,
    max_len: usize,
) -> Result<Vec<BeamCandidate>, HeuristicsError> {
    if beam_width == 0 || max_len == 0 {
        return Err(HeuristicsError::InvalidArgument(
            "beam width and max_len must be positive".into(),
        ));
    }
    let vocab = scorer.vocab();
    let (bos, eos) = match (vocab.bos(), vocab.eos()) {
        (Some(b), Some(e)) => (b, e),
        _ => {
            return Err(HeuristicsError::InvalidArgument(
                "vocabulary lacks [BOS]/[EOS]".into(),
            ))
        }
    };

    let mut beams = vec![Hyp {
        tokens: Vec::new(),
        log_score: 0.0,
        done: false,
    }];
    for step in 1..=max_len {
        let mut pool: Vec<Hyp> = Vec::new();
        for hyp in &beams {
            if hyp.done {
                pool.push(hyp.clone());
                continue;
            }
            let mut prefix = Vec::with_capacity(hyp.tokens.len() + 1);
            prefix.push(bos);
            prefix.extend_from_slice(&hyp.tokens);
            let dist = scorer.next_distribution(&prefix)?;
            check_distribution(&dist, vocab.len())?;

            let mut next: Vec<usize> = (0..dist.len())
                .filter(|&t| dist[t] > 0.0 && t != bos && !(t == eos && hyp.tokens.is_empty()))
                .collect();
            next.sort_by(|&a, &b| dist[b].total_cmp(&dist[a]).then(a.cmp(&b)));
            next.truncate(beam_width);
            for t in next {
                let mut tokens = hyp.tokens.clone();
                tokens.push(t);
                pool.push(Hyp {
                    tokens,
                    log_score: hyp.log_score + dist[t].ln(),
                    done: t == eos || step == max_len,
                });
            }
        }
        if pool.is_empty() {
            return Err(HeuristicsError::NoViableBeam);
        }
        pool.sort_by(hyp_order);
        pool.truncate(beam_width);
        beams = pool;
        if beams.iter().all(|h| h.done) {
            break;
        }
    }

    let mut out: Vec<BeamCandidate> = beams
        .into_iter()
        .map(|h| {
            let words: Vec<&str> = h
                .tokens
                .iter()
                .filter(|&&t| t != eos)
                .map(|&t| vocab.get(t).unwrap_or_default())
                .collect();
            BeamCandidate {
                answer: words.join(" "),
                confidence: (h.log_score / h.tokens.len() as f64).exp(),
                log_score: h.log_score,
                tokens: h.tokens,
            }
        })
        .collect();
    out.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(b.log_score.total_cmp(&a.log_score))
            .then_with(|| a.tokens.cmp(&b.tokens))
    });
    let mut seen = HashSet::new();
    out.retain(|c| seen.insert(c.answer.clone()));
    Ok(out)
}
