//! Multi-query ensemble: answer normalization, majority voting and
//! multiple-choice projection.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::artifacts::AnswerCandidate;

/// Version tag of the normalization rules; bump when they change.
pub const NORMALIZATION_VERSION: u32 = 1;

const ARTICLES: [&str; 3] = ["a", "an", "the"];
const NUMBER_WORDS: [&str; 11] = [
    "zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
];

/// Canonical answer form shared by voting and evaluation.
///
/// Lowercases, trims, collapses whitespace, drops trailing periods,
/// removes leading articles and maps the number words zero..ten to digits.
pub fn normalize_answer(text: &str) -> String {
    let mut s = text.to_lowercase();
    loop {
        let trimmed = s.trim().trim_end_matches('.');
        if trimmed.len() == s.len() {
            break;
        }
        s = trimmed.to_owned();
    }
    let mut tokens = s.split_whitespace().peekable();
    while tokens.next_if(|t| ARTICLES.contains(t)).is_some() {}
    tokens
        .map(|t| match NUMBER_WORDS.iter().position(|w| *w == t) {
            Some(n) => n.to_string(),
            None => t.to_owned(),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub answer: String,
    /// Set when more than one answer shared the top count.
    pub tie_broken: bool,
}

/// Majority vote over per-query answers.
///
/// Ties go to the answer with the higher stage-1 confidence (answers absent
/// from `candidates` count as 0), then to the earliest query.
/// Returns `None` only when `answers` is empty.
pub fn majority_vote(answers: &[String], candidates: &[AnswerCandidate]) -> Option<VoteOutcome> {
    let mut counts: Vec<(&str, usize, usize)> = Vec::new();
    for (i, a) in answers.iter().enumerate() {
        match counts.iter_mut().find(|(s, _, _)| *s == a) {
            Some(entry) => entry.1 += 1,
            None => counts.push((a, 1, i)),
        }
    }
    let top = counts.iter().map(|c| c.1).max()?;
    let tied: Vec<_> = counts.iter().filter(|c| c.1 == top).collect();
    if tied.len() == 1 {
        return Some(VoteOutcome {
            answer: tied[0].0.to_owned(),
            tie_broken: false,
        });
    }
    let confidence: HashMap<String, f64> = candidates.iter().fold(HashMap::new(), |mut m, c| {
        let key = normalize_answer(&c.answer);
        let e = m.entry(key).or_insert(0.0);
        *e = f64::max(*e, c.score);
        m
    });
    let conf = |a: &str| {
        confidence
            .get(a)
            .or_else(|| confidence.get(&normalize_answer(a)))
            .copied()
            .unwrap_or(0.0)
    };
    let best = tied
        .iter()
        .min_by(|x, y| conf(y.0).total_cmp(&conf(x.0)).then(x.2.cmp(&y.2)))
        .expect("non-empty tie set");
    Some(VoteOutcome {
        answer: best.0.to_owned(),
        tie_broken: true,
    })
}

/// Parses a parenthesized choice letter such as `(B)` at the start of `text`.
pub fn choice_letter(text: &str) -> Option<usize> {
    let t = text.trim_start();
    let b = t.as_bytes();
    if b.len() >= 3 && b[0] == b'(' && b[2] == b')' && b[1].is_ascii_uppercase() {
        Some((b[1] - b'A') as usize)
    } else {
        None
    }
}

pub fn choice_label(index: usize) -> String {
    format!("({})", (b'A' + index as u8) as char)
}

/// Token-level F1 between two normalized strings (multiset overlap).
pub fn token_f1(a: &str, b: &str) -> f64 {
    let ta: Vec<&str> = a.split_whitespace().collect();
    let tb: Vec<&str> = b.split_whitespace().collect();
    if ta.is_empty() || tb.is_empty() {
        return 0.0;
    }
    let mut pool: HashMap<&str, usize> = HashMap::new();
    for t in &tb {
        *pool.entry(t).or_default() += 1;
    }
    let mut common = 0usize;
    for t in &ta {
        if let Some(c) = pool.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / ta.len() as f64;
    let r = common as f64 / tb.len() as f64;
    2.0 * p * r / (p + r)
}

/// Maps a free-form or lettered answer to a choice index: an in-range
/// `(A)`..`(Z)` letter wins, otherwise the choice with the highest token F1
/// on normalized text, ties to the lowest index. Returns `None` only for an
/// empty choice list.
pub fn project_to_choice(answer: &str, choices: &[String]) -> Option<usize> {
    if choices.is_empty() {
        return None;
    }
    if let Some(i) = choice_letter(answer) {
        if i < choices.len() {
            return Some(i);
        }
    }
    let norm = normalize_answer(answer);
    let mut best = (0, f64::NEG_INFINITY);
    for (i, c) in choices.iter().enumerate() {
        let f1 = token_f1(&norm, &normalize_answer(c));
        if f1 > best.1 {
            best = (i, f1);
        }
    }
    Some(best.0)
}
