use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::artifacts::{norm64, BankKind, Dataset, FeatureBank, GroupedFeatureBank, Split};

use super::HeuristicsError;

/// Ranked in-context example ids for one testing sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExampleSelection {
    pub test_sample_id: String,
    pub neighbor_ids: Vec<String>,
    pub similarities: Vec<f64>,
}

impl ExampleSelection {
    pub fn len(&self) -> usize {
        self.neighbor_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbor_ids.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionStrategy {
    Rand,
    QuesImg,
    Fused,
    FusedQuesImg,
    AnswerLogits,
    /// Per-answer-word feature groups (generative stage-1 models).
    Grouped,
}

impl SelectionStrategy {
    /// The five strategies compared in the selection ablation, in table order.
    pub const ABLATION: [SelectionStrategy; 5] = [
        SelectionStrategy::Rand,
        SelectionStrategy::QuesImg,
        SelectionStrategy::Fused,
        SelectionStrategy::FusedQuesImg,
        SelectionStrategy::AnswerLogits,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SelectionStrategy::Rand => "rand",
            SelectionStrategy::QuesImg => "ques_img",
            SelectionStrategy::Fused => "fused",
            SelectionStrategy::FusedQuesImg => "fused_ques_img",
            SelectionStrategy::AnswerLogits => "answer_logits",
            SelectionStrategy::Grouped => "grouped",
        }
    }

    /// Row label used in rendered ablation tables.
    pub fn label(self) -> &'static str {
        match self {
            SelectionStrategy::Rand => "(a) rand",
            SelectionStrategy::QuesImg => "(b) ques + img",
            SelectionStrategy::Fused => "(c) fused",
            SelectionStrategy::FusedQuesImg => "(d) fused + ques + img",
            SelectionStrategy::AnswerLogits => "(e) answer logits",
            SelectionStrategy::Grouped => "grouped answer words",
        }
    }

    /// Flat banks whose cosine similarities are averaged.
    pub fn banks(self) -> &'static [BankKind] {
        match self {
            SelectionStrategy::Rand | SelectionStrategy::Grouped => &[],
            SelectionStrategy::QuesImg => &[BankKind::Question, BankKind::Image],
            SelectionStrategy::Fused => &[BankKind::Fused],
            SelectionStrategy::FusedQuesImg => &[BankKind::Fused, BankKind::Question, BankKind::Image],
            SelectionStrategy::AnswerLogits => &[BankKind::AnswerLogits],
        }
    }
}

impl fmt::Display for SelectionStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SelectionStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "rand" => Ok(SelectionStrategy::Rand),
            "ques_img" => Ok(SelectionStrategy::QuesImg),
            "fused" => Ok(SelectionStrategy::Fused),
            "fused_ques_img" => Ok(SelectionStrategy::FusedQuesImg),
            "answer_logits" => Ok(SelectionStrategy::AnswerLogits),
            "grouped" => Ok(SelectionStrategy::Grouped),
            other => Err(format!("unknown selection strategy {other:?}")),
        }
    }
}

pub(crate) fn dot64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

/// Keeps the `n` best `(tie_index, score)` pairs: score descending, then
/// tie index ascending. `-inf` scores are never selected.
fn rank(mut scored: Vec<(usize, f64)>, n: usize) -> Result<Vec<(usize, f64)>, HeuristicsError> {
    scored.retain(|(_, s)| *s != f64::NEG_INFINITY);
    if n > scored.len() {
        return Err(HeuristicsError::TooMany {
            requested: n,
            available: scored.len(),
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let cmp = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    if n < scored.len() {
        scored.select_nth_unstable_by(n - 1, cmp);
        scored.truncate(n);
    }
    scored.sort_unstable_by(cmp);
    Ok(scored)
}

fn query_norm(query: &[f32]) -> Result<f64, HeuristicsError> {
    let norm = norm64(query);
    if norm == 0.0 {
        return Err(HeuristicsError::ZeroNormQuery);
    }
    Ok(norm)
}

/// Exhaustive cosine top-`n` over a flat bank. Rows whose id is in
/// `exclude`, and zero-norm rows, are never selected.
pub fn cosine_knn(
    query: &[f32],
    bank: &FeatureBank,
    n: usize,
    exclude: &HashSet<String>,
) -> Result<ExampleSelection, HeuristicsError> {
    if query.len() != bank.dim() {
        return Err(HeuristicsError::DimMismatch {
            expected: bank.dim(),
            actual: query.len(),
        });
    }
    let qn = query_norm(query)?;
    let scored = (0..bank.count())
        .map(|i| {
            let rn = bank.norm(i);
            let sim = if rn == 0.0 || exclude.contains(&bank.sample_ids()[i]) {
                f64::NEG_INFINITY
            } else {
                dot64(query, bank.row(i)) / (qn * rn)
            };
            (i, sim)
        })
        .collect();
    let ranked = rank(scored, n)?;
    Ok(ExampleSelection {
        test_sample_id: String::new(),
        neighbor_ids: ranked.iter().map(|(i, _)| bank.sample_ids()[*i].clone()).collect(),
        similarities: ranked.iter().map(|(_, s)| *s).collect(),
    })
}

/// Selects `n` examples for `test_id` from `pool` with a flat-bank strategy
/// (mean of per-bank cosines) or seeded random draws.
///
/// Ties are broken by the row order of the strategy's first bank; random
/// selections report similarity 0.
pub fn combined_knn(
    test_id: &str,
    strategy: SelectionStrategy,
    banks: &BTreeMap<BankKind, FeatureBank>,
    pool: &[String],
    n: usize,
    seed: Option<u64>,
) -> Result<ExampleSelection, HeuristicsError> {
    let pool_without_test: Vec<&String> = pool.iter().filter(|id| id.as_str() != test_id).collect();
    if strategy == SelectionStrategy::Rand {
        let seed = seed.ok_or(HeuristicsError::MissingSeed)?;
        if n > pool_without_test.len() {
            return Err(HeuristicsError::TooMany {
                requested: n,
                available: pool_without_test.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(test_id.as_bytes()));
        let mut ids = pool_without_test;
        let (picked, _) = ids.partial_shuffle(&mut rng, n);
        return Ok(ExampleSelection {
            test_sample_id: test_id.to_owned(),
            neighbor_ids: picked.iter().map(|s| (*s).clone()).collect(),
            similarities: vec![0.0; n],
        });
    }
    if strategy == SelectionStrategy::Grouped {
        return Err(HeuristicsError::MissingBank("grouped (use grouped_knn)".into()));
    }

    let kinds = strategy.banks();
    let mut used = Vec::with_capacity(kinds.len());
    for kind in kinds {
        let bank = banks
            .get(kind)
            .ok_or_else(|| HeuristicsError::MissingBank(kind.as_str().into()))?;
        let query = bank
            .get(test_id)
            .ok_or_else(|| HeuristicsError::UnknownSample(test_id.to_owned()))?;
        used.push((bank, query, query_norm(query)?));
    }
    let primary = used[0].0;
    let allowed: HashSet<&str> = pool_without_test.iter().map(|s| s.as_str()).collect();
    let scored = (0..primary.count())
        .filter(|&i| allowed.contains(primary.sample_ids()[i].as_str()))
        .map(|i| {
            let id = &primary.sample_ids()[i];
            let mut total = 0.0;
            for (bank, query, qn) in &used {
                let Some(pos) = bank.position(id) else {
                    return (i, f64::NEG_INFINITY);
                };
                let rn = bank.norm(pos);
                if rn == 0.0 {
                    return (i, f64::NEG_INFINITY);
                }
                total += dot64(query, bank.row(pos)) / (qn * rn);
            }
            (i, total / used.len() as f64)
        })
        .collect();
    let ranked = rank(scored, n)?;
    Ok(ExampleSelection {
        test_sample_id: test_id.to_owned(),
        neighbor_ids: ranked.iter().map(|(i, _)| primary.sample_ids()[*i].clone()).collect(),
        similarities: ranked.iter().map(|(_, s)| *s).collect(),
    })
}

/// Mean pairwise cosine between two groups of `dim`-long rows.
///
/// The pairwise terms are summed in sorted order, so swapping the arguments
/// gives a bit-identical result.
pub fn group_similarity(a: &[f32], b: &[f32], dim: usize) -> Result<f64, HeuristicsError> {
    let (na, nb) = check_group(a, dim, 0).and_then(|na| Ok((na, check_group(b, dim, 1)?)))?;
    let mut terms = Vec::with_capacity(na.len() * nb.len());
    for (ra, &norm_a) in a.chunks_exact(dim).zip(&na) {
        for (rb, &norm_b) in b.chunks_exact(dim).zip(&nb) {
            terms.push(dot64(ra, rb) / (norm_a * norm_b));
        }
    }
    terms.sort_unstable_by(f64::total_cmp);
    let sum: f64 = terms.iter().sum();
    Ok(sum / terms.len() as f64)
}

fn check_group(g: &[f32], dim: usize, group: usize) -> Result<Vec<f64>, HeuristicsError> {
    if dim == 0 || g.is_empty() || !g.len().is_multiple_of(dim) {
        return Err(HeuristicsError::DimMismatch {
            expected: dim,
            actual: g.len(),
        });
    }
    g.chunks_exact(dim)
        .enumerate()
        .map(|(row, r)| {
            let n = norm64(r);
            if n == 0.0 {
                Err(HeuristicsError::ZeroNormRow { group, row })
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Exhaustive top-`n` over a grouped bank scored by [`group_similarity`].
/// Groups containing a zero-norm row are never selected.
pub fn grouped_knn(
    query: &[f32],
    bank: &GroupedFeatureBank,
    n: usize,
    exclude: &HashSet<String>,
) -> Result<ExampleSelection, HeuristicsError> {
    let dim = bank.dim();
    if query.is_empty() || !query.len().is_multiple_of(dim) {
        return Err(HeuristicsError::DimMismatch {
            expected: dim,
            actual: query.len(),
        });
    }
    if query.chunks_exact(dim).any(|r| norm64(r) == 0.0) {
        return Err(HeuristicsError::ZeroNormQuery);
    }
    let scored = (0..bank.count())
        .map(|i| {
            if exclude.contains(&bank.sample_ids()[i]) {
                return (i, f64::NEG_INFINITY);
            }
            match group_similarity(query, bank.group(i), dim) {
                Ok(s) => (i, s),
                Err(_) => (i, f64::NEG_INFINITY),
            }
        })
        .collect();
    let ranked = rank(scored, n)?;
    Ok(ExampleSelection {
        test_sample_id: String::new(),
        neighbor_ids: ranked.iter().map(|(i, _)| bank.sample_ids()[*i].clone()).collect(),
        similarities: ranked.iter().map(|(_, s)| *s).collect(),
    })
}

/// Picks `n` training examples for `test_id` from a loaded dataset.
pub fn select_examples(
    dataset: &Dataset,
    test_id: &str,
    strategy: SelectionStrategy,
    n: usize,
    seed: Option<u64>,
) -> Result<ExampleSelection, HeuristicsError> {
    let pool: Vec<String> = dataset.split(Split::Train).map(|s| s.id.clone()).collect();
    if strategy != SelectionStrategy::Grouped {
        return combined_knn(test_id, strategy, &dataset.banks, &pool, n, seed);
    }
    let bank = dataset
        .grouped
        .as_ref()
        .ok_or_else(|| HeuristicsError::MissingBank("grouped".into()))?;
    let query = bank
        .get(test_id)
        .ok_or_else(|| HeuristicsError::UnknownSample(test_id.to_owned()))?;
    let in_pool: HashSet<&str> = pool.iter().map(String::as_str).collect();
    let exclude: HashSet<String> = bank
        .sample_ids()
        .iter()
        .filter(|id| !in_pool.contains(id.as_str()) || id.as_str() == test_id)
        .cloned()
        .collect();
    let mut sel = grouped_knn(query, bank, n, &exclude)?;
    sel.test_sample_id = test_id.to_owned();
    Ok(sel)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
