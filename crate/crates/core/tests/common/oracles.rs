//! Brute-force reference implementations used as test oracles.

use std::collections::{HashMap, HashSet};

use prophet::artifacts::{AnswerVocabulary, FeatureBank, VocabType, BOS, EOS};
use prophet::heuristics::{AutoregressiveScorer, HeuristicsError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Scorer with an explicit distribution for every prefix up to a length.
pub struct TableScorer {
    pub vocab: AnswerVocabulary,
    pub table: HashMap<Vec<usize>, Vec<f64>>,
}

impl AutoregressiveScorer for TableScorer {
    fn vocab(&self) -> &AnswerVocabulary {
        &self.vocab
    }

    fn next_distribution(&self, prefix: &[usize]) -> Result<Vec<f64>, HeuristicsError> {
        self.table
            .get(prefix)
            .cloned()
            .ok_or_else(|| HeuristicsError::Scorer(format!("no entry for {prefix:?}")))
    }
}

pub fn generative_vocab(words: usize) -> AnswerVocabulary {
    let mut v = vec![BOS.to_string(), EOS.to_string()];
    v.extend((0..words).map(|i| format!("w{i}")));
    AnswerVocabulary::new(VocabType::Generative, v).unwrap()
}

fn random_distribution(rng: &mut ChaCha8Rng, size: usize, root: bool) -> Vec<f64> {
    loop {
        let mut d: Vec<f64> = (0..size)
            .map(|t| {
                if t == 0 || rng.random_bool(0.25) {
                    0.0
                } else {
                    rng.random_range(0.01..1.0)
                }
            })
            .collect();
        if root {
            d[1] = 0.0;
        }
        let sum: f64 = d.iter().sum();
        if sum > 0.0 && (!root || d[2..].iter().any(|&p| p > 0.0)) {
            d.iter_mut().for_each(|p| *p /= sum);
            return d;
        }
    }
}

/// Random sparse scorer over `words` answer words, defined for every prefix
/// of at most `max_len` tokens.
pub fn random_scorer(seed: u64, words: usize, max_len: usize) -> TableScorer {
    let vocab = generative_vocab(words);
    let size = vocab.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = HashMap::new();
    let mut frontier = vec![vec![0usize]];
    for len in 0..max_len {
        let mut next = Vec::new();
        for prefix in frontier {
            table.insert(prefix.clone(), random_distribution(&mut rng, size, len == 0));
            for w in 2..size {
                let mut p = prefix.clone();
                p.push(w);
                next.push(p);
            }
        }
        frontier = next;
    }
    TableScorer { vocab, table }
}

/// A complete sequence: scored tokens and their summed log probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub tokens: Vec<usize>,
    pub log_score: f64,
}

/// Every sequence the decoder can produce: one or more words, ended by
/// `[EOS]` or cut at `max_len` tokens, through non-zero probabilities only.
pub fn enumerate_sequences(scorer: &dyn AutoregressiveScorer, max_len: usize) -> Vec<Sequence> {
    let eos = scorer.vocab().eos().unwrap();
    let bos = scorer.vocab().bos().unwrap();
    let mut out = Vec::new();
    let mut stack = vec![Sequence {
        tokens: Vec::new(),
        log_score: 0.0,
    }];
    while let Some(seq) = stack.pop() {
        let mut prefix = vec![bos];
        prefix.extend(&seq.tokens);
        let dist = scorer.next_distribution(&prefix).unwrap();
        for (t, &p) in dist.iter().enumerate() {
            if p <= 0.0 || t == bos || (t == eos && seq.tokens.is_empty()) {
                continue;
            }
            let mut tokens = seq.tokens.clone();
            tokens.push(t);
            let s = Sequence {
                tokens,
                log_score: seq.log_score + p.ln(),
            };
            if t == eos || s.tokens.len() == max_len {
                out.push(s);
            } else {
                stack.push(s);
            }
        }
    }
    out
}

/// Reference search: at every step all one-token extensions of all live
/// hypotheses compete for `width` slots together with finished ones.
pub fn stepwise_reference(scorer: &dyn AutoregressiveScorer, width: usize, max_len: usize) -> Vec<Sequence> {
    let eos = scorer.vocab().eos().unwrap();
    let bos = scorer.vocab().bos().unwrap();
    let mut beams: Vec<(Sequence, bool)> = vec![(
        Sequence {
            tokens: Vec::new(),
            log_score: 0.0,
        },
        false,
    )];
    for step in 1..=max_len {
        let mut pool = Vec::new();
        for (seq, done) in &beams {
            if *done {
                pool.push((seq.clone(), true));
                continue;
            }
            let mut prefix = vec![bos];
            prefix.extend(&seq.tokens);
            let dist = scorer.next_distribution(&prefix).unwrap();
            for (t, &p) in dist.iter().enumerate() {
                if p <= 0.0 || t == bos || (t == eos && seq.tokens.is_empty()) {
                    continue;
                }
                let mut tokens = seq.tokens.clone();
                tokens.push(t);
                pool.push((
                    Sequence {
                        tokens,
                        log_score: seq.log_score + p.ln(),
                    },
                    t == eos || step == max_len,
                ));
            }
        }
        pool.sort_by(|a, b| {
            b.0.log_score
                .total_cmp(&a.0.log_score)
                .then_with(|| a.0.tokens.cmp(&b.0.tokens))
        });
        pool.truncate(width);
        beams = pool;
        if beams.iter().all(|b| b.1) {
            break;
        }
    }
    beams.into_iter().map(|b| b.0).collect()
}

/// Final ordering of decoded answers: length-normalized confidence, then raw
/// score, then tokens; later duplicates of an answer string are dropped.
pub fn rank_answers(vocab: &AnswerVocabulary, seqs: Vec<Sequence>) -> Vec<(String, f64, Sequence)> {
    let eos = vocab.eos().unwrap();
    let mut out: Vec<(String, f64, Sequence)> = seqs
        .into_iter()
        .map(|s| {
            let answer = s
                .tokens
                .iter()
                .filter(|&&t| t != eos)
                .map(|&t| vocab.get(t).unwrap())
                .collect::<Vec<_>>()
                .join(" ");
            let conf = (s.log_score / s.tokens.len() as f64).exp();
            (answer, conf, s)
        })
        .collect();
    out.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then(b.2.log_score.total_cmp(&a.2.log_score))
            .then_with(|| a.2.tokens.cmp(&b.2.tokens))
    });
    let mut seen = HashSet::new();
    out.retain(|(a, _, _)| seen.insert(a.clone()));
    out
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    let mut s = 0.0f64;
    for i in 0..a.len() {
        s += a[i] as f64 * b[i] as f64;
    }
    s
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
}

/// Full argsort of cosine similarity, descending, ties by row index.
pub fn knn_argsort(query: &[f32], bank: &FeatureBank, n: usize) -> Vec<String> {
    let mut idx: Vec<(usize, f64)> = (0..bank.count()).map(|i| (i, cosine(query, bank.row(i)))).collect();
    idx.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    idx.into_iter()
        .take(n)
        .map(|(i, _)| bank.sample_ids()[i].clone())
        .collect()
}

/// Mean of all pairwise row cosines, as a plain double loop.
pub fn group_similarity_loop(a: &[f32], b: &[f32], dim: usize) -> f64 {
    let (la, lb) = (a.len() / dim, b.len() / dim);
    let mut sum = 0.0;
    for i in 0..la {
        for j in 0..lb {
            sum += cosine(&a[i * dim..(i + 1) * dim], &b[j * dim..(j + 1) * dim]);
        }
    }
    sum / (la * lb) as f64
}

/// Random group of `1..=max_rows` Gaussian rows.
pub fn random_group(rng: &mut ChaCha8Rng, dim: usize, max_rows: usize) -> Vec<f32> {
    let rows = rng.random_range(1..=max_rows);
    (0..rows * dim)
        .map(|_| rng.sample::<f32, _>(rand_distr::StandardNormal))
        .collect()
}
