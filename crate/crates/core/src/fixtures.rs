//! Deterministic synthetic datasets with planted answer structure.
//!
//! Every sample belongs to a hidden answer class. Fused features cluster by
//! class, question and image features carry a weaker signal, and the
//! classifier scores put the gold answer first for most samples and inside
//! the top few for the rest. The ledger written next to the artifacts
//! records the planted truths for oracle checks.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    AnswerVocabulary, ArtifactError, BankKind, BankRef, CandidateSource, FeatureBank,
    GroupedFeatureBank, Manifest, Sample, Split, VocabRef, VocabType, BOS, EOS,
};
use crate::heuristics::ScorerFile;

const ANSWERS: [&str; 48] = [
    "helium", "leash", "motocross", "dirt bike", "surfing", "umbrella", "giraffe", "pizza",
    "fire hydrant", "tennis", "kite", "banana", "skateboard", "laptop", "elephant", "broccoli",
    "frisbee", "clock", "teddy bear", "sailboat", "zebra", "sandwich", "baseball", "toilet",
    "snowboard", "bicycle", "hot dog", "parking meter", "refrigerator", "horse", "airplane",
    "train", "pumpkin", "wine", "volcano", "graphite", "hydrogen", "lighthouse", "cactus",
    "penguin", "violin", "tractor", "lemon", "camera", "wheelchair", "tulip", "anchor", "owl",
];

const CATEGORIES: [&str; 6] = [
    "vehicles", "animals", "food", "sports", "science", "objects",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureSpec {
    pub seed: u64,
    /// Number of testing samples; the training split gets five times as many.
    pub size: usize,
    pub dim: usize,
    pub classes: usize,
    /// Probability that the classifier ranks the gold answer first.
    pub stage1_accuracy: f64,
}

impl Default for FixtureSpec {
    fn default() -> Self {
        Self {
            seed: 7,
            size: 200,
            dim: 64,
            classes: 32,
            stage1_accuracy: 0.6,
        }
    }
}

/// Planted truths of a generated fixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureLedger {
    pub spec: FixtureSpec,
    pub gold_by_id: BTreeMap<String, String>,
    pub gold_by_question: BTreeMap<String, String>,
    pub stage1_correct: BTreeMap<String, bool>,
    pub group_lengths: BTreeMap<String, usize>,
    pub total_group_rows: usize,
}

/// An in-memory fixture, ready to be written.
#[derive(Debug, Clone)]
pub struct Fixture {
    pub manifest: Manifest,
    pub banks: Vec<FeatureBank>,
    pub grouped: GroupedFeatureBank,
    pub vocab: AnswerVocabulary,
    pub generative_vocab: AnswerVocabulary,
    pub scorers: BTreeMap<String, ScorerFile>,
    pub ledger: FixtureLedger,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gauss(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn around(rng: &mut ChaCha8Rng, center: &[f64], weight: f64, noise: f64) -> Vec<f32> {
    center
        .iter()
        .map(|c| (weight * c + noise * gauss(rng)) as f32)
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Bank of i.i.d. standard-normal entries.
pub fn gaussian_bank(seed: u64, count: usize, dim: usize, kind: BankKind) -> FeatureBank {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rows: Vec<f32> = (0..count * dim).map(|_| gauss(&mut rng) as f32).collect();
    let ids = (0..count).map(|i| format!("g{i:05}")).collect();
    FeatureBank::new(kind, dim, ids, rows).expect("finite gaussian rows")
}

pub fn generate(spec: &FixtureSpec) -> Result<Fixture, ArtifactError> {
    if spec.size == 0 || spec.dim == 0 {
        return Err(ArtifactError::Invalid("fixture size and dim must be positive".into()));
    }
    if !(3..=ANSWERS.len()).contains(&spec.classes) {
        return Err(ArtifactError::Invalid(format!(
            "classes must be in 3..={}",
            ANSWERS.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes = spec.classes;
    let answers: Vec<&str> = ANSWERS[..classes].to_vec();
    let dim = spec.dim;

    let fused_centers: Vec<Vec<f64>> = (0..classes).map(|_| unit(&mut rng, dim)).collect();
    let image_centers: Vec<Vec<f64>> = (0..classes).map(|_| unit(&mut rng, dim)).collect();
    let topic_centers: Vec<Vec<f64>> = (0..CATEGORIES.len()).map(|_| unit(&mut rng, dim)).collect();

    let n_test = spec.size;
    let n_train = 5 * spec.size;
    let mut samples = Vec::with_capacity(n_test + n_train);
    let mut fused = Vec::new();
    let mut question = Vec::new();
    let mut image = Vec::new();
    let mut logits = Vec::new();
    let mut groups = Vec::new();
    let mut ledger = FixtureLedger {
        spec: spec.clone(),
        gold_by_id: BTreeMap::new(),
        gold_by_question: BTreeMap::new(),
        stage1_correct: BTreeMap::new(),
        group_lengths: BTreeMap::new(),
        total_group_rows: 0,
    };
    let mut scorer_inputs = Vec::new();

    for idx in 0..n_test + n_train {
        let (split, id) = if idx < n_test {
            (Split::Test, format!("test{idx:05}"))
        } else {
            (Split::Train, format!("train{:05}", idx - n_test))
        };
        let class = rng.random_range(0..classes);
        let gold = answers[class];
        let category = CATEGORIES[class % CATEGORIES.len()];

        // Annotators: the gold answer at least four times, the rest split
        // between two distractors with at most three votes each.
        let gold_votes = rng.random_range(4..=10usize);
        let mut others: Vec<usize> = (0..classes).filter(|&c| c != class).collect();
        others.shuffle(&mut rng);
        let rest = 10 - gold_votes;
        let first = rest.min(3);
        let mut ann = vec![gold.to_owned(); gold_votes];
        ann.extend(std::iter::repeat_n(answers[others[0]].to_owned(), first));
        ann.extend(std::iter::repeat_n(answers[others[1]].to_owned(), rest - first));

        let question_text = format!("Item {idx}: what {category} thing does this picture show?");
        let caption = format!("a {category} scene, photo number {idx}.");

        fused.extend(around(&mut rng, &fused_centers[class], 1.0, 0.08));
        question.extend(around(&mut rng, &topic_centers[class % CATEGORIES.len()], 1.0, 0.15));
        image.extend(around(&mut rng, &image_centers[class], 0.35, 0.15));

        let correct = rng.random::<f64>() < spec.stage1_accuracy;
        let confuser = others[rng.random_range(0..others.len().min(4))];
        let mut l: Vec<f64> = (0..classes).map(|_| -4.0 + 1.2 * gauss(&mut rng)).collect();
        if correct {
            l[class] = 2.5 + 0.8 * gauss(&mut rng);
        } else {
            l[confuser] = 2.5 + 0.8 * gauss(&mut rng);
            l[class] = l[confuser] - 0.3 - rng.random::<f64>() * 2.0;
        }
        let scores: Vec<f64> = l.iter().map(|&x| sigmoid(x)).collect();
        logits.extend(scores.iter().map(|&s| s as f32));

        let len = rng.random_range(1..=6usize);
        let rows: Vec<Vec<f32>> = (0..len)
            .map(|_| around(&mut rng, &fused_centers[class], 1.0, 0.1))
            .collect();
        ledger.group_lengths.insert(id.clone(), len);
        ledger.total_group_rows += len;
        groups.push((id.clone(), rows));

        if split == Split::Test {
            ledger.gold_by_id.insert(id.clone(), gold.to_owned());
            ledger.gold_by_question.insert(question_text.clone(), gold.to_owned());
            ledger.stage1_correct.insert(id.clone(), correct);
        }
        scorer_inputs.push((id.clone(), scores));
        samples.push(Sample {
            id,
            question: question_text,
            caption,
            ocr: None,
            hint: None,
            choices: None,
            answers: ann,
            category: Some(category.to_owned()),
            tags: None,
            split,
        });
    }

    let ids: Vec<String> = samples.iter().map(|s| s.id.clone()).collect();
    let banks = vec![
        FeatureBank::new(BankKind::Fused, dim, ids.clone(), fused)?,
        FeatureBank::new(BankKind::Question, dim, ids.clone(), question)?,
        FeatureBank::new(BankKind::Image, dim, ids.clone(), image)?,
        FeatureBank::new(BankKind::AnswerLogits, classes, ids, logits)?,
    ];
    let grouped = GroupedFeatureBank::from_groups(BankKind::Fused, dim, groups)?;
    let vocab = AnswerVocabulary::new(
        VocabType::Discriminative,
        answers.iter().map(|s| s.to_string()).collect(),
    )?;

    let mut words: Vec<String> = vec![BOS.into(), EOS.into()];
    for a in &answers {
        for w in a.split(' ') {
            if !words.iter().any(|x| x == w) {
                words.push(w.to_owned());
            }
        }
    }
    let generative_vocab = AnswerVocabulary::new(VocabType::Generative, words)?;
    let scorers = scorer_inputs
        .into_iter()
        .map(|(id, scores)| (id, scorer_for(&answers, &scores)))
        .collect();

    let mut bank_refs: Vec<BankRef> = banks
        .iter()
        .map(|b| BankRef {
            kind: b.kind(),
            path: format!("banks/{}.prfb", b.kind().as_str()),
            grouped: false,
            complete: true,
        })
        .collect();
    bank_refs.push(BankRef {
        kind: BankKind::Fused,
        path: "banks/grouped.prfg".into(),
        grouped: true,
        complete: true,
    });
    let manifest = Manifest {
        version: 1,
        dataset_name: format!("synthetic-seed{}-n{}", spec.seed, spec.size),
        samples,
        banks: bank_refs,
        vocab: VocabRef {
            kind: VocabType::Discriminative,
            path: "vocab.txt".into(),
        },
        candidates: Some(CandidateSource::Logits),
    };
    Ok(Fixture {
        manifest,
        banks,
        grouped,
        vocab,
        generative_vocab,
        scorers,
        ledger,
    })
}

fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

/// Word-level scorer whose first step follows the classifier's top answers.
fn scorer_for(answers: &[&str], scores: &[f64]) -> ScorerFile {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(5);
    let total: f64 = order.iter().map(|&i| scores[i]).sum();

    let mut first: BTreeMap<String, f64> = BTreeMap::new();
    let mut table: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for &i in &order {
        let mut words = answers[i].split(' ');
        let head = words.next().unwrap_or_default();
        *first.entry(head.to_owned()).or_default() += round6(scores[i] / total);
        let mut prefix = format!("{BOS} {head}");
        for w in words {
            table.insert(prefix.clone(), BTreeMap::from([(w.to_owned(), 1.0)]));
            prefix = format!("{prefix} {w}");
        }
    }
    // Absorb rounding drift into the top word.
    let drift = 1.0 - first.values().sum::<f64>();
    let top = answers[order[0]].split(' ').next().unwrap_or_default();
    *first.get_mut(top).expect("top word present") += drift;
    table.insert(BOS.to_owned(), first);
    ScorerFile {
        default: BTreeMap::from([(EOS.to_owned(), 1.0)]),
        table,
    }
}

fn write_text(path: &Path, text: &str) -> Result<(), ArtifactError> {
    fs::write(path, text).map_err(|e| ArtifactError::io(path, e))
}

impl Fixture {
    /// Writes the fixture tree under `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), ArtifactError> {
        for sub in ["banks", "scorers"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| ArtifactError::io(&p, e))?;
        }
        self.manifest.write(dir.join("manifest.json"))?;
        for (b, r) in self.banks.iter().zip(&self.manifest.banks) {
            b.write(dir.join(&r.path))?;
        }
        self.grouped.write(dir.join("banks/grouped.prfg"))?;
        self.vocab.write(dir.join("vocab.txt"))?;
        self.generative_vocab.write(dir.join("generative_vocab.txt"))?;
        for (id, s) in &self.scorers {
            let mut text = serde_json::to_string_pretty(s).expect("scorer serializes");
            text.push('\n');
            write_text(&dir.join("scorers").join(format!("{id}.json")), &text)?;
        }
        let mut ledger = serde_json::to_string_pretty(&self.ledger).expect("ledger serializes");
        ledger.push('\n');
        write_text(&dir.join("oracle.json"), &ledger)
    }
}

/// Generates and writes a fixture; returns its ledger.
pub fn write_fixture(dir: &Path, spec: &FixtureSpec) -> Result<FixtureLedger, ArtifactError> {
    let fixture = generate(spec)?;
    fixture.write(dir)?;
    Ok(fixture.ledger)
}

pub fn load_ledger(path: &Path) -> Result<FixtureLedger, ArtifactError> {
    let text = fs::read_to_string(path).map_err(|e| ArtifactError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| ArtifactError::Schema {
        line: e.line(),
        message: e.to_string(),
    })
}
