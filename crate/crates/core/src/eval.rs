//! Soft-score accuracy, hit rates, prediction-behavior and stage-confusion
//! analyses, per-category breakdowns and ablation grids.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::artifacts::AnswerCandidate;
use crate::vote::{normalize_answer, NORMALIZATION_VERSION};

pub const ANNOTATORS: usize = 10;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("sample {id} has {found} annotator answers, expected {ANNOTATORS}")]
    AnnotatorCount { id: String, found: usize },
    #[error("K must be at least 1")]
    ZeroK,
    #[error("sample {0} has no candidates")]
    EmptyCandidates(String),
    #[error("stage results are misaligned at position {0}")]
    Misaligned(usize),
    #[error("threshold {0} outside (0, 1]")]
    Threshold(f64),
    #[error("no samples to evaluate")]
    Empty,
    #[error("duplicate ablation tag {0:?}")]
    DuplicateTag(String),
    #[error("csv: {0}")]
    Csv(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    /// `min(matches / 3, 1)`.
    #[default]
    Simple,
    /// Mean over the ten leave-one-annotator-out subsets.
    Official,
}

impl std::str::FromStr for Metric {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "simple" => Ok(Metric::Simple),
            "official" => Ok(Metric::Official),
            other => Err(format!("unknown metric {other:?}")),
        }
    }
}

fn credit(matches: usize) -> f64 {
    (matches as f64 / 3.0).min(1.0)
}

fn soft_from_count(matches: usize, total: usize, metric: Metric) -> f64 {
    match metric {
        Metric::Simple => credit(matches),
        Metric::Official => {
            if total == 0 {
                return 0.0;
            }
            let hit = matches as f64 * credit(matches.saturating_sub(1));
            let miss = (total - matches) as f64 * credit(matches);
            (hit + miss) / total as f64
        }
    }
}

/// Soft score of `prediction` against normalized annotator answers.
pub fn soft_score(prediction: &str, answers: &[String], metric: Metric) -> f64 {
    let p = normalize_answer(prediction);
    let matches = answers.iter().filter(|a| normalize_answer(a) == p).count();
    soft_from_count(matches, answers.len(), metric)
}

/// Checks the annotator count when `strict`.
pub fn check_annotators(id: &str, answers: &[String], strict: bool) -> Result<(), EvalError> {
    if strict && answers.len() != ANNOTATORS {
        return Err(EvalError::AnnotatorCount {
            id: id.to_owned(),
            found: answers.len(),
        });
    }
    Ok(())
}

/// Normalized answer → soft score for every distinct annotator answer.
pub fn soft_score_table(answers: &[String], metric: Metric) -> BTreeMap<String, f64> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for a in answers {
        *counts.entry(normalize_answer(a)).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|(a, c)| (a, soft_from_count(c, answers.len(), metric)))
        .collect()
}

/// Best soft score among the first `k` candidates.
pub fn candidate_hit(candidates: &[AnswerCandidate], answers: &[String], k: usize, metric: Metric) -> f64 {
    let table = soft_score_table(answers, metric);
    candidates
        .iter()
        .take(k)
        .map(|c| table.get(&normalize_answer(&c.answer)).copied().unwrap_or(0.0))
        .fold(0.0, f64::max)
}

/// Mean over samples of the best soft score among the top-`k` candidates.
pub fn hit_rate(items: &[(&[AnswerCandidate], &[String])], k: usize, metric: Metric) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    if items.is_empty() {
        return Err(EvalError::Empty);
    }
    let sum: f64 = items.iter().map(|(c, a)| candidate_hit(c, a, k, metric)).sum();
    Ok(sum / items.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    KeepTop1,
    InTop2ToK,
    BeyondTopK,
}

impl Behavior {
    pub const ALL: [Behavior; 3] = [Behavior::KeepTop1, Behavior::InTop2ToK, Behavior::BeyondTopK];

    pub fn as_str(self) -> &'static str {
        match self {
            Behavior::KeepTop1 => "keep_top1",
            Behavior::InTop2ToK => "in_top_2_to_k",
            Behavior::BeyondTopK => "beyond_top_k",
        }
    }
}

/// Where the final answer sits relative to the candidates shown.
pub fn behavior_classify(
    final_answer: &str,
    candidates: &[AnswerCandidate],
    k: usize,
) -> Result<Behavior, EvalError> {
    if candidates.is_empty() {
        return Err(EvalError::EmptyCandidates(String::new()));
    }
    let f = normalize_answer(final_answer);
    if normalize_answer(&candidates[0].answer) == f {
        return Ok(Behavior::KeepTop1);
    }
    if candidates
        .iter()
        .take(k)
        .skip(1)
        .any(|c| normalize_answer(&c.answer) == f)
    {
        return Ok(Behavior::InTop2ToK);
    }
    Ok(Behavior::BeyondTopK)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub correct_to_correct: f64,
    pub correct_to_wrong: f64,
    pub wrong_to_correct: f64,
    pub wrong_to_wrong: f64,
}

impl Confusion {
    pub fn total(&self) -> f64 {
        self.correct_to_correct + self.correct_to_wrong + self.wrong_to_correct + self.wrong_to_wrong
    }
}

/// 2×2 stage-1/stage-2 transition fractions; "correct" means soft score ≥ `tau`.
pub fn stage_confusion(
    stage1: &[(String, f64)],
    stage2: &[(String, f64)],
    tau: f64,
) -> Result<Confusion, EvalError> {
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(EvalError::Threshold(tau));
    }
    if stage1.len() != stage2.len() {
        return Err(EvalError::Misaligned(stage1.len().min(stage2.len())));
    }
    if stage1.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut counts = [0usize; 4];
    for (i, (a, b)) in stage1.iter().zip(stage2).enumerate() {
        if a.0 != b.0 {
            return Err(EvalError::Misaligned(i));
        }
        let idx = (usize::from(a.1 < tau) << 1) | usize::from(b.1 < tau);
        counts[idx] += 1;
    }
    let n = stage1.len() as f64;
    Ok(Confusion {
        correct_to_correct: counts[0] as f64 / n,
        correct_to_wrong: counts[1] as f64 / n,
        wrong_to_correct: counts[2] as f64 / n,
        wrong_to_wrong: counts[3] as f64 / n,
    })
}

/// Everything the evaluator needs about one testing sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleEval {
    pub sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    pub answers: Vec<String>,
    pub candidates: Vec<AnswerCandidate>,
    /// `None` when every query for the sample failed.
    pub final_answer: Option<String>,
    #[serde(default)]
    pub tie_broken: bool,
    /// Modal answers of the in-context examples used for the sample.
    #[serde(default)]
    pub example_answers: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub metric: Metric,
    pub strict_annotators: bool,
    pub tau: f64,
    /// Candidates shown in the prompt, used for behavior classes.
    pub k: usize,
    pub hit_ks: Vec<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            metric: Metric::Simple,
            strict_annotators: true,
            tau: 1.0,
            k: 10,
            hit_ks: vec![1, 5, 10],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleOutcome {
    pub sample_id: String,
    pub stage1_answer: String,
    pub final_answer: String,
    pub stage1_score: f64,
    pub stage2_score: f64,
    pub behavior: Behavior,
    pub tie_broken: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorReport {
    pub fractions: BTreeMap<Behavior, f64>,
    /// Mean stage-2 soft score per class; `None` for empty classes.
    pub accuracy: BTreeMap<Behavior, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryAccuracy {
    pub count: usize,
    pub stage1: f64,
    pub stage2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvariantCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub normalization_version: u32,
    pub metric: Metric,
    pub tau: f64,
    pub evaluated: usize,
    pub failed: Vec<String>,
    pub complete: bool,
    pub accuracy: f64,
    pub stage1_accuracy: f64,
    pub hit_rate: BTreeMap<usize, f64>,
    pub example_hit_rate: Option<f64>,
    pub tie_broken: usize,
    pub behavior: BehaviorReport,
    pub confusion: Confusion,
    pub per_category: BTreeMap<String, CategoryAccuracy>,
    pub samples: Vec<SampleOutcome>,
    pub invariants: Vec<InvariantCheck>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for x in xs {
        sum += x;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Evaluates a run. Samples without a final answer count as failed and are
/// left out of every metric.
pub fn evaluate(items: &[SampleEval], opts: &EvalOptions) -> Result<EvalReport, EvalError> {
    if !(opts.tau > 0.0 && opts.tau <= 1.0) {
        return Err(EvalError::Threshold(opts.tau));
    }
    let mut failed = Vec::new();
    let mut done: Vec<(&SampleEval, &str)> = Vec::with_capacity(items.len());
    for it in items {
        check_annotators(&it.sample_id, &it.answers, opts.strict_annotators)?;
        if it.candidates.is_empty() {
            return Err(EvalError::EmptyCandidates(it.sample_id.clone()));
        }
        match &it.final_answer {
            Some(a) => done.push((it, a)),
            None => failed.push(it.sample_id.clone()),
        }
    }
    if done.is_empty() {
        return Err(EvalError::Empty);
    }

    let metric = opts.metric;
    let mut samples = Vec::with_capacity(done.len());
    for (it, fin) in &done {
        let top1 = &it.candidates[0].answer;
        samples.push(SampleOutcome {
            sample_id: it.sample_id.clone(),
            stage1_answer: top1.clone(),
            final_answer: (*fin).to_owned(),
            stage1_score: soft_score(top1, &it.answers, metric),
            stage2_score: soft_score(fin, &it.answers, metric),
            behavior: behavior_classify(fin, &it.candidates, opts.k)?,
            tie_broken: it.tie_broken,
        });
    }
    let n = samples.len() as f64;
    let accuracy = samples.iter().map(|s| s.stage2_score).sum::<f64>() / n;
    let stage1_accuracy = samples.iter().map(|s| s.stage1_score).sum::<f64>() / n;

    let pairs: Vec<(&[AnswerCandidate], &[String])> = done
        .iter()
        .map(|(it, _)| (it.candidates.as_slice(), it.answers.as_slice()))
        .collect();
    let ks: BTreeSet<usize> = opts.hit_ks.iter().copied().filter(|&k| k > 0).collect();
    let mut hit = BTreeMap::new();
    for k in ks {
        hit.insert(k, hit_rate(&pairs, k, metric)?);
    }

    let example_hit_rate = if done.iter().any(|(it, _)| !it.example_answers.is_empty()) {
        mean(done.iter().map(|(it, _)| {
            let table = soft_score_table(&it.answers, metric);
            it.example_answers
                .iter()
                .map(|a| table.get(&normalize_answer(a)).copied().unwrap_or(0.0))
                .fold(0.0, f64::max)
        }))
    } else {
        None
    };

    let mut fractions = BTreeMap::new();
    let mut class_acc = BTreeMap::new();
    for b in Behavior::ALL {
        let members: Vec<f64> = samples
            .iter()
            .filter(|s| s.behavior == b)
            .map(|s| s.stage2_score)
            .collect();
        fractions.insert(b, members.len() as f64 / n);
        class_acc.insert(b, mean(members.into_iter()));
    }

    let s1: Vec<(String, f64)> = samples.iter().map(|s| (s.sample_id.clone(), s.stage1_score)).collect();
    let s2: Vec<(String, f64)> = samples.iter().map(|s| (s.sample_id.clone(), s.stage2_score)).collect();
    let confusion = stage_confusion(&s1, &s2, opts.tau)?;

    let mut by_cat: BTreeMap<String, Vec<&SampleOutcome>> = BTreeMap::new();
    for ((it, _), s) in done.iter().zip(&samples) {
        if let Some(c) = &it.category {
            by_cat.entry(c.clone()).or_default().push(s);
        }
    }
    let per_category = by_cat
        .into_iter()
        .map(|(c, v)| {
            let m = v.len() as f64;
            let acc = CategoryAccuracy {
                count: v.len(),
                stage1: v.iter().map(|s| s.stage1_score).sum::<f64>() / m,
                stage2: v.iter().map(|s| s.stage2_score).sum::<f64>() / m,
            };
            (c, acc)
        })
        .collect();

    let mut report = EvalReport {
        normalization_version: NORMALIZATION_VERSION,
        metric,
        tau: opts.tau,
        evaluated: samples.len(),
        complete: failed.is_empty(),
        failed,
        accuracy,
        stage1_accuracy,
        hit_rate: hit,
        example_hit_rate,
        tie_broken: samples.iter().filter(|s| s.tie_broken).count(),
        behavior: BehaviorReport {
            fractions,
            accuracy: class_acc,
        },
        confusion,
        per_category,
        samples,
        invariants: Vec::new(),
    };
    report.invariants = report.check_invariants();
    Ok(report)
}

const SUM_TOL: f64 = 1e-12;

impl EvalReport {
    pub fn check_invariants(&self) -> Vec<InvariantCheck> {
        let mut out = Vec::new();
        let mut push = |name: &str, passed: bool, detail: String| {
            out.push(InvariantCheck {
                name: name.to_owned(),
                passed,
                detail,
            })
        };
        let b: f64 = self.behavior.fractions.values().sum();
        push("behavior_sum", (b - 1.0).abs() <= SUM_TOL, format!("{b}"));
        let c = self.confusion.total();
        push("confusion_sum", (c - 1.0).abs() <= SUM_TOL, format!("{c}"));
        let in_unit = |x: f64| (0.0..=1.0).contains(&x);
        let accs_ok = in_unit(self.accuracy)
            && in_unit(self.stage1_accuracy)
            && self.hit_rate.values().all(|&h| in_unit(h));
        push("accuracy_range", accs_ok, format!("{} / {}", self.accuracy, self.stage1_accuracy));
        let rates: Vec<f64> = self.hit_rate.values().copied().collect();
        let monotone = rates.windows(2).all(|w| w[0] <= w[1]);
        push("hit_rate_monotone", monotone, format!("{rates:?}"));
        if let Some(&h1) = self.hit_rate.get(&1) {
            push(
                "hit_rate_1_is_stage1",
                h1 == self.stage1_accuracy,
                format!("{h1} vs {}", self.stage1_accuracy),
            );
        }
        let n = self.samples.len() as f64;
        let recomputed = self.samples.iter().map(|s| s.stage2_score).sum::<f64>() / n;
        push(
            "accuracy_is_mean",
            recomputed == self.accuracy,
            format!("{recomputed} vs {}", self.accuracy),
        );
        out
    }

    pub fn invariants_hold(&self) -> bool {
        self.invariants.iter().all(|c| c.passed)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_markdown(&self) -> String {
        let mut md = String::new();
        let pct = |x: f64| format!("{:.2}", 100.0 * x);
        let _ = writeln!(md, "# Evaluation report\n");
        let _ = writeln!(md, "| metric | value |\n|---|---|");
        let _ = writeln!(md, "| samples evaluated | {} |", self.evaluated);
        let _ = writeln!(md, "| samples failed | {} |", self.failed.len());
        let _ = writeln!(md, "| stage-1 accuracy | {} |", pct(self.stage1_accuracy));
        let _ = writeln!(md, "| accuracy | {} |", pct(self.accuracy));
        if let Some(e) = self.example_hit_rate {
            let _ = writeln!(md, "| example hit rate | {} |", pct(e));
        }
        let _ = writeln!(md, "| tie-broken votes | {} |", self.tie_broken);

        let _ = writeln!(md, "\n## Hit rate\n\n| K | hit rate |\n|---|---|");
        for (k, h) in &self.hit_rate {
            let _ = writeln!(md, "| {k} | {} |", pct(*h));
        }

        let _ = writeln!(md, "\n## Prediction behaviors\n\n| behavior | fraction | accuracy |\n|---|---|---|");
        for b in Behavior::ALL {
            let f = self.behavior.fractions.get(&b).copied().unwrap_or(0.0);
            let a = self.behavior.accuracy.get(&b).copied().flatten();
            let _ = writeln!(md, "| {} | {} | {} |", b.as_str(), pct(f), a.map_or("-".into(), pct));
        }

        let c = &self.confusion;
        let _ = writeln!(md, "\n## Stage-1 vs stage-2\n\n| stage-1 \\ stage-2 | correct | wrong |\n|---|---|---|");
        let _ = writeln!(md, "| correct | {} | {} |", pct(c.correct_to_correct), pct(c.correct_to_wrong));
        let _ = writeln!(md, "| wrong | {} | {} |", pct(c.wrong_to_correct), pct(c.wrong_to_wrong));

        if !self.per_category.is_empty() {
            let _ = writeln!(md, "\n## Per category\n\n| category | samples | stage-1 | stage-2 |\n|---|---|---|---|");
            for (cat, a) in &self.per_category {
                let _ = writeln!(md, "| {cat} | {} | {} | {} |", a.count, pct(a.stage1), pct(a.stage2));
            }
        }

        let _ = writeln!(md, "\n## Invariants\n\n| check | status |\n|---|---|");
        for inv in &self.invariants {
            let _ = writeln!(md, "| {} | {} |", inv.name, if inv.passed { "pass" } else { "FAIL" });
        }
        md
    }
}

/// One ablation cell; metrics are `None` when the cell did not run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub tag: String,
    pub axes: BTreeMap<String, String>,
    pub hit_rate: Option<f64>,
    pub example_hit_rate: Option<f64>,
    pub accuracy: Option<f64>,
}

/// A requested cell: tag, axis values and the K whose hit rate to show.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub tag: String,
    pub axes: BTreeMap<String, String>,
    pub k: usize,
}

/// Merges per-cell reports into a grid in request order.
pub fn ablation_grid(
    requested: &[CellSpec],
    results: &[(String, EvalReport)],
) -> Result<Vec<AblationCell>, EvalError> {
    let mut seen = BTreeSet::new();
    for c in requested {
        if !seen.insert(c.tag.as_str()) {
            return Err(EvalError::DuplicateTag(c.tag.clone()));
        }
    }
    let mut by_tag: HashMap<&str, &EvalReport> = HashMap::new();
    for (tag, r) in results {
        if by_tag.insert(tag.as_str(), r).is_some() {
            return Err(EvalError::DuplicateTag(tag.clone()));
        }
    }
    Ok(requested
        .iter()
        .map(|c| {
            let r = by_tag.get(c.tag.as_str());
            AblationCell {
                tag: c.tag.clone(),
                axes: c.axes.clone(),
                hit_rate: r.and_then(|r| r.hit_rate.get(&c.k).copied()),
                example_hit_rate: r.and_then(|r| r.example_hit_rate),
                accuracy: r.map(|r| r.accuracy),
            }
        })
        .collect())
}

fn axis_names(cells: &[AblationCell]) -> Vec<String> {
    let mut names: Vec<String> = Vec::new();
    for c in cells {
        for k in c.axes.keys() {
            if !names.contains(k) {
                names.push(k.clone());
            }
        }
    }
    names
}

pub fn grid_to_markdown(cells: &[AblationCell]) -> String {
    let axes = axis_names(cells);
    let pct = |x: Option<f64>| x.map_or("-".to_owned(), |v| format!("{:.2}", 100.0 * v));
    let mut md = String::new();
    let _ = write!(md, "| cell |");
    for a in &axes {
        let _ = write!(md, " {a} |");
    }
    let _ = writeln!(md, " hit rate | example hit rate | accuracy |");
    let _ = writeln!(md, "|{}", "---|".repeat(axes.len() + 4));
    for c in cells {
        let _ = write!(md, "| {} |", c.tag);
        for a in &axes {
            let _ = write!(md, " {} |", c.axes.get(a).map_or("", String::as_str));
        }
        let _ = writeln!(
            md,
            " {} | {} | {} |",
            pct(c.hit_rate),
            pct(c.example_hit_rate),
            pct(c.accuracy)
        );
    }
    md
}

pub fn grid_to_csv(cells: &[AblationCell]) -> Result<String, EvalError> {
    let axes = axis_names(cells);
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["cell".to_owned()];
    header.extend(axes.iter().cloned());
    header.extend(["hit_rate", "example_hit_rate", "accuracy"].map(String::from));
    w.write_record(&header).map_err(|e| EvalError::Csv(e.to_string()))?;
    let num = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    for c in cells {
        let mut row = vec![c.tag.clone()];
        row.extend(axes.iter().map(|a| c.axes.get(a).cloned().unwrap_or_default()));
        row.extend([num(c.hit_rate), num(c.example_hit_rate), num(c.accuracy)]);
        w.write_record(&row).map_err(|e| EvalError::Csv(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| EvalError::Csv(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| EvalError::Csv(e.to_string()))
}
