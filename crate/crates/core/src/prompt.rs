//! Heuristics-enhanced prompt rendering.
//!
//! A prompt is a list of lines joined by a `===` separator line: the
//! optional head, `N` in-context example blocks, and the testing block whose
//! `Answer:` slot is left empty.

use serde::{Deserialize, Serialize};

use crate::artifacts::{AnswerCandidate, Sample};
use crate::heuristics::ExampleSelection;
use crate::vote::{choice_label, project_to_choice};

pub const SEPARATOR: &str = "===";

pub const STANDARD_HEAD: &str = "Please answer the question according to the context and the answer candidates. Each answer candidate is associated with a confidence score within a bracket. The true answer may not be included in the candidates.";
pub const CHOICE_HEAD: &str = "Please choose the correct answer in the choices according to the context, the question and the answer candidates. Each answer candidate is associated with a confidence score within a bracket. The true answer may not be included in the candidates.";
/// Head used when no candidates are shown.
pub const PLAIN_HEAD: &str = "Please answer the question according to the above context.";
pub const PLAIN_CHOICE_HEAD: &str =
    "Please choose the correct answer in the choices according to the context and the question.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFormat {
    Standard,
    MultipleChoice,
    /// Multiple choice with the sample hint appended to the caption.
    ScienceHint,
    /// Standard plus an `OCR:` line.
    Ocr,
}

impl TaskFormat {
    pub fn has_choices(self) -> bool {
        matches!(self, TaskFormat::MultipleChoice | TaskFormat::ScienceHint)
    }
}

impl std::str::FromStr for TaskFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(TaskFormat::Standard),
            "multiple_choice" => Ok(TaskFormat::MultipleChoice),
            "science_hint" => Ok(TaskFormat::ScienceHint),
            "ocr" => Ok(TaskFormat::Ocr),
            other => Err(format!("unknown task format {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PromptConfig {
    pub task_format: TaskFormat,
    pub k: usize,
    pub n: usize,
    pub t: usize,
    pub include_head: bool,
    pub include_scores: bool,
    pub include_caption: bool,
    /// Adds a `Tags:` line for samples that carry tags.
    pub include_tags: bool,
    pub score_decimals: usize,
    pub max_prompt_chars: Option<usize>,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            task_format: TaskFormat::Standard,
            k: 10,
            n: 16,
            t: 5,
            include_head: true,
            include_scores: true,
            include_caption: true,
            include_tags: false,
            score_decimals: 2,
            max_prompt_chars: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptBundle {
    pub test_sample_id: String,
    pub prompts: Vec<String>,
    pub example_ids_per_prompt: Vec<Vec<String>>,
}

#[derive(Debug, thiserror::Error)]
pub enum PromptError {
    #[error("need {needed} neighbors for {n} examples x {t} queries, have {available}")]
    InsufficientNeighbors {
        needed: usize,
        n: usize,
        t: usize,
        available: usize,
    },
    #[error("sample {0} has no choices but the format needs them")]
    MissingChoices(String),
    #[error("sample {0} has no OCR tokens but the format needs them")]
    MissingOcr(String),
    #[error("sample {0} has no annotated answers")]
    MissingAnswer(String),
    #[error("no candidates for sample {0} while K > 0")]
    MissingCandidates(String),
    #[error("unknown example sample {0}")]
    UnknownExample(String),
    #[error("prompt of {chars} characters exceeds the budget of {budget} even without examples")]
    BudgetTooSmall { chars: usize, budget: usize },
    #[error("invalid config: {0}")]
    Config(String),
}

/// Fixed-point score text with half-up rounding (`1.0` → `1.00`).
pub fn format_score(score: f64, decimals: usize) -> String {
    let factor = 10u64.pow(decimals as u32);
    // The 1e-9 nudge rounds values like 0.285 (stored just below) upwards.
    let scaled = (score * factor as f64 + 0.5 + 1e-9).floor().max(0.0) as u64;
    if decimals == 0 {
        return scaled.to_string();
    }
    format!("{}.{:0width$}", scaled / factor, scaled % factor, width = decimals)
}

/// Splits a ranked selection into `t` prompts of `n` examples each.
///
/// Prompt `i` takes ranks `i, i + t, i + 2t, ...`; each list is then
/// reversed so the most similar example sits next to the testing block.
pub fn partition_examples(
    selection: &ExampleSelection,
    n: usize,
    t: usize,
) -> Result<Vec<Vec<String>>, PromptError> {
    if t == 0 {
        return Err(PromptError::Config("t must be at least 1".into()));
    }
    let needed = n * t;
    if selection.neighbor_ids.len() < needed {
        return Err(PromptError::InsufficientNeighbors {
            needed,
            n,
            t,
            available: selection.neighbor_ids.len(),
        });
    }
    Ok((0..t)
        .map(|q| {
            let mut ids: Vec<String> = (0..n)
                .map(|j| selection.neighbor_ids[q + j * t].clone())
                .collect();
            ids.reverse();
            ids
        })
        .collect())
}

pub fn prompt_head(cfg: &PromptConfig) -> Option<&'static str> {
    if !cfg.include_head {
        return None;
    }
    Some(match (cfg.task_format.has_choices(), cfg.k > 0) {
        (false, true) => STANDARD_HEAD,
        (true, true) => CHOICE_HEAD,
        (false, false) => PLAIN_HEAD,
        (true, false) => PLAIN_CHOICE_HEAD,
    })
}

fn candidates_line(sample: &Sample, cands: &[AnswerCandidate], cfg: &PromptConfig) -> Result<String, PromptError> {
    if cands.is_empty() {
        return Err(PromptError::MissingCandidates(sample.id.clone()));
    }
    let items: Vec<String> = cands
        .iter()
        .take(cfg.k)
        .map(|c| {
            if cfg.include_scores {
                format!("{}({})", c.answer, format_score(c.score, cfg.score_decimals))
            } else {
                c.answer.clone()
            }
        })
        .collect();
    Ok(format!("Candidates: {}", items.join(", ")))
}

fn choices(sample: &Sample) -> Result<&[String], PromptError> {
    sample
        .choices
        .as_deref()
        .ok_or_else(|| PromptError::MissingChoices(sample.id.clone()))
}

fn block_lines(
    sample: &Sample,
    cands: &[AnswerCandidate],
    cfg: &PromptConfig,
    with_gold: bool,
) -> Result<Vec<String>, PromptError> {
    let mut lines = Vec::with_capacity(6);
    if cfg.include_caption {
        let context = match (cfg.task_format, &sample.hint) {
            (TaskFormat::ScienceHint, Some(hint)) if !hint.is_empty() => {
                format!("{} {}", sample.caption, hint)
            }
            _ => sample.caption.clone(),
        };
        lines.push(format!("Context: {context}"));
    }
    if cfg.task_format == TaskFormat::Ocr {
        let ocr = sample
            .ocr
            .as_ref()
            .ok_or_else(|| PromptError::MissingOcr(sample.id.clone()))?;
        lines.push(format!("OCR: {}.", ocr.join(", ")));
    }
    lines.push(format!("Question: {}", sample.question));
    if cfg.include_tags {
        if let Some(tags) = sample.tags.as_ref().filter(|t| !t.is_empty()) {
            lines.push(format!("Tags: {}", tags.join(", ")));
        }
    }
    if cfg.k > 0 {
        lines.push(candidates_line(sample, cands, cfg)?);
    }
    if cfg.task_format.has_choices() {
        let ch = choices(sample)?;
        let rendered: Vec<String> = ch
            .iter()
            .enumerate()
            .map(|(i, c)| format!("{} {c}", choice_label(i)))
            .collect();
        lines.push(format!("Choices: {}", rendered.join(", ")));
    }
    if with_gold {
        let gold = sample
            .modal_answer()
            .ok_or_else(|| PromptError::MissingAnswer(sample.id.clone()))?;
        let gold = if cfg.task_format.has_choices() {
            let idx = project_to_choice(gold, choices(sample)?)
                .ok_or_else(|| PromptError::MissingChoices(sample.id.clone()))?;
            choice_label(idx)
        } else {
            gold.to_owned()
        };
        lines.push(format!("Answer: {gold}"));
    } else {
        lines.push("Answer:".to_owned());
    }
    Ok(lines)
}

fn join(lines: &[String]) -> String {
    lines.join(&format!("\n{SEPARATOR}\n"))
}

/// In-context example block ending with the modal annotator answer (or the
/// matching choice letter for multiple-choice formats).
pub fn render_example_block(
    sample: &Sample,
    cands: &[AnswerCandidate],
    cfg: &PromptConfig,
) -> Result<String, PromptError> {
    Ok(join(&block_lines(sample, cands, cfg, true)?))
}

/// Testing block ending with an empty `Answer:` slot.
pub fn render_test_block(
    sample: &Sample,
    cands: &[AnswerCandidate],
    cfg: &PromptConfig,
) -> Result<String, PromptError> {
    Ok(join(&block_lines(sample, cands, cfg, false)?))
}

/// Lookup of training samples and their stage-1 candidates.
pub trait ExampleSource {
    fn sample(&self, id: &str) -> Option<&Sample>;
    fn candidates(&self, id: &str) -> Option<&[AnswerCandidate]>;
}

/// Renders the `t` prompts for one testing sample.
pub fn build_prompts(
    test: &Sample,
    test_candidates: &[AnswerCandidate],
    selection: &ExampleSelection,
    source: &dyn ExampleSource,
    cfg: &PromptConfig,
) -> Result<PromptBundle, PromptError> {
    let partitions = partition_examples(selection, cfg.n, cfg.t)?;
    let head = prompt_head(cfg);
    let test_block = render_test_block(test, test_candidates, cfg)?;

    let mut prompts = Vec::with_capacity(cfg.t);
    let mut example_ids = Vec::with_capacity(cfg.t);
    for ids in partitions {
        let mut blocks = Vec::with_capacity(ids.len());
        for id in &ids {
            let sample = source
                .sample(id)
                .ok_or_else(|| PromptError::UnknownExample(id.clone()))?;
            let cands = source.candidates(id).unwrap_or(&[]);
            blocks.push(render_example_block(sample, cands, cfg)?);
        }
        let mut ids = ids;
        let assemble = |blocks: &[String]| {
            let mut parts: Vec<String> = Vec::with_capacity(blocks.len() + 2);
            parts.extend(head.map(str::to_owned));
            parts.extend(blocks.iter().cloned());
            parts.push(test_block.clone());
            join(&parts)
        };
        let mut prompt = assemble(&blocks);
        if let Some(budget) = cfg.max_prompt_chars {
            let mut skip = 0;
            while prompt.chars().count() > budget {
                if skip == blocks.len() {
                    return Err(PromptError::BudgetTooSmall {
                        chars: prompt.chars().count(),
                        budget,
                    });
                }
                skip += 1;
                prompt = assemble(&blocks[skip..]);
            }
            ids.drain(..skip);
        }
        prompts.push(prompt);
        example_ids.push(ids);
    }
    Ok(PromptBundle {
        test_sample_id: test.id.clone(),
        prompts,
        example_ids_per_prompt: example_ids,
    })
}
