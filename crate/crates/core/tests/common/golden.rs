//! Golden prompt cases shared by test targets.

use std::collections::HashMap;
use std::path::PathBuf;

use prophet::artifacts::{AnswerCandidate, Sample};
use prophet::heuristics::ExampleSelection;
use prophet::prompt::{build_prompts, ExampleSource, PromptConfig};
use serde::Deserialize;

#[derive(Deserialize)]
pub struct Entry {
    pub sample: Sample,
    pub candidates: Vec<(String, f64)>,
}

impl Entry {
    pub fn candidates(&self) -> Vec<AnswerCandidate> {
        self.candidates
            .iter()
            .map(|(a, s)| AnswerCandidate::new(a.clone(), *s))
            .collect()
    }
}

#[derive(Deserialize)]
pub struct Case {
    pub golden: String,
    pub config: PromptConfig,
    pub example: Entry,
    pub test: Entry,
}

struct One(HashMap<String, (Sample, Vec<AnswerCandidate>)>);

impl ExampleSource for One {
    fn sample(&self, id: &str) -> Option<&Sample> {
        self.0.get(id).map(|e| &e.0)
    }
    fn candidates(&self, id: &str) -> Option<&[AnswerCandidate]> {
        self.0.get(id).map(|e| e.1.as_slice())
    }
}

pub fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden")
}

/// Renders a single-example, single-query prompt for a golden case.
pub fn render(case: &Case) -> String {
    let ex = &case.example;
    let source = One(HashMap::from([(
        ex.sample.id.clone(),
        (ex.sample.clone(), ex.candidates()),
    )]));
    let selection = ExampleSelection {
        test_sample_id: case.test.sample.id.clone(),
        neighbor_ids: vec![ex.sample.id.clone()],
        similarities: vec![0.9],
    };
    let bundle = build_prompts(
        &case.test.sample,
        &case.test.candidates(),
        &selection,
        &source,
        &case.config,
    )
    .unwrap();
    assert_eq!(bundle.prompts.len(), 1);
    bundle.prompts.into_iter().next().unwrap()
}

pub fn load_cases() -> Vec<Case> {
    let raw = std::fs::read_to_string(data_dir().join("cases.json")).unwrap();
    serde_json::from_str(&raw).unwrap()
}

pub fn expected(case: &Case) -> String {
    std::fs::read_to_string(data_dir().join(&case.golden)).unwrap()
}
