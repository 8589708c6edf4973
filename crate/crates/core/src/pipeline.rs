//! End-to-end runs: stage-1 heuristics, prompt rendering, completions,
//! voting and evaluation, with resumable transcripts, replay and ablation
//! sweeps.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::artifacts::{
    load_manifest, AnswerCandidate, AnswerVocabulary, ArtifactError, CandidateTable, Dataset,
    Sample, Split, VocabType,
};
use crate::eval::{
    ablation_grid, evaluate, grid_to_csv, grid_to_markdown, AblationCell, CellSpec, EvalError,
    EvalOptions, EvalReport, SampleEval,
};
use crate::fixtures::load_ledger;
use crate::gateway::{
    prompt_sha256, read_transcripts, CompletionClient, CompletionRequest, CompletionResult,
    GatewayConfig, GatewayError, HttpClient, HttpScorer, MockClient, MockPolicy, TranscriptKey,
    TranscriptRecord, TranscriptWriter,
};
use crate::heuristics::{
    beam_search, sample_candidates, select_examples, AutoregressiveScorer, ExampleSelection,
    HeuristicsError, SelectionStrategy, SyntheticScorer,
};
use crate::prompt::{build_prompts, ExampleSource, PromptConfig, PromptError, TaskFormat};
use crate::vote::{majority_vote, normalize_answer, project_to_choice};

pub const CONFIG_FILE: &str = "config.json";
pub const TRANSCRIPT_FILE: &str = "transcripts.jsonl";
pub const VOTES_FILE: &str = "votes.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_MD: &str = "report.md";

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Artifact(#[from] ArtifactError),
    #[error(transparent)]
    Heuristics(#[from] HeuristicsError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("stopped after {0} new completions")]
    Interrupted(usize),
}

impl PipelineError {
    fn io(path: &Path, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// Process exit code: 4 for configuration problems, 3 for gateway
    /// failures, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Prompt(PromptError::Config(_)) => 4,
            PipelineError::Prompt(PromptError::InsufficientNeighbors { .. }) => 4,
            PipelineError::Heuristics(HeuristicsError::MissingSeed)
            | PipelineError::Heuristics(HeuristicsError::MissingBank(_)) => 4,
            PipelineError::Gateway(_) | PipelineError::Interrupted(_) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VoteMode {
    #[default]
    Normalized,
    Raw,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateMode {
    /// Classifier scores or the precomputed table named by the manifest.
    #[default]
    Manifest,
    /// Beam search over per-sample generative scorers.
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub source: CandidateMode,
    /// Candidates kept per sample for evaluation; prompts show the first K.
    pub eval_k: usize,
    /// Directory of `<sample id>.json` scorer tables.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scorer_dir: Option<PathBuf>,
    /// Remote scorer URL; `{id}` is replaced by the sample id.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scorer_url: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub generative_vocab: Option<PathBuf>,
    pub beam_width: usize,
    pub max_len: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            source: CandidateMode::Manifest,
            eval_k: 10,
            scorer_dir: None,
            scorer_url: None,
            generative_vocab: None,
            beam_width: 10,
            max_len: 4,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GatewayKind {
    #[default]
    Mock,
    Http,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockKind {
    #[default]
    EchoTop1,
    CandidateOracle,
    Scripted,
}

impl std::str::FromStr for MockKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "echo_top1" => Ok(MockKind::EchoTop1),
            "candidate_oracle" => Ok(MockKind::CandidateOracle),
            "scripted" => Ok(MockKind::Scripted),
            other => Err(format!("unknown mock policy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatewaySettings {
    pub kind: GatewayKind,
    pub policy: MockKind,
    /// Fixture ledger with gold answers; defaults to `oracle.json` next to
    /// the manifest.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracle: Option<PathBuf>,
    /// JSON object mapping prompt SHA-256 hex digests to replies.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub script: Option<PathBuf>,
    pub strict: bool,
    pub http: GatewayConfig,
}

impl Default for GatewaySettings {
    fn default() -> Self {
        Self {
            kind: GatewayKind::Mock,
            policy: MockKind::EchoTop1,
            oracle: None,
            script: None,
            strict: true,
            http: GatewayConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub output_dir: PathBuf,
    pub strategy: SelectionStrategy,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub workers: usize,
    pub vote: VoteMode,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dump_prompts: Option<PathBuf>,
    pub prompt: PromptConfig,
    pub stage1: Stage1Config,
    pub gateway: GatewaySettings,
    pub eval: EvalOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            manifest: PathBuf::from("manifest.json"),
            output_dir: PathBuf::from("run"),
            strategy: SelectionStrategy::Fused,
            seed: None,
            workers: 1,
            vote: VoteMode::Normalized,
            dump_prompts: None,
            prompt: PromptConfig::default(),
            stage1: Stage1Config::default(),
            gateway: GatewaySettings::default(),
            eval: EvalOptions::default(),
        }
    }
}

fn rebase(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn rebase_opt(base: &Path, p: &mut Option<PathBuf>) {
    if let Some(p) = p {
        rebase(base, p);
    }
}

impl RunConfig {
    /// Parses TOML; relative paths are resolved against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self, PipelineError> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        cfg.rebase(base);
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        if path.extension().is_some_and(|e| e == "json") {
            let mut cfg: RunConfig =
                serde_json::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
            cfg.rebase(base);
            Ok(cfg)
        } else {
            Self::from_toml(&text, base)
        }
    }

    fn rebase(&mut self, base: &Path) {
        rebase(base, &mut self.manifest);
        rebase(base, &mut self.output_dir);
        rebase_opt(base, &mut self.dump_prompts);
        rebase_opt(base, &mut self.stage1.scorer_dir);
        rebase_opt(base, &mut self.stage1.generative_vocab);
        rebase_opt(base, &mut self.gateway.oracle);
        rebase_opt(base, &mut self.gateway.script);
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Checks that need the loaded dataset.
    pub fn validate(&self, dataset: &Dataset) -> Result<(), PipelineError> {
        let p = &self.prompt;
        if p.t == 0 {
            return Err(PipelineError::Config("t must be at least 1".into()));
        }
        if self.workers == 0 {
            return Err(PipelineError::Config("workers must be at least 1".into()));
        }
        if self.strategy == SelectionStrategy::Rand && self.seed.is_none() {
            return Err(PipelineError::Config("the rand strategy needs a seed".into()));
        }
        let pool = dataset.count(Split::Train);
        if p.n * p.t > pool {
            return Err(PipelineError::Config(format!(
                "N*T = {} exceeds the {pool} training samples",
                p.n * p.t
            )));
        }
        if self.stage1.eval_k < p.k.max(1) {
            return Err(PipelineError::Config(format!(
                "stage1.eval_k {} is below K {}",
                self.stage1.eval_k, p.k
            )));
        }
        if self.stage1.source == CandidateMode::Manifest
            && dataset.manifest.candidates.as_ref().is_none_or(|c| {
                matches!(c, crate::artifacts::CandidateSource::Logits)
            })
            && self.stage1.eval_k > dataset.vocab.len()
        {
            return Err(PipelineError::Config(format!(
                "stage1.eval_k {} exceeds the vocabulary size {}",
                self.stage1.eval_k,
                dataset.vocab.len()
            )));
        }
        if self.stage1.source == CandidateMode::Beam {
            if self.stage1.generative_vocab.is_none() {
                return Err(PipelineError::Config("beam candidates need stage1.generative_vocab".into()));
            }
            if self.stage1.scorer_dir.is_none() && self.stage1.scorer_url.is_none() {
                return Err(PipelineError::Config(
                    "beam candidates need stage1.scorer_dir or stage1.scorer_url".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Overrides applied on top of a loaded configuration, one key at a time.
/// Returns the display label of the setting.
pub fn apply_override(cfg: &mut RunConfig, key: &str, value: &str) -> Result<String, PipelineError> {
    let bad = |what: &str| PipelineError::Config(format!("invalid value {value:?} for {what}"));
    let num = |what: &str| value.parse::<usize>().map_err(|_| bad(what));
    let flag = |what: &str| value.parse::<bool>().map_err(|_| bad(what));
    Ok(match key {
        "k" => {
            cfg.prompt.k = num("k")?;
            format!("K={value}")
        }
        "n" => {
            cfg.prompt.n = num("n")?;
            format!("N={value}")
        }
        "t" => {
            cfg.prompt.t = num("t")?;
            format!("T={value}")
        }
        "seed" => {
            cfg.seed = Some(value.parse().map_err(|_| bad("seed"))?);
            format!("seed={value}")
        }
        "strategy" => {
            cfg.strategy = value.parse().map_err(|e: String| PipelineError::Config(e))?;
            cfg.strategy.label().to_owned()
        }
        "policy" => {
            cfg.gateway.kind = GatewayKind::Mock;
            cfg.gateway.policy = value.parse().map_err(|e: String| PipelineError::Config(e))?;
            value.to_owned()
        }
        "vote" => {
            cfg.vote = match value {
                "normalized" => VoteMode::Normalized,
                "raw" => VoteMode::Raw,
                _ => return Err(bad("vote")),
            };
            format!("vote={value}")
        }
        "task_format" => {
            cfg.prompt.task_format = value.parse().map_err(|e: String| PipelineError::Config(e))?;
            value.to_owned()
        }
        "include_head" => {
            cfg.prompt.include_head = flag(key)?;
            format!("{key}={value}")
        }
        "include_scores" => {
            cfg.prompt.include_scores = flag(key)?;
            format!("{key}={value}")
        }
        "include_caption" => {
            cfg.prompt.include_caption = flag(key)?;
            format!("{key}={value}")
        }
        "include_tags" => {
            cfg.prompt.include_tags = flag(key)?;
            format!("{key}={value}")
        }
        "prompt" => {
            let p = &mut cfg.prompt;
            let label = match value {
                "default" => "(a) default",
                "no_head" => {
                    p.include_head = false;
                    "(b) w/o prompt head"
                }
                "no_scores" => {
                    p.include_scores = false;
                    "(c) w/o confidence scores"
                }
                "no_caption" => {
                    p.include_caption = false;
                    "(d) w/o image captions"
                }
                "tags" => {
                    p.include_tags = true;
                    "(e) default+tags"
                }
                _ => return Err(bad("prompt")),
            };
            label.to_owned()
        }
        other => return Err(PipelineError::Config(format!("unknown setting {other:?}"))),
    })
}

/// Per-query answer as recorded in the vote log.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryAnswer {
    pub query_index: usize,
    pub parsed_answer: String,
    pub normalized_answer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRecord {
    pub sample_id: String,
    pub per_query: Vec<QueryAnswer>,
    /// `None` when the sample failed.
    pub final_answer: Option<String>,
    pub tie_broken: bool,
    pub candidates: Vec<AnswerCandidate>,
    pub example_ids: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

/// Stage-1 outputs for a whole dataset.
pub struct Stage1 {
    pub candidates: HashMap<String, Vec<AnswerCandidate>>,
}

fn load_generative_vocab(cfg: &Stage1Config) -> Result<AnswerVocabulary, PipelineError> {
    let path = cfg
        .generative_vocab
        .as_ref()
        .ok_or_else(|| PipelineError::Config("missing stage1.generative_vocab".into()))?;
    Ok(AnswerVocabulary::load(VocabType::Generative, path)?)
}

/// Beam-search candidates for one sample.
pub fn beam_candidates(
    cfg: &Stage1Config,
    vocab: &AnswerVocabulary,
    id: &str,
) -> Result<Vec<AnswerCandidate>, PipelineError> {
    let scorer: Box<dyn AutoregressiveScorer> = match (&cfg.scorer_url, &cfg.scorer_dir) {
        (Some(url), _) => Box::new(HttpScorer::new(url.replace("{id}", id), vocab.clone(), 30_000, 3)),
        (None, Some(dir)) => Box::new(SyntheticScorer::load(vocab.clone(), dir.join(format!("{id}.json")))?),
        (None, None) => return Err(PipelineError::Config("no scorer configured".into())),
    };
    let beams = beam_search(scorer.as_ref(), cfg.beam_width, cfg.max_len)?;
    Ok(beams.iter().take(cfg.eval_k).map(|b| b.to_candidate()).collect())
}

/// Candidates for every sample in the dataset.
pub fn compute_stage1(dataset: &Dataset, cfg: &Stage1Config) -> Result<Stage1, PipelineError> {
    let vocab = match cfg.source {
        CandidateMode::Beam => Some(load_generative_vocab(cfg)?),
        CandidateMode::Manifest => None,
    };
    let lists: Result<Vec<(String, Vec<AnswerCandidate>)>, PipelineError> = dataset
        .samples()
        .par_iter()
        .map(|s| {
            let c = match &vocab {
                Some(v) => beam_candidates(cfg, v, &s.id)?,
                None => sample_candidates(dataset, &s.id, cfg.eval_k)?,
            };
            Ok((s.id.clone(), c))
        })
        .collect();
    Ok(Stage1 {
        candidates: lists?.into_iter().collect(),
    })
}

struct Examples<'a> {
    dataset: &'a Dataset,
    stage1: &'a Stage1,
}

impl ExampleSource for Examples<'_> {
    fn sample(&self, id: &str) -> Option<&Sample> {
        self.dataset.sample(id)
    }

    fn candidates(&self, id: &str) -> Option<&[AnswerCandidate]> {
        self.stage1.candidates.get(id).map(Vec::as_slice)
    }
}

/// Client that never answers; used when replaying from transcripts only.
struct ReplayOnly;

impl CompletionClient for ReplayOnly {
    fn endpoint_id(&self) -> String {
        "replay".into()
    }

    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResult, GatewayError> {
        Err(GatewayError::UnknownPrompt(prompt_sha256(&request.prompt)))
    }
}

fn manifest_dir(cfg: &RunConfig) -> PathBuf {
    cfg.manifest.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Builds the completion client named by the configuration.
pub fn make_client(cfg: &RunConfig) -> Result<Box<dyn CompletionClient>, PipelineError> {
    let g = &cfg.gateway;
    let format = cfg.prompt.task_format;
    Ok(match g.kind {
        GatewayKind::Http => Box::new(HttpClient::new(g.http.clone(), format)?),
        GatewayKind::Mock => {
            let policy = match g.policy {
                MockKind::EchoTop1 => MockPolicy::EchoTop1,
                MockKind::CandidateOracle => {
                    let path = g.oracle.clone().unwrap_or_else(|| manifest_dir(cfg).join("oracle.json"));
                    let ledger = load_ledger(&path)?;
                    MockPolicy::CandidateOracle {
                        gold_by_question: ledger.gold_by_question.into_iter().collect(),
                    }
                }
                MockKind::Scripted => {
                    let path = g
                        .script
                        .as_ref()
                        .ok_or_else(|| PipelineError::Config("scripted mock needs gateway.script".into()))?;
                    let text = fs::read_to_string(path).map_err(|e| PipelineError::io(path, e))?;
                    let replies: HashMap<String, String> =
                        serde_json::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
                    MockPolicy::Scripted {
                        replies,
                        strict: g.strict,
                    }
                }
            };
            Box::new(MockClient::new(policy, format))
        }
    })
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Stop once this many new completions have been made.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: EvalReport,
    pub votes: Vec<VoteRecord>,
}

impl RunOutcome {
    /// 0 on success, 2 on an invariant violation, 3 when samples failed.
    pub fn exit_code(&self) -> i32 {
        if !self.report.invariants_hold() {
            2
        } else if !self.report.complete {
            3
        } else {
            0
        }
    }
}

struct Context<'a> {
    cfg: &'a RunConfig,
    dataset: &'a Dataset,
    stage1: &'a Stage1,
    client: &'a dyn CompletionClient,
    known: HashMap<TranscriptKey, TranscriptRecord>,
    writer: Option<TranscriptWriter>,
    fresh: AtomicUsize,
    stop_after: Option<usize>,
}

enum Outcome {
    Done(VoteRecord),
    Stopped,
}

fn write_file(path: &Path, text: &str) -> Result<(), PipelineError> {
    fs::write(path, text).map_err(|e| PipelineError::io(path, e))
}

impl Context<'_> {
    fn process(&self, sample: &Sample) -> Result<Outcome, PipelineError> {
        let cfg = self.cfg;
        let p = &cfg.prompt;
        let cands = self
            .stage1
            .candidates
            .get(&sample.id)
            .ok_or_else(|| HeuristicsError::UnknownSample(sample.id.clone()))?;
        let selection = if p.n == 0 {
            ExampleSelection {
                test_sample_id: sample.id.clone(),
                neighbor_ids: Vec::new(),
                similarities: Vec::new(),
            }
        } else {
            select_examples(self.dataset, &sample.id, cfg.strategy, p.n * p.t, cfg.seed)?
        };
        let source = Examples {
            dataset: self.dataset,
            stage1: self.stage1,
        };
        let bundle = build_prompts(sample, cands, &selection, &source, p)?;
        if let Some(dir) = &cfg.dump_prompts {
            for (t, prompt) in bundle.prompts.iter().enumerate() {
                write_file(&dir.join(format!("{}_q{t}.txt", sample.id)), prompt)?;
            }
        }

        let mut per_query = Vec::with_capacity(p.t);
        let mut error = None;
        for (t, prompt) in bundle.prompts.iter().enumerate() {
            let sha = prompt_sha256(prompt);
            let key = (sample.id.clone(), t, sha.clone());
            let parsed = match self.known.get(&key) {
                Some(rec) => rec.parsed_answer.clone(),
                None => {
                    if let Some(limit) = self.stop_after {
                        if self.fresh.fetch_add(1, Ordering::SeqCst) >= limit {
                            return Ok(Outcome::Stopped);
                        }
                    }
                    match self.client.complete(&CompletionRequest::new(prompt.clone())) {
                        Ok(res) => {
                            if let Some(w) = &self.writer {
                                let rec = TranscriptRecord {
                                    sample_id: sample.id.clone(),
                                    query_index: t,
                                    prompt_sha256: sha,
                                    raw_text: res.raw_text,
                                    parsed_answer: res.parsed_answer.clone(),
                                    latency_ms: res.latency_ms,
                                };
                                w.append(&rec).map_err(|e| PipelineError::io(Path::new(TRANSCRIPT_FILE), e))?;
                            }
                            res.parsed_answer
                        }
                        Err(e) => {
                            error = Some(e.to_string());
                            break;
                        }
                    }
                }
            };
            per_query.push(QueryAnswer {
                query_index: t,
                normalized_answer: normalize_answer(&parsed),
                parsed_answer: parsed,
            });
        }

        let (final_answer, tie_broken) = if error.is_some() {
            (None, false)
        } else {
            let ballots: Vec<String> = per_query
                .iter()
                .map(|q| match cfg.vote {
                    VoteMode::Normalized => q.normalized_answer.clone(),
                    VoteMode::Raw => q.parsed_answer.clone(),
                })
                .collect();
            match majority_vote(&ballots, cands) {
                Some(v) => {
                    let answer = match (&sample.choices, p.task_format.has_choices()) {
                        (Some(ch), true) => project_to_choice(&v.answer, ch)
                            .map(|i| ch[i].clone())
                            .unwrap_or(v.answer),
                        _ => v.answer,
                    };
                    (Some(answer), v.tie_broken)
                }
                None => (None, false),
            }
        };
        Ok(Outcome::Done(VoteRecord {
            sample_id: sample.id.clone(),
            per_query,
            final_answer,
            tie_broken,
            candidates: cands.clone(),
            example_ids: selection.neighbor_ids,
            error,
        }))
    }
}

fn to_jsonl<T: Serialize>(items: &[T]) -> String {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it).expect("record serializes"));
        out.push('\n');
    }
    out
}

/// Evaluation inputs rebuilt from vote records.
pub fn eval_inputs(dataset: &Dataset, votes: &[VoteRecord]) -> Result<Vec<SampleEval>, PipelineError> {
    votes
        .iter()
        .map(|v| {
            let s = dataset
                .sample(&v.sample_id)
                .ok_or_else(|| HeuristicsError::UnknownSample(v.sample_id.clone()))?;
            let example_answers = v
                .example_ids
                .iter()
                .filter_map(|id| dataset.sample(id).and_then(Sample::modal_answer))
                .map(str::to_owned)
                .collect();
            Ok(SampleEval {
                sample_id: v.sample_id.clone(),
                category: s.category.clone(),
                answers: s.answers.clone(),
                candidates: v.candidates.clone(),
                final_answer: v.final_answer.clone(),
                tie_broken: v.tie_broken,
                example_answers,
            })
        })
        .collect()
}

fn execute(
    cfg: &RunConfig,
    client: &dyn CompletionClient,
    transcripts_from: &Path,
    out_dir: &Path,
    write_transcripts: bool,
    opts: &RunOptions,
) -> Result<RunOutcome, PipelineError> {
    let dataset = load_manifest(&cfg.manifest)?;
    cfg.validate(&dataset)?;
    fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    if let Some(dir) = &cfg.dump_prompts {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    }

    let transcript_in = transcripts_from.join(TRANSCRIPT_FILE);
    let known: HashMap<TranscriptKey, TranscriptRecord> = read_transcripts(&transcript_in)
        .map_err(|e| PipelineError::io(&transcript_in, e))?
        .into_iter()
        .map(|r| (r.key(), r))
        .collect();
    let writer = if write_transcripts {
        let path = out_dir.join(TRANSCRIPT_FILE);
        Some(TranscriptWriter::open(&path).map_err(|e| PipelineError::io(&path, e))?)
    } else {
        None
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let tests: Vec<&Sample> = dataset.split(Split::Test).collect();
    let outcomes: Vec<Result<Outcome, PipelineError>> = pool.install(|| {
        let stage1 = compute_stage1(&dataset, &cfg.stage1)?;
        let ctx = Context {
            cfg,
            dataset: &dataset,
            stage1: &stage1,
            client,
            known,
            writer,
            fresh: AtomicUsize::new(0),
            stop_after: opts.stop_after,
        };
        Ok::<_, PipelineError>(tests.par_iter().map(|s| ctx.process(s)).collect())
    })?;

    let mut votes = Vec::with_capacity(outcomes.len());
    let mut stopped = false;
    for o in outcomes {
        match o? {
            Outcome::Done(v) => votes.push(v),
            Outcome::Stopped => stopped = true,
        }
    }
    if stopped {
        return Err(PipelineError::Interrupted(opts.stop_after.unwrap_or(0)));
    }

    let mut eval_opts = cfg.eval.clone();
    eval_opts.k = cfg.prompt.k;
    let report = evaluate(&eval_inputs(&dataset, &votes)?, &eval_opts)?;
    write_file(&out_dir.join(VOTES_FILE), &to_jsonl(&votes))?;
    write_file(&out_dir.join(REPORT_JSON), &report.to_json())?;
    write_file(&out_dir.join(REPORT_MD), &report.to_markdown())?;
    Ok(RunOutcome { report, votes })
}

/// Full run with the configured gateway; resumes from any transcript
/// already present in the output directory.
pub fn run(cfg: &RunConfig, opts: &RunOptions) -> Result<RunOutcome, PipelineError> {
    let client = make_client(cfg)?;
    run_with_client(cfg, client.as_ref(), opts)
}

pub fn run_with_client(
    cfg: &RunConfig,
    client: &dyn CompletionClient,
    opts: &RunOptions,
) -> Result<RunOutcome, PipelineError> {
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))?;
    write_file(&out.join(CONFIG_FILE), &cfg.to_json())?;
    execute(cfg, client, out, out, true, opts)
}

/// Recomputes votes and the report of a finished run from its config
/// snapshot and transcripts, without contacting any endpoint.
pub fn replay(run_dir: &Path, out_dir: &Path) -> Result<RunOutcome, PipelineError> {
    let cfg_path = run_dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&cfg_path).map_err(|e| PipelineError::io(&cfg_path, e))?;
    let mut cfg: RunConfig =
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
    cfg.dump_prompts = None;
    execute(&cfg, &ReplayOnly, run_dir, out_dir, false, &RunOptions::default())
}

/// Re-renders `report.md` from `report.json`.
pub fn render_report(run_dir: &Path) -> Result<String, PipelineError> {
    let path = run_dir.join(REPORT_JSON);
    let text = fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
    let report: EvalReport =
        serde_json::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?;
    let md = report.to_markdown();
    write_file(&run_dir.join(REPORT_MD), &md)?;
    Ok(md)
}

/// Writes stage-1 candidates and example selections for the testing split.
pub fn write_heuristics(cfg: &RunConfig, out_dir: &Path) -> Result<usize, PipelineError> {
    let dataset = load_manifest(&cfg.manifest)?;
    cfg.validate(&dataset)?;
    fs::create_dir_all(out_dir).map_err(|e| PipelineError::io(out_dir, e))?;
    let stage1 = compute_stage1(&dataset, &cfg.stage1)?;
    let mut table = CandidateTable::new(None);
    for s in dataset.samples() {
        table.insert(s.id.clone(), stage1.candidates[&s.id].clone())?;
    }
    table.write(out_dir.join("candidates.jsonl"))?;
    let total = cfg.prompt.n * cfg.prompt.t;
    let tests: Vec<&Sample> = dataset.split(Split::Test).collect();
    let selections: Result<Vec<ExampleSelection>, HeuristicsError> = tests
        .par_iter()
        .map(|s| select_examples(&dataset, &s.id, cfg.strategy, total, cfg.seed))
        .collect();
    let selections = selections?;
    write_file(&out_dir.join("examples.jsonl"), &to_jsonl(&selections))?;
    Ok(selections.len())
}

/// Renders every prompt of the testing split into `dir` as
/// `<sample id>_q<query index>.txt`.
pub fn dump_prompts(cfg: &RunConfig, dir: &Path) -> Result<usize, PipelineError> {
    let dataset = load_manifest(&cfg.manifest)?;
    cfg.validate(&dataset)?;
    fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
    let stage1 = compute_stage1(&dataset, &cfg.stage1)?;
    let source = Examples {
        dataset: &dataset,
        stage1: &stage1,
    };
    let p = &cfg.prompt;
    let tests: Vec<&Sample> = dataset.split(Split::Test).collect();
    let counts: Result<Vec<usize>, PipelineError> = tests
        .par_iter()
        .map(|s| {
            let sel = select_examples(&dataset, &s.id, cfg.strategy, p.n * p.t, cfg.seed)?;
            let bundle = build_prompts(s, &stage1.candidates[&s.id], &sel, &source, p)?;
            for (t, prompt) in bundle.prompts.iter().enumerate() {
                write_file(&dir.join(format!("{}_q{t}.txt", s.id)), prompt)?;
            }
            Ok(bundle.prompts.len())
        })
        .collect();
    Ok(counts?.into_iter().sum())
}

/// A sweep: the Cartesian product of `axes`, or the explicit `cells`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationPlan {
    pub axes: BTreeMap<String, Vec<String>>,
    pub cells: Vec<BTreeMap<String, String>>,
}

impl AblationPlan {
    /// Cell settings in sweep order. Axes vary fastest from the last key.
    pub fn expand(&self) -> Result<Vec<BTreeMap<String, String>>, PipelineError> {
        if !self.cells.is_empty() {
            if !self.axes.is_empty() {
                return Err(PipelineError::Config("give either axes or cells, not both".into()));
            }
            return Ok(self.cells.clone());
        }
        let mut out = vec![BTreeMap::new()];
        for (key, values) in &self.axes {
            if values.is_empty() {
                return Err(PipelineError::Config(format!("axis {key} has no values")));
            }
            out = out
                .into_iter()
                .flat_map(|cell| {
                    values.iter().map(move |v| {
                        let mut c = cell.clone();
                        c.insert(key.clone(), v.clone());
                        c
                    })
                })
                .collect();
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct AblationOutcome {
    pub cells: Vec<AblationCell>,
    pub reports: Vec<Option<EvalReport>>,
}

/// Runs one pipeline per cell under `<output_dir>/cells/<index>` and writes
/// `grid.json`, `grid.md` and `grid.csv` to the output directory.
pub fn ablate(base: &RunConfig, plan: &AblationPlan) -> Result<AblationOutcome, PipelineError> {
    let settings = plan.expand()?;
    let mut specs = Vec::with_capacity(settings.len());
    let mut configs = Vec::with_capacity(settings.len());
    for (i, cell) in settings.iter().enumerate() {
        let mut cfg = base.clone();
        let mut labels = Vec::new();
        for (k, v) in cell {
            labels.push(apply_override(&mut cfg, k, v)?);
        }
        cfg.output_dir = base.output_dir.join("cells").join(format!("{i:03}"));
        cfg.dump_prompts = None;
        specs.push(CellSpec {
            tag: if labels.is_empty() { "base".into() } else { labels.join(", ") },
            axes: cell.clone(),
            k: cfg.prompt.k,
        });
        configs.push(cfg);
    }
    let mut results = Vec::new();
    let mut reports = Vec::with_capacity(configs.len());
    for (cfg, spec) in configs.iter().zip(&specs) {
        match run(cfg, &RunOptions::default()) {
            Ok(out) => {
                results.push((spec.tag.clone(), out.report.clone()));
                reports.push(Some(out.report));
            }
            Err(e @ (PipelineError::Gateway(_) | PipelineError::Interrupted(_))) => {
                let _ = e;
                reports.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let cells = ablation_grid(&specs, &results)?;
    let out = &base.output_dir;
    fs::create_dir_all(out).map_err(|e| PipelineError::io(out, e))?;
    let mut json = serde_json::to_string_pretty(&cells).expect("grid serializes");
    json.push('\n');
    write_file(&out.join("grid.json"), &json)?;
    write_file(&out.join("grid.md"), &grid_to_markdown(&cells))?;
    write_file(&out.join("grid.csv"), &grid_to_csv(&cells)?)?;
    Ok(AblationOutcome { cells, reports })
}

/// Convenience for callers that only know the task format by name.
pub fn parse_task_format(s: &str) -> Result<TaskFormat, PipelineError> {
    s.parse().map_err(PipelineError::Config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{write_fixture, FixtureSpec};

    fn fixture(dir: &Path, size: usize) {
        write_fixture(
            dir,
            &FixtureSpec {
                size,
                ..FixtureSpec::default()
            },
        )
        .unwrap();
    }

    fn config(dir: &Path) -> RunConfig {
        RunConfig {
            manifest: dir.join("manifest.json"),
            output_dir: dir.join("run"),
            ..RunConfig::default()
        }
    }

    #[test]
    fn toml_config_with_relative_paths() {
        let cfg = RunConfig::from_toml(
            "manifest = \"fx/manifest.json\"\noutput_dir = \"out\"\nstrategy = \"rand\"\nseed = 3\n[prompt]\nk = 5\nn = 4\n",
            Path::new("/base"),
        )
        .unwrap();
        assert_eq!(cfg.manifest, Path::new("/base/fx/manifest.json"));
        assert_eq!(cfg.strategy, SelectionStrategy::Rand);
        assert_eq!(cfg.prompt.k, 5);
        assert_eq!(cfg.prompt.t, 5);
        assert!(RunConfig::from_toml("bogus = 1", Path::new("/")).is_err());
    }

    #[test]
    fn overrides_and_labels() {
        let mut cfg = RunConfig::default();
        assert_eq!(apply_override(&mut cfg, "k", "3").unwrap(), "K=3");
        assert_eq!(cfg.prompt.k, 3);
        assert_eq!(apply_override(&mut cfg, "strategy", "ques_img").unwrap(), "(b) ques + img");
        assert_eq!(apply_override(&mut cfg, "prompt", "no_scores").unwrap(), "(c) w/o confidence scores");
        assert!(!cfg.prompt.include_scores);
        assert!(apply_override(&mut cfg, "k", "x").is_err());
        assert!(apply_override(&mut cfg, "zzz", "1").is_err());
    }

    #[test]
    fn plan_expansion() {
        let plan = AblationPlan {
            axes: BTreeMap::from([
                ("k".to_string(), vec!["1".to_string(), "5".to_string()]),
                ("t".to_string(), vec!["1".into(), "2".into(), "3".into()]),
            ]),
            cells: vec![],
        };
        let cells = plan.expand().unwrap();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[1]["k"], "1");
        assert_eq!(cells[1]["t"], "2");
        assert_eq!(AblationPlan::default().expand().unwrap().len(), 1);
    }

    #[test]
    fn config_errors_map_to_exit_code_four() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), 4);
        let mut cfg = config(dir.path());
        cfg.strategy = SelectionStrategy::Rand;
        let err = run(&cfg, &RunOptions::default()).unwrap_err();
        assert_eq!(err.exit_code(), 4);
        let mut cfg = config(dir.path());
        cfg.prompt.n = 100;
        assert_eq!(run(&cfg, &RunOptions::default()).unwrap_err().exit_code(), 4);
    }

    #[test]
    fn small_echo_run_matches_stage1() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), 6);
        let mut cfg = config(dir.path());
        cfg.prompt.n = 4;
        cfg.prompt.t = 3;
        cfg.dump_prompts = Some(dir.path().join("prompts"));
        let out = run(&cfg, &RunOptions::default()).unwrap();
        assert_eq!(out.exit_code(), 0);
        assert_eq!(out.report.accuracy, out.report.stage1_accuracy);
        assert_eq!(out.votes.len(), 6);
        assert!(dir.path().join("prompts/test00000_q2.txt").exists());
        let transcripts = read_transcripts(&cfg.output_dir.join(TRANSCRIPT_FILE)).unwrap();
        assert_eq!(transcripts.len(), 18);
    }

    #[test]
    fn gateway_failures_mark_samples() {
        let dir = tempfile::tempdir().unwrap();
        fixture(dir.path(), 3);
        let mut cfg = config(dir.path());
        cfg.prompt.n = 2;
        cfg.prompt.t = 2;
        let out = run_with_client(&cfg, &ReplayOnly, &RunOptions::default());
        // Every sample fails, so there is nothing to evaluate.
        assert!(matches!(out, Err(PipelineError::Eval(EvalError::Empty))));
    }
}
