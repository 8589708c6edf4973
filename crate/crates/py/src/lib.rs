//! Python bindings for the answer-heuristics pipeline.

use std::collections::BTreeMap;
use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use prophet::artifacts::{load_manifest, AnswerCandidate, AnswerVocabulary, Split, VocabType};
use prophet::eval::{soft_score as core_soft_score, EvalReport, Metric};
use prophet::fixtures::{write_fixture, FixtureSpec};
use prophet::heuristics::{beam_search as core_beam_search, sample_candidates, select_examples, SyntheticScorer};
use prophet::pipeline::{apply_override, dump_prompts, replay as core_replay, run as core_run, RunConfig, RunOptions};
use prophet::vote::{majority_vote as core_majority_vote, normalize_answer as core_normalize};

create_exception!(prophet_py, ProphetError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    ProphetError::new_err(e.to_string())
}

fn parse<T: std::str::FromStr>(s: &str) -> PyResult<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(err)
}

fn to_candidates(pairs: Vec<(String, f64)>) -> Vec<AnswerCandidate> {
    pairs.into_iter().map(|(a, s)| AnswerCandidate::new(a, s)).collect()
}

fn from_candidates(list: Vec<AnswerCandidate>) -> Vec<(String, f64)> {
    list.into_iter().map(|c| (c.answer, c.score)).collect()
}

#[pyfunction]
fn normalize_answer(text: &str) -> String {
    core_normalize(text)
}

/// Majority vote; returns `(answer, tie_broken)` or `None` for no answers.
#[pyfunction]
#[pyo3(signature = (answers, candidates = Vec::new()))]
fn majority_vote(answers: Vec<String>, candidates: Vec<(String, f64)>) -> Option<(String, bool)> {
    core_majority_vote(&answers, &to_candidates(candidates)).map(|v| (v.answer, v.tie_broken))
}

#[pyfunction]
#[pyo3(signature = (prediction, answers, metric = "simple"))]
fn soft_score(prediction: &str, answers: Vec<String>, metric: &str) -> PyResult<f64> {
    Ok(core_soft_score(prediction, &answers, parse::<Metric>(metric)?))
}

/// Writes a synthetic dataset and returns its directory.
#[pyfunction]
#[pyo3(signature = (out, seed = 7, size = 200, dim = 64, classes = 32, stage1_accuracy = 0.6))]
fn gen_fixtures(out: PathBuf, seed: u64, size: usize, dim: usize, classes: usize, stage1_accuracy: f64) -> PyResult<PathBuf> {
    let spec = FixtureSpec {
        seed,
        size,
        dim,
        classes,
        stage1_accuracy,
    };
    write_fixture(&out, &spec).map_err(err)?;
    Ok(out)
}

/// Beam search over a table-driven scorer file; returns
/// `(answer, confidence, log_score)` triples.
#[pyfunction]
#[pyo3(signature = (vocab_path, scorer_path, beam_width = 10, max_len = 4))]
fn beam_search(vocab_path: PathBuf, scorer_path: PathBuf, beam_width: usize, max_len: usize) -> PyResult<Vec<(String, f64, f64)>> {
    let vocab = AnswerVocabulary::load(VocabType::Generative, &vocab_path).map_err(err)?;
    let scorer = SyntheticScorer::load(vocab, &scorer_path).map_err(err)?;
    let beams = core_beam_search(&scorer, beam_width, max_len).map_err(err)?;
    Ok(beams.into_iter().map(|b| (b.answer, b.confidence, b.log_score)).collect())
}

/// A loaded manifest with its feature banks.
#[pyclass(frozen)]
struct Dataset {
    inner: prophet::artifacts::Dataset,
}

#[pymethods]
impl Dataset {
    #[new]
    fn new(manifest: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: load_manifest(&manifest).map_err(err)?,
        })
    }

    /// Sample ids of `"train"` or `"test"`.
    fn sample_ids(&self, split: &str) -> PyResult<Vec<String>> {
        let split = match split {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(err(format!("unknown split {other:?}"))),
        };
        Ok(self.inner.split(split).map(|s| s.id.clone()).collect())
    }

    fn answers(&self, sample_id: &str) -> PyResult<Vec<String>> {
        let s = self
            .inner
            .sample(sample_id)
            .ok_or_else(|| err(format!("unknown sample {sample_id:?}")))?;
        Ok(s.answers.clone())
    }

    /// Top-`k` stage-1 candidates as `(answer, score)` pairs.
    #[pyo3(signature = (sample_id, k = 10))]
    fn candidates(&self, sample_id: &str, k: usize) -> PyResult<Vec<(String, f64)>> {
        Ok(from_candidates(sample_candidates(&self.inner, sample_id, k).map_err(err)?))
    }

    /// In-context examples as `(id, similarity)` pairs.
    #[pyo3(signature = (sample_id, n = 16, strategy = "fused", seed = None))]
    fn select_examples(&self, sample_id: &str, n: usize, strategy: &str, seed: Option<u64>) -> PyResult<Vec<(String, f64)>> {
        let sel = select_examples(&self.inner, sample_id, parse(strategy)?, n, seed).map_err(err)?;
        Ok(sel.neighbor_ids.into_iter().zip(sel.similarities).collect())
    }

    fn __len__(&self) -> usize {
        self.inner.samples().len()
    }
}

/// Run configuration; settings use the same keys as the command line.
#[pyclass(name = "RunConfig")]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[new]
    #[pyo3(signature = (manifest, output_dir, **settings))]
    fn new(manifest: PathBuf, output_dir: PathBuf, settings: Option<BTreeMap<String, Bound<'_, PyAny>>>) -> PyResult<Self> {
        let mut cfg = Self {
            inner: RunConfig {
                manifest,
                output_dir,
                ..RunConfig::default()
            },
        };
        for (k, v) in settings.unwrap_or_default() {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: RunConfig::load(&path).map_err(err)?,
        })
    }

    /// Applies one setting (`k`, `n`, `t`, `strategy`, `seed`, `policy`,
    /// `vote`, `prompt`, `task_format`, `include_*`) and returns its label.
    fn set(&mut self, key: &str, value: &Bound<'_, PyAny>) -> PyResult<String> {
        let text = match value.extract::<bool>() {
            Ok(b) => b.to_string(),
            Err(_) => value.str()?.to_string(),
        };
        apply_override(&mut self.inner, key, &text).map_err(err)
    }

    #[setter]
    fn set_workers(&mut self, workers: usize) {
        self.inner.workers = workers;
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }
}

/// Evaluation report of a run.
#[pyclass(frozen, name = "Report")]
struct PyReport {
    inner: EvalReport,
}

#[pymethods]
impl PyReport {
    #[getter]
    fn accuracy(&self) -> f64 {
        self.inner.accuracy
    }

    #[getter]
    fn stage1_accuracy(&self) -> f64 {
        self.inner.stage1_accuracy
    }

    #[getter]
    fn hit_rate(&self) -> BTreeMap<usize, f64> {
        self.inner.hit_rate.clone()
    }

    #[getter]
    fn example_hit_rate(&self) -> Option<f64> {
        self.inner.example_hit_rate
    }

    #[getter]
    fn evaluated(&self) -> usize {
        self.inner.evaluated
    }

    #[getter]
    fn failed(&self) -> Vec<String> {
        self.inner.failed.clone()
    }

    fn invariants_hold(&self) -> bool {
        self.inner.invariants_hold()
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn to_markdown(&self) -> String {
        self.inner.to_markdown()
    }
}

/// Runs the pipeline with the configured gateway.
#[pyfunction]
fn run(py: Python<'_>, config: &PyRunConfig) -> PyResult<PyReport> {
    let cfg = config.inner.clone();
    let out = py
        .detach(move || core_run(&cfg, &RunOptions::default()))
        .map_err(err)?;
    Ok(PyReport { inner: out.report })
}

/// Recomputes a finished run from its transcripts into `out_dir`.
#[pyfunction]
fn replay(py: Python<'_>, run_dir: PathBuf, out_dir: PathBuf) -> PyResult<PyReport> {
    let out = py.detach(move || core_replay(&run_dir, &out_dir)).map_err(err)?;
    Ok(PyReport { inner: out.report })
}

/// Writes every prompt of the testing split to `out_dir`; returns the count.
#[pyfunction]
fn prompts(py: Python<'_>, config: &PyRunConfig, out_dir: PathBuf) -> PyResult<usize> {
    let cfg = config.inner.clone();
    py.detach(move || dump_prompts(&cfg, &out_dir)).map_err(err)
}

#[pymodule]
fn prophet_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("ProphetError", m.py().get_type::<ProphetError>())?;
    m.add_class::<Dataset>()?;
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyReport>()?;
    m.add_function(wrap_pyfunction!(normalize_answer, m)?)?;
    m.add_function(wrap_pyfunction!(majority_vote, m)?)?;
    m.add_function(wrap_pyfunction!(soft_score, m)?)?;
    m.add_function(wrap_pyfunction!(gen_fixtures, m)?)?;
    m.add_function(wrap_pyfunction!(beam_search, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    m.add_function(wrap_pyfunction!(replay, m)?)?;
    m.add_function(wrap_pyfunction!(prompts, m)?)?;
    Ok(())
}
