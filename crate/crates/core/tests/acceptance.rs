//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run with `cargo test -p prophet-core --test acceptance`.

mod common;

use std::collections::HashSet;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::golden::{expected, load_cases, render};
use common::oracles::{
    enumerate_sequences, group_similarity_loop, knn_argsort, random_group, random_scorer,
    rank_answers, stepwise_reference,
};
use prophet::artifacts::{BankKind, FeatureBank};
use prophet::eval::{Behavior, EvalReport};
use prophet::fixtures::{gaussian_bank, write_fixture, FixtureSpec};
use prophet::heuristics::{beam_search, cosine_knn, group_similarity, SelectionStrategy};
use prophet::pipeline::{replay, run, MockKind, PipelineError, RunConfig, RunOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(limit: Duration, start: Instant) -> Result<Duration, String> {
    let took = start.elapsed();
    ensure(took < limit, || format!("took {took:?}, limit {limit:?}"))?;
    Ok(took)
}

fn fixture(dir: &Path, seed: u64, size: usize, stage1_accuracy: f64) -> RunConfig {
    write_fixture(
        dir,
        &FixtureSpec {
            seed,
            size,
            stage1_accuracy,
            ..FixtureSpec::default()
        },
    )
    .unwrap();
    RunConfig {
        manifest: dir.join("manifest.json"),
        output_dir: dir.join("run"),
        ..RunConfig::default()
    }
}

fn run_ok(cfg: &RunConfig) -> EvalReport {
    run(cfg, &RunOptions::default()).unwrap().report
}

fn beam_oracle() -> Check {
    let start = Instant::now();
    let mut cases = 0;
    for seed in 0..60u64 {
        let words = 2 + (seed % 5) as usize;
        let max_len = 1 + (seed % 4) as usize;
        let scorer = random_scorer(seed, words, max_len);
        let all = enumerate_sequences(&scorer, max_len);
        for width in 1..=5 {
            let got = beam_search(&scorer, width, max_len).map_err(|e| e.to_string())?;
            let reference = rank_answers(&scorer.vocab, stepwise_reference(&scorer, width, max_len));
            ensure(got.len() == reference.len(), || {
                format!("seed {seed} width {width}: {} vs {} answers", got.len(), reference.len())
            })?;
            for (g, (answer, _, seq)) in got.iter().zip(&reference) {
                ensure(g.tokens == seq.tokens && &g.answer == answer, || {
                    format!("seed {seed} width {width}: {:?} vs {:?}", g.tokens, seq.tokens)
                })?;
                let exhaustive = all.iter().find(|s| s.tokens == g.tokens).ok_or("sequence not enumerable")?;
                ensure((g.log_score - exhaustive.log_score).abs() <= 1e-9, || {
                    format!("seed {seed}: log score {} vs {}", g.log_score, exhaustive.log_score)
                })?;
            }
            cases += 1;
        }
        let full = beam_search(&scorer, all.len(), max_len).map_err(|e| e.to_string())?;
        let oracle = rank_answers(&scorer.vocab, all.clone());
        ensure(full.len() == oracle.len(), || format!("seed {seed}: exhaustive size differs"))?;
        for (g, (_, _, seq)) in full.iter().zip(&oracle) {
            ensure(g.tokens == seq.tokens && (g.log_score - seq.log_score).abs() <= 1e-9, || {
                format!("seed {seed}: full-width mismatch at {:?}", g.tokens)
            })?;
        }
    }
    let took = within(Duration::from_secs(5), start)?;
    Ok(format!("{cases} scorer/width cases in {took:.2?}"))
}

fn knn_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let base = gaussian_bank(5, 1000, 64, BankKind::Fused);
    let mut rows = base.rows().to_vec();
    // Exact duplicates exercise the tie-break.
    for i in 0..50 {
        let (src, dst) = (i * 64, (500 + i) * 64);
        rows.copy_within(src..src + 64, dst);
    }
    let ids: Vec<String> = (0..1000).map(|i| format!("s{i:04}")).collect();
    let bank = FeatureBank::new(BankKind::Fused, 64, ids, rows).map_err(|e| e.to_string())?;
    let queries: Vec<Vec<f32>> = (0..100)
        .map(|q| {
            if q % 10 == 0 {
                bank.row(rng.random_range(0..50)).to_vec()
            } else {
                (0..64).map(|_| rng.sample(rand_distr::StandardNormal)).collect()
            }
        })
        .collect();
    let start = Instant::now();
    let got: Vec<Vec<String>> = queries
        .iter()
        .map(|q| cosine_knn(q, &bank, 20, &HashSet::new()).map(|s| s.neighbor_ids))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let took = within(Duration::from_secs(2), start)?;
    for (q, g) in queries.iter().zip(&got) {
        let want = knn_argsort(q, &bank, 20);
        ensure(g == &want, || format!("ids differ: {g:?} vs {want:?}"))?;
    }
    Ok(format!("100 queries over 1000x64 in {took:.2?}"))
}

fn grouped_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let dim = rng.random_range(2..=32);
        let a = random_group(&mut rng, dim, 6);
        let b = random_group(&mut rng, dim, 6);
        let ab = group_similarity(&a, &b, dim).map_err(|e| e.to_string())?;
        let ba = group_similarity(&b, &a, dim).map_err(|e| e.to_string())?;
        ensure(ab.to_bits() == ba.to_bits(), || format!("asymmetric: {ab} vs {ba}"))?;
        worst = worst.max((ab - group_similarity_loop(&a, &b, dim)).abs());
    }
    ensure(worst <= 1e-9, || format!("max deviation {worst:e}"))?;
    Ok(format!("200 pairs, max deviation {worst:.1e}, symmetric"))
}

fn golden_prompts() -> Check {
    let cases = load_cases();
    ensure(cases.len() == 4, || format!("{} cases", cases.len()))?;
    for case in &cases {
        ensure(render(case) == expected(case), || format!("{} differs", case.golden))?;
    }
    Ok("4 formats byte-identical".into())
}

struct Shared {
    _dir: tempfile::TempDir,
    default_report: EvalReport,
    default_took: Duration,
    other_reports: Vec<(String, EvalReport)>,
}

fn shared_runs() -> Shared {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fixture(&dir.path().join("main"), 7, 200, 0.6);
    cfg.workers = 1;
    let start = Instant::now();
    let default_report = run_ok(&cfg);
    let default_took = start.elapsed();

    let mut other_reports = Vec::new();
    for (seed, acc) in [(1u64, 0.3), (2, 0.6), (3, 0.9)] {
        let mut cfg = fixture(&dir.path().join(format!("fx{seed}")), seed, 60, acc);
        cfg.workers = 4;
        cfg.prompt.n = 8;
        cfg.prompt.t = 3;
        other_reports.push((format!("fixture {seed} echo"), run_ok(&cfg)));
        cfg.gateway.policy = MockKind::CandidateOracle;
        cfg.output_dir = dir.path().join(format!("oracle{seed}"));
        other_reports.push((format!("fixture {seed} oracle"), run_ok(&cfg)));
    }
    Shared {
        _dir: dir,
        default_report,
        default_took,
        other_reports,
    }
}

fn mock_identity(s: &Shared) -> Check {
    let r = &s.default_report;
    ensure(r.evaluated == 200 && r.complete, || format!("{} evaluated", r.evaluated))?;
    ensure(r.accuracy.to_bits() == r.stage1_accuracy.to_bits(), || {
        format!("accuracy {} vs stage-1 {}", r.accuracy, r.stage1_accuracy)
    })?;
    ensure(s.default_took < Duration::from_secs(60), || format!("took {:?}", s.default_took))?;
    Ok(format!(
        "accuracy {:.4} == stage-1, 200 samples x 5 queries in {:.2?}",
        r.accuracy, s.default_took
    ))
}

fn all_reports(s: &Shared) -> Vec<(&str, &EvalReport)> {
    std::iter::once(("default echo", &s.default_report))
        .chain(s.other_reports.iter().map(|(n, r)| (n.as_str(), r)))
        .collect()
}

fn hit_rate_properties(s: &Shared) -> Check {
    let reports = all_reports(s);
    for (name, r) in &reports {
        let h1 = r.hit_rate[&1];
        ensure(h1.to_bits() == r.stage1_accuracy.to_bits(), || {
            format!("{name}: hit@1 {h1} vs stage-1 {}", r.stage1_accuracy)
        })?;
        let seq: Vec<f64> = [1, 5, 10].iter().map(|k| r.hit_rate[k]).collect();
        ensure(seq.windows(2).all(|w| w[0] <= w[1]), || format!("{name}: {seq:?}"))?;
    }
    Ok(format!("{} reports, hit@1 == stage-1, monotone over 1/5/10", reports.len()))
}

fn partitions(s: &Shared) -> Check {
    let reports = all_reports(s);
    for (name, r) in &reports {
        let b: f64 = r.behavior.fractions.values().sum();
        ensure((b - 1.0).abs() <= 1e-12, || format!("{name}: behavior sum {b}"))?;
        let c = r.confusion.total();
        ensure((c - 1.0).abs() <= 1e-12, || format!("{name}: confusion sum {c}"))?;
        if name.ends_with("echo") {
            let keep = r.behavior.fractions[&Behavior::KeepTop1];
            ensure(keep == 1.0, || format!("{name}: keep_top1 {keep}"))?;
        }
    }
    Ok(format!("{} reports sum to 1, echo keep_top1 == 1.0", reports.len()))
}

fn strategy_ordering() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fixture(dir.path(), 7, 200, 0.6);
    cfg.seed = Some(1);
    cfg.workers = 4;
    let mut hits = Vec::new();
    for strategy in [SelectionStrategy::Rand, SelectionStrategy::Fused] {
        cfg.strategy = strategy;
        cfg.output_dir = dir.path().join(strategy.as_str());
        hits.push(run_ok(&cfg).example_hit_rate.ok_or("no example hit rate")?);
    }
    ensure(hits[1] >= hits[0], || format!("fused {} < rand {}", hits[1], hits[0]))?;

    cfg.strategy = SelectionStrategy::Fused;
    cfg.gateway.policy = MockKind::CandidateOracle;
    let mut accs = Vec::new();
    for k in [1usize, 2, 3, 5, 10] {
        cfg.prompt.k = k;
        cfg.output_dir = dir.path().join(format!("oracle_k{k}"));
        accs.push(run_ok(&cfg).accuracy);
    }
    ensure(accs.windows(2).all(|w| w[0] <= w[1]), || format!("oracle accuracy over K: {accs:?}"))?;
    Ok(format!(
        "example hit rate fused {:.4} >= rand {:.4}; oracle accuracy over K=1,2,3,5,10 {:?}",
        hits[1],
        hits[0],
        accs.iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>()
    ))
}

fn replay_determinism() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = fixture(&dir.path().join("fx"), 13, 60, 0.6);
    cfg.prompt.n = 6;
    cfg.prompt.t = 4;
    cfg.workers = 4;
    cfg.output_dir = dir.path().join("full");
    run_ok(&cfg);

    let replayed = dir.path().join("replayed");
    replay(&cfg.output_dir, &replayed).map_err(|e| e.to_string())?;
    for f in ["votes.jsonl", "report.json", "report.md"] {
        ensure(fs::read(cfg.output_dir.join(f)).unwrap() == fs::read(replayed.join(f)).unwrap(), || {
            format!("replayed {f} differs")
        })?;
    }

    let full = cfg.output_dir.clone();
    cfg.output_dir = dir.path().join("resumed");
    let half = 60 * 4 / 2;
    match run(&cfg, &RunOptions { stop_after: Some(half) }) {
        Err(PipelineError::Interrupted(_)) => {}
        other => return Err(format!("expected an interruption, got {:?}", other.map(|o| o.report.accuracy))),
    }
    run_ok(&cfg);
    for f in ["votes.jsonl", "report.json", "report.md"] {
        ensure(fs::read(full.join(f)).unwrap() == fs::read(cfg.output_dir.join(f)).unwrap(), || {
            format!("resumed {f} differs")
        })?;
    }
    Ok("replayed and resumed-at-50% outputs byte-identical".into())
}

fn guarded(f: impl FnOnce() -> Check) -> Check {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into())),
    }
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Check)> = vec![
        ("beam search matches exhaustive enumeration", guarded(beam_oracle)),
        ("kNN matches exhaustive argsort", guarded(knn_oracle)),
        ("grouped similarity matches double loop", guarded(grouped_oracle)),
        ("golden prompts render byte-exactly", guarded(golden_prompts)),
    ];
    match catch_unwind(shared_runs) {
        Ok(shared) => {
            results.push(("mock end-to-end identity", guarded(|| mock_identity(&shared))));
            results.push(("hit-rate properties", guarded(|| hit_rate_properties(&shared))));
            results.push(("behavior and confusion partitions", guarded(|| partitions(&shared))));
        }
        Err(_) => {
            for name in ["mock end-to-end identity", "hit-rate properties", "behavior and confusion partitions"] {
                results.push((name, Err("pipeline run panicked".into())));
            }
        }
    }
    results.push(("selection-strategy ordering", guarded(strategy_ordering)));
    results.push(("replay determinism", guarded(replay_determinism)));

    let mut failed = 0;
    for (name, r) in &results {
        match r {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
