use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn prophet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_prophet"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn fixture(dir: &Path, size: &str) -> String {
    let fx = dir.join("fx");
    let out = prophet(&["gen-fixtures", "--out", s(&fx), "--size", size]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    fx.join("manifest.json").to_str().unwrap().to_owned()
}

#[test]
fn gen_fixtures_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = prophet(&["gen-fixtures", "--out", s(&dir.path().join(name)), "--size", "12"]);
        assert!(out.status.success());
    }
    for entry in walk(&dir.path().join("a")) {
        let rel = entry.strip_prefix(dir.path().join("a")).unwrap();
        assert_eq!(fs::read(&entry).unwrap(), fs::read(dir.path().join("b").join(rel)).unwrap(), "{rel:?}");
    }
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn run_then_eval_replays_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path(), "10");
    let run = dir.path().join("run");
    let out = prophet(&["run", "--manifest", &manifest, "--output-dir", s(&run), "--set", "n=4", "--set", "t=3"]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["config.json", "transcripts.jsonl", "votes.jsonl", "report.json", "report.md"] {
        assert!(run.join(f).exists(), "{f}");
    }
    let re = dir.path().join("replay");
    let out = prophet(&["eval", "--run-dir", s(&run), "--out", s(&re)]);
    assert_eq!(out.status.code(), Some(0));
    for f in ["votes.jsonl", "report.json", "report.md"] {
        assert_eq!(fs::read(run.join(f)).unwrap(), fs::read(re.join(f)).unwrap(), "{f}");
    }
    let out = prophet(&["report", "--run-dir", s(&run)]);
    assert!(String::from_utf8(out.stdout).unwrap().starts_with("# Evaluation report"));
}

#[test]
fn interrupted_run_resumes_to_the_same_report() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path(), "10");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let base = ["--manifest", &manifest, "--set", "n=2", "--set", "t=4"];
    let mut args = vec!["run", "--output-dir", s(&a), "--stop-after", "20"];
    args.extend(base);
    assert_eq!(prophet(&args).status.code(), Some(3));
    let mut args = vec!["run", "--output-dir", s(&a)];
    args.extend(base);
    assert_eq!(prophet(&args).status.code(), Some(0));
    let mut args = vec!["run", "--output-dir", s(&b)];
    args.extend(base);
    assert_eq!(prophet(&args).status.code(), Some(0));
    assert_eq!(fs::read(a.join("report.json")).unwrap(), fs::read(b.join("report.json")).unwrap());
    let lines = fs::read_to_string(a.join("transcripts.jsonl")).unwrap().lines().count();
    assert_eq!(lines, 40);
}

#[test]
fn config_errors_exit_four() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path(), "5");
    let run = dir.path().join("run");
    let out = prophet(&["run", "--manifest", &manifest, "--output-dir", s(&run), "--set", "strategy=rand"]);
    assert_eq!(out.status.code(), Some(4));
    let out = prophet(&["run", "--manifest", &manifest, "--output-dir", s(&run), "--set", "bogus=1"]);
    assert_eq!(out.status.code(), Some(4));
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "unknown_key = 3\n").unwrap();
    let out = prophet(&["run", "--config", s(&cfg)]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn toml_config_and_prompt_dump() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path(), "4");
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        "manifest = \"fx/manifest.json\"\noutput_dir = \"out\"\n[prompt]\nn = 0\nt = 1\n",
    )
    .unwrap();
    let prompts = dir.path().join("prompts");
    let out = prophet(&["prompts", "--config", s(&cfg), "--out", s(&prompts)]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = fs::read_to_string(prompts.join("test00000_q0.txt")).unwrap();
    assert_eq!(text.matches("Context:").count(), 1);
    assert!(text.ends_with("Answer:"));
    assert!(!prompts.join("test00000_q1.txt").exists());

    let heur = dir.path().join("heur");
    let out = prophet(&["heuristics", "--config", s(&cfg), "--set", "n=3", "--out", s(&heur)]);
    assert!(out.status.success());
    assert_eq!(fs::read_to_string(heur.join("examples.jsonl")).unwrap().lines().count(), 4);
    assert!(heur.join("candidates.jsonl").exists());
}

#[test]
fn ablation_grid_has_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixture(dir.path(), "6");
    let out_dir = dir.path().join("abl");
    let out = prophet(&[
        "ablate", "--manifest", &manifest, "--output-dir", s(&out_dir), "--set", "n=2", "--set", "t=2",
        "--axis", "k=1,3,5", "--axis", "prompt=default,no_head",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(out_dir.join("grid.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    assert!(csv.contains("(b) w/o prompt head"));
    let md = fs::read_to_string(out_dir.join("grid.md")).unwrap();
    assert!(md.contains("K=5, (a) default"));
}
