use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use prophet::fixtures::{write_fixture, FixtureSpec};
use prophet::pipeline::{
    ablate, apply_override, dump_prompts, render_report, replay, run, write_heuristics,
    AblationPlan, PipelineError, RunConfig, RunOptions,
};

#[derive(Parser)]
#[command(name = "prophet", version, about = "Answer-heuristics prompting for knowledge-based VQA")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with planted answers.
    GenFixtures {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Testing samples; the training split gets five times as many.
        #[arg(long, default_value_t = 200)]
        size: usize,
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 32)]
        classes: usize,
        #[arg(long, default_value_t = 0.6)]
        stage1_accuracy: f64,
    },
    /// Write stage-1 candidates and selected examples.
    Heuristics {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render every prompt of the testing split.
    Prompts {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline; resumes from an existing transcript.
    Run {
        #[command(flatten)]
        run: RunArgs,
        /// Stop after this many new completions.
        #[arg(long, hide = true)]
        stop_after: Option<usize>,
    },
    /// Sweep settings, one run per cell, and merge the results.
    Ablate {
        #[command(flatten)]
        run: RunArgs,
        /// TOML file with an `[axes]` table or a `[[cells]]` list.
        #[arg(long)]
        plan: Option<PathBuf>,
        /// Axis as KEY=V1,V2,...; repeatable.
        #[arg(long = "axis", value_name = "KEY=VALUES")]
        axes: Vec<String>,
    },
    /// Recompute votes and the report of a run from its transcripts.
    Eval {
        /// Directory of a finished run.
        #[arg(long)]
        run_dir: PathBuf,
        /// Where to write the recomputed outputs.
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-render report.md from report.json and print it.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    dump_prompts: Option<PathBuf>,
    /// Setting override as KEY=VALUE (k, n, t, strategy, policy, vote,
    /// prompt, task_format, include_*); repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

fn split_pair(s: &str) -> Result<(&str, &str), PipelineError> {
    s.split_once('=')
        .map(|(k, v)| (k.trim(), v.trim()))
        .ok_or_else(|| PipelineError::Config(format!("expected KEY=VALUE, got {s:?}")))
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(m) = &self.manifest {
            cfg.manifest = m.clone();
        }
        if let Some(o) = &self.output_dir {
            cfg.output_dir = o.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = Some(s);
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(d) = &self.dump_prompts {
            cfg.dump_prompts = Some(d.clone());
        }
        for s in &self.sets {
            let (k, v) = split_pair(s)?;
            apply_override(&mut cfg, k, v)?;
        }
        Ok(cfg)
    }
}

fn load_plan(path: Option<&Path>, axes: &[String]) -> Result<AblationPlan, PipelineError> {
    let mut plan = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| PipelineError::Io {
                path: p.to_path_buf(),
                source: e,
            })?;
            toml::from_str(&text).map_err(|e| PipelineError::Config(e.to_string()))?
        }
        None => AblationPlan::default(),
    };
    for a in axes {
        let (k, v) = split_pair(a)?;
        plan.axes
            .insert(k.to_owned(), v.split(',').map(|x| x.trim().to_owned()).collect());
    }
    Ok(plan)
}

fn execute(cmd: Command) -> Result<i32, PipelineError> {
    match cmd {
        Command::GenFixtures {
            out,
            seed,
            size,
            dim,
            classes,
            stage1_accuracy,
        } => {
            let spec = FixtureSpec {
                seed,
                size,
                dim,
                classes,
                stage1_accuracy,
            };
            write_fixture(&out, &spec)?;
            println!("wrote fixture to {}", out.display());
            Ok(0)
        }
        Command::Heuristics { run, out } => {
            let n = write_heuristics(&run.resolve()?, &out)?;
            println!("wrote heuristics for {n} samples to {}", out.display());
            Ok(0)
        }
        Command::Prompts { run, out } => {
            let n = dump_prompts(&run.resolve()?, &out)?;
            println!("wrote {n} prompts to {}", out.display());
            Ok(0)
        }
        Command::Run { run: args, stop_after } => {
            let cfg = args.resolve()?;
            let outcome = run(&cfg, &RunOptions { stop_after })?;
            print!("{}", outcome.report.to_markdown());
            Ok(outcome.exit_code())
        }
        Command::Ablate { run, plan, axes } => {
            let cfg = run.resolve()?;
            let plan = load_plan(plan.as_deref(), &axes)?;
            let out = ablate(&cfg, &plan)?;
            print!("{}", prophet::eval::grid_to_markdown(&out.cells));
            let code = out
                .reports
                .iter()
                .map(|r| match r {
                    None => 3,
                    Some(r) if !r.invariants_hold() => 2,
                    Some(r) if !r.complete => 3,
                    Some(_) => 0,
                })
                .fold(0, |acc, c| if acc == 2 || c == 2 { 2 } else { acc.max(c) });
            Ok(code)
        }
        Command::Eval { run_dir, out } => {
            let outcome = replay(&run_dir, &out)?;
            print!("{}", outcome.report.to_markdown());
            Ok(outcome.exit_code())
        }
        Command::Report { run_dir } => {
            print!("{}", render_report(&run_dir)?);
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
