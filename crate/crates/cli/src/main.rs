mod bench;
mod config;

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use cmanp::cmanp::{load_checkpoint, save_checkpoint, Checkpoint, Feedback, Model, Variant};
use cmanp::tasks::Kernel;
use cmanp::trainer::{
    constant_baseline, default_eval_mode, eval_tasks, evaluate, EvalMode, EvalSummary, Trainer, CSV_HEADER,
};
use serde_json::json;

use config::RunConfig;

#[derive(Parser)]
#[command(name = "cmanp", version, about = "Train, evaluate and benchmark constant-memory attentive neural processes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train on GP regression tasks; writes metrics.csv and checkpoint.bin.
    Train(Common),
    /// Evaluate a checkpoint on held-out RBF and Matern 5/2 tasks; writes summary.json.
    Eval(Common),
    /// Peak scratch memory of conditioning across context sizes; writes bench_memory.csv.
    BenchMemory(Common),
    /// Cost of updates across prior context and update sizes; writes bench_update.csv.
    BenchUpdate(Common),
    /// Run the property suites on random small instances.
    Verify(VerifyArgs),
}

#[derive(Args, Clone)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set model.k=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Seed; overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint to load. `train` resumes from it.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Random instances per suite.
    #[arg(long, default_value_t = 20)]
    cases: usize,
    /// Run the attention update without softplus stabilisation.
    #[arg(long)]
    inject_fault: bool,
    /// Output directory for summary.json.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Train(c) => cmd_train(&c),
        Command::Eval(c) => cmd_eval(&c),
        Command::BenchMemory(c) => setup(&c).and_then(|(cfg, model)| bench::memory(&cfg, &model, &c.out)),
        Command::BenchUpdate(c) => setup(&c).and_then(|(cfg, model)| bench::update(&cfg, &model, &c.out)),
        Command::Verify(v) => cmd_verify(&v),
    };
    match res {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn load_config(c: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(c.config.as_deref(), &c.set)?;
    if let Some(s) = c.seed {
        cfg.train.seed = s;
    }
    fs::create_dir_all(&c.out).with_context(|| format!("cannot create {}", c.out.display()))?;
    Ok(cfg)
}

/// Config plus a model from `--checkpoint`, or freshly initialised.
fn setup(c: &Common) -> Result<(RunConfig, Model)> {
    let mut cfg = load_config(c)?;
    let model = match &c.checkpoint {
        Some(p) => {
            let ck = load_checkpoint(p).with_context(|| format!("cannot load {}", p.display()))?;
            cfg.model = ck.config;
            ck.model()?
        }
        None => Model::init(cfg.model, cfg.train.seed)?,
    };
    Ok((cfg, model))
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)? + "\n").with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_train(c: &Common) -> Result<bool> {
    let mut cfg = load_config(c)?;
    let mut trainer = match &c.checkpoint {
        Some(p) => {
            let ck = load_checkpoint(p).with_context(|| format!("cannot load {}", p.display()))?;
            let Some(adam) = ck.adam.clone() else {
                bail!("{} has no optimizer state to resume from", p.display());
            };
            cfg.model = ck.config;
            Trainer::resume(ck.model()?, adam, ck.step, cfg.train, cfg.tasks)?
        }
        None => Trainer::new(Model::init(cfg.model, cfg.train.seed)?, cfg.train, cfg.tasks)?,
    };
    let csv_path = c.out.join("metrics.csv");
    let mut csv = if trainer.step > 0 && csv_path.exists() {
        OpenOptions::new().append(true).open(&csv_path)?
    } else {
        let mut f = File::create(&csv_path).with_context(|| format!("cannot create {}", csv_path.display()))?;
        writeln!(f, "{CSV_HEADER}")?;
        f
    };
    let extra = serde_json::to_value(&cfg)?;
    let ck_path = c.out.join("checkpoint.bin");
    let every = cfg.train.eval_every;
    let mut last = None;
    let res = loop {
        if trainer.step >= cfg.train.steps {
            break Ok(());
        }
        match trainer.step() {
            Ok(rec) => {
                writeln!(csv, "{}", rec.csv_row())?;
                if every > 0 && rec.step % every == 0 {
                    csv.flush()?;
                    let ck = Checkpoint::from_model(&trainer.model, trainer.step, Some(trainer.adam.clone()), extra.clone());
                    save_checkpoint(&ck_path, &ck)?;
                    eprintln!(
                        "step {} train_nll {:.4} eval_rbf {:.4} eval_matern {:.4} ({} s)",
                        rec.step,
                        rec.train_nll,
                        rec.eval_rbf.unwrap_or(f64::NAN),
                        rec.eval_matern.unwrap_or(f64::NAN),
                        rec.wall_ms / 1000
                    );
                }
                last = Some(rec);
            }
            Err(e) => break Err(e),
        }
    };
    csv.flush()?;
    if let Err(e) = res {
        let diag = c.out.join("diverged.bin");
        let ck = Checkpoint::from_model(&trainer.model, trainer.step, Some(trainer.adam.clone()), json!({ "error": e.to_string(), "run": extra }));
        save_checkpoint(&diag, &ck)?;
        bail!("{e}; last good parameters saved to {}", diag.display());
    }
    let ck = Checkpoint::from_model(&trainer.model, trainer.step, Some(trainer.adam.clone()), extra);
    save_checkpoint(&ck_path, &ck)?;
    let summary = json!({
        "steps": trainer.step,
        "final": last,
        "checkpoint": ck_path,
        "metrics": csv_path,
    });
    write_json(&c.out.join("summary.json"), &summary)?;
    println!("trained {} steps; checkpoint {}", trainer.step, ck_path.display());
    Ok(true)
}

fn parse_feedback(s: &str) -> Result<Feedback> {
    Ok(match s {
        "sample" => Feedback::Sample,
        "mean" => Feedback::Mean,
        "observed" => Feedback::Observed,
        other => bail!("unknown feedback `{other}`; expected sample, mean or observed"),
    })
}

fn summary_json(s: &EvalSummary) -> serde_json::Value {
    json!({ "mean": s.mean, "stderr": s.stderr, "tasks": s.tasks })
}

fn cmd_eval(c: &Common) -> Result<bool> {
    let (cfg, model) = setup(c)?;
    let n = cfg.eval.tasks;
    let seed = cfg.train.seed;
    let mode = default_eval_mode(&model);
    let mut out = serde_json::Map::new();
    for kernel in [Kernel::Rbf, Kernel::Matern52] {
        let tasks = eval_tasks(&cfg.tasks, kernel, n, seed)?;
        let mut entry = serde_json::Map::new();
        let main = evaluate(&model, &tasks, mode, seed)?;
        println!("{:<9} {:?}: {:.4} ± {:.4}", kernel.name(), mode, main.mean, main.stderr);
        entry.insert("model".into(), summary_json(&main));
        entry.insert("baseline_mle".into(), summary_json(&constant_baseline(&tasks, false)));
        entry.insert("baseline_unbiased".into(), summary_json(&constant_baseline(&tasks, true)));
        if model.config().variant == Variant::And {
            entry.insert("marginals".into(), summary_json(&evaluate(&model, &tasks, EvalMode::Diagonal, seed)?));
            let mut and = serde_json::Map::new();
            for fb in &cfg.eval.feedback {
                let feedback = parse_feedback(fb)?;
                let mut rows = serde_json::Map::new();
                for &b in &cfg.eval.block_sizes {
                    // 0 means one block holding every target.
                    let block = if b == 0 { usize::MAX } else { b };
                    let s = evaluate(&model, &tasks, EvalMode::And { block, feedback }, seed)?;
                    let label = if b == 0 { "M".to_string() } else { b.to_string() };
                    println!("{:<9} and b_q={label:<3} {fb:<8}: {:.4} ± {:.4}", kernel.name(), s.mean, s.stderr);
                    rows.insert(label, summary_json(&s));
                }
                and.insert(fb.clone(), rows.into());
            }
            entry.insert("and".into(), and.into());
        }
        out.insert(kernel.name().into(), entry.into());
    }
    out.insert("config".into(), serde_json::to_value(&cfg)?);
    write_json(&c.out.join("summary.json"), &out.into())?;
    Ok(true)
}

fn cmd_verify(v: &VerifyArgs) -> Result<bool> {
    let report = cmanp::verify::run_all(v.seed, v.cases, v.inject_fault);
    for s in &report.suites {
        println!(
            "{:<24} {:>4}/{:<4} {}",
            s.name,
            s.passed,
            s.cases,
            if s.ok() { "PASS" } else { "FAIL" }
        );
        if let Some(f) = &s.first_failure {
            println!("    first failure: {f}");
        }
    }
    if let Some(dir) = &v.out {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("summary.json"), &serde_json::to_value(&report)?)?;
    }
    Ok(report.ok())
}
