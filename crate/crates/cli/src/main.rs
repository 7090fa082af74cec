use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use oplstm::harness::learners::{fixed_tasks, task_sources, TEST_STREAM};
use oplstm::harness::train::check_config_hash;
use oplstm::harness::{evaluate, load_learner, loss_metric, meta_train, sweep, update_direction_analysis, MetricsLog, RunConfig, TrainOptions};

#[derive(Parser)]
#[command(name = "oplstm", about = "Meta-train and analyze LSTM-based few-shot learners")]
struct Cli {
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train a learner from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a `last.ckpt`.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Accept a checkpoint written under a different config.
        #[arg(long)]
        force: bool,
    },
    /// Evaluate a checkpoint on fresh test tasks.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        tasks: usize,
        /// Config the checkpoint must match.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Compare OP-LSTM output-layer updates with gradient descent and prototypes.
    AnalyzeUpdates {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        tasks: usize,
        #[arg(long, default_value_t = 0.01)]
        gd_lr: f64,
        /// Defaults to the model's number of adaptation passes.
        #[arg(long)]
        gd_steps: Option<usize>,
    },
    /// Train every combination in a grid file.
    Sweep {
        #[arg(long)]
        grid: PathBuf,
    },
}

fn apply_overrides(cfg: &mut RunConfig, seed: Option<u64>, out: &Option<PathBuf>) {
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out = o.clone();
    }
}

fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    RunConfig::parse(&text).with_context(|| format!("parsing {}", path.display()))
}

fn print_rows(rows: &[(String, oplstm::harness::Stat)]) {
    for (m, s) in rows {
        println!("{m}: {:.6} ± {:.6} (n = {})", s.mean, s.ci95, s.n);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, resume, force } => {
            let mut cfg = read_config(&config)?;
            apply_overrides(&mut cfg, cli.seed, &cli.out);
            let out = meta_train(&cfg, &TrainOptions { resume, force, stop_after: None })?;
            println!("best validation at iteration {}", out.best_iteration);
            print_rows(&out.test);
            println!("logs and checkpoints in {}", out.out_dir.display());
        }
        Command::Eval { checkpoint, tasks, config, force } => {
            let (mut cfg, learner, ckpt) = load_learner(&checkpoint)?;
            if let Some(p) = config {
                check_config_hash(&ckpt, &read_config(&p)?, force)?;
            }
            let out_dir = cli.out.clone();
            apply_overrides(&mut cfg, cli.seed, &cli.out);
            let sources = task_sources(&cfg)?;
            let tasks = fixed_tasks(&sources.test, cfg.seed, TEST_STREAM, tasks)?;
            let iteration = ckpt.get("iteration")?.item() as usize;
            let rows = evaluate(&learner, &tasks, loss_metric(&cfg), cfg.threads)?;
            print_rows(&rows);
            if let Some(dir) = out_dir {
                let mut log = MetricsLog::default();
                for (m, s) in &rows {
                    log.record(iteration, "test", m, *s, 0.0)?;
                }
                std::fs::create_dir_all(&dir)?;
                log.write_csv(&dir.join("eval.csv"))?;
            }
        }
        Command::AnalyzeUpdates { checkpoint, tasks, gd_lr, gd_steps } => {
            let (mut cfg, learner, ckpt) = load_learner(&checkpoint)?;
            let Some(model) = learner.as_oplstm() else {
                bail!("update analysis needs an OP-LSTM checkpoint");
            };
            let out_dir = cli.out.clone();
            apply_overrides(&mut cfg, cli.seed, &cli.out);
            let sources = task_sources(&cfg)?;
            let tasks = fixed_tasks(&sources.test, cfg.seed, TEST_STREAM, tasks)?;
            let steps = gd_steps.unwrap_or(model.arch.unroll_t);
            let report = update_direction_analysis(model, &tasks, gd_lr, steps)?;
            print_rows(&report.summary);
            if let Some(dir) = out_dir {
                let mut log = MetricsLog::default();
                report.log_into(&mut log, ckpt.get("iteration")?.item() as usize, 0.0)?;
                std::fs::create_dir_all(&dir)?;
                log.write_csv(&dir.join("analysis.csv"))?;
            }
        }
        Command::Sweep { grid } => {
            let (seed, out) = (cli.seed, cli.out.clone());
            let runs = sweep(&grid, |c| {
                apply_overrides(c, seed, &out);
                Ok(())
            })?;
            for r in &runs {
                let label: Vec<String> = r.settings.iter().map(|(k, v)| format!("{k}={v}")).collect();
                let scores: Vec<String> = r.test.iter().map(|(m, mean, ci)| format!("{m} {mean:.5} ± {ci:.5}")).collect();
                println!("run {:03} [{}]: {}", r.index, label.join(", "), scores.join(", "));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
