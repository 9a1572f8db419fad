use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use deskrl::config::RunConfig;
use deskrl::pipeline::{ExportKind, PipelineError, Run};

/// Desk-scale RL fine-tuning of token-action policies.
///
/// Exit codes: 0 success, 2 config error, 3 numeric failure, 4 I/O failure.
/// `DESKRL_RUN_DIR` overrides the run directory.
#[derive(Parser)]
#[command(name = "deskrl", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat JSON config file (`{"ppo.lr": 2e-5, ...}`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set ppo.iterations=50`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the scripted expert and write the demonstration dataset.
    GenDemos,
    /// Behavior-clone the demonstrations into the SFT policy.
    Sft,
    /// Pseudo-label trajectories for the reward model.
    Label {
        /// JSON Lines of trajectory logs (default: the demonstrations).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train the process reward model on the label file.
    TrainRprm {
        /// Trajectories the labels refer to (default: the demonstrations).
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// PPO fine-tuning from the SFT policy.
    Train {
        /// Continue from the latest checkpoint in the run directory.
        #[arg(long)]
        resume: bool,
        /// Sparse reward only (β = 0).
        #[arg(long)]
        no_rprm: bool,
        /// Uniform task sampling.
        #[arg(long)]
        no_curriculum: bool,
        /// Critic warmup iterations.
        #[arg(long)]
        warmup: Option<usize>,
        /// Rollout sampling temperature.
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Greedy evaluation with binomial 95% intervals.
    Eval {
        /// Policy or RL checkpoint (default: latest RL, else SFT).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Episodes per task (default: `eval.episodes_per_task`).
        #[arg(long)]
        episodes: Option<usize>,
        /// Evaluate the scripted expert instead of a checkpoint.
        #[arg(long)]
        expert: bool,
    },
    /// Reformat run outputs as CSV.
    Export {
        #[arg(value_enum)]
        kind: ExportArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportArg {
    Metrics,
    ActionCoverage,
}

fn print<T: Serialize>(x: &T) {
    println!("{}", serde_json::to_string_pretty(x).expect("serializes"));
}

/// Ablation flags become config overrides and a run tag.
fn ablation_overrides(command: &Command) -> Vec<String> {
    let Command::Train { no_rprm, no_curriculum, warmup, temperature, .. } = command else {
        return Vec::new();
    };
    let mut sets = Vec::new();
    let mut tags = Vec::new();
    if *no_rprm {
        sets.push("rprm.beta=0".to_string());
        tags.push("no-rprm".to_string());
    }
    if *no_curriculum {
        sets.push("curriculum.uniform=true".to_string());
        tags.push("no-curriculum".to_string());
    }
    if let Some(w) = warmup {
        sets.push(format!("ppo.warmup_iters={w}"));
        tags.push(format!("warmup-{w}"));
    }
    if let Some(t) = temperature {
        sets.push(format!("ppo.temperature={t}"));
        tags.push(format!("temperature-{t}"));
    }
    if !tags.is_empty() {
        sets.push(format!("run.tag={}", tags.join("+")));
    }
    sets
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let mut overrides = cli.common.overrides.clone();
    let ablation = ablation_overrides(&cli.command);
    if !ablation.is_empty() {
        // The explicit `--set run.tag=...` wins over the generated tag.
        let user_tag = overrides.iter().any(|o| o.starts_with("run.tag="));
        overrides.splice(0..0, ablation.into_iter().filter(|o| !(user_tag && o.starts_with("run.tag="))));
    }
    let cfg = RunConfig::load(cli.common.config.as_deref(), &overrides)?;
    let run = Run::open(cfg)?;
    match cli.command {
        Command::GenDemos => print(&run.gen_demos()?),
        Command::Sft => print(&run.sft()?),
        Command::Label { input } => print(&run.label(input.as_deref())?),
        Command::TrainRprm { input } => print(&run.train_rprm(input.as_deref())?),
        Command::Train { resume, .. } => {
            let records = run.train(resume)?;
            if let Some(last) = records.last() {
                print(last);
            }
            eprintln!("{} iteration(s) written to {}", records.len(), run.dir.display());
        }
        Command::Eval { checkpoint, episodes, expert } => {
            let r = run.eval(checkpoint.as_deref(), episodes, expert)?;
            for (suite, ci) in &r.per_suite {
                eprintln!("{suite}: {:.3} [{:.3}, {:.3}] over {} episodes", ci.rate, ci.ci_low, ci.ci_high, ci.episodes);
            }
            print(&r.overall);
        }
        Command::Export { kind } => {
            let kind = match kind {
                ExportArg::Metrics => ExportKind::Metrics,
                ExportArg::ActionCoverage => ExportKind::ActionCoverage,
            };
            println!("{}", run.export(kind)?.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
