use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use wm_core::adapter::Task;
use wm_core::pipeline::{wm_info, Pipeline, RunConfig, Stage};

#[derive(Parser, Debug)]
#[command(name = "wm", version, about = "Energy-based consumer world model pipeline")]
struct Cli {
    /// TOML run configuration; missing keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides `out` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run a single stage by name (same as the stage subcommand).
    #[arg(long)]
    stage: Option<String>,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Visit,
    Purchase,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Visit => Task::Visit,
            TaskArg::Purchase => Task::Purchase,
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Simulate the panel and write panel.csv, traits.csv, profiles.csv.
    Simulate,
    /// Encode visible vectors per split.
    Encode,
    /// Pretrain, fine-tune and freeze the world model.
    TrainWm,
    /// Mean-field beliefs for every split.
    ExtractBelief,
    /// Fit belief adapters (all tasks unless --task is given).
    TrainAdapter {
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
    },
    /// Fit raw-feature baseline MLPs.
    TrainBaselines {
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
    },
    /// Test-split predictions and AUCs.
    EvalPred,
    /// Treatment-effect estimates for adapters and meta-learners.
    EvalCate,
    /// Clamp free-energy deltas and tests.
    EvalEnergy,
    /// Aggregate reports into summary.md.
    Report,
    /// Every stage in order.
    RunAll,
    /// Dump world-model layer sizes, norms and hashes as JSON.
    WmInfo {
        /// Checkpoint path; defaults to `<out>/world_model.ckpt`.
        checkpoint: Option<PathBuf>,
    },
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = o.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli)?;
    if let Some(name) = &cli.stage {
        if cli.command.is_some() {
            anyhow::bail!("--stage cannot be combined with a subcommand");
        }
        let stage = Stage::from_name(name)?;
        return Ok(Pipeline::new(cfg)?.run_stage(stage, None)?);
    }
    let Some(cmd) = cli.command else {
        anyhow::bail!("no command given; try `wm run-all` or `wm --help`");
    };
    let (stage, task) = match cmd {
        Command::WmInfo { checkpoint } => {
            let path = checkpoint.unwrap_or_else(|| cfg.out.join("world_model.ckpt"));
            let info = wm_info(&path).with_context(|| format!("reading {}", path.display()))?;
            println!("{}", serde_json::to_string_pretty(&info)?);
            return Ok(());
        }
        Command::ShowConfig => {
            print!("{}", cfg.to_toml_string()?);
            return Ok(());
        }
        Command::RunAll => return Ok(Pipeline::new(cfg)?.run_all()?),
        Command::Simulate => (Stage::Simulate, None),
        Command::Encode => (Stage::Encode, None),
        Command::TrainWm => (Stage::TrainWm, None),
        Command::ExtractBelief => (Stage::ExtractBelief, None),
        Command::TrainAdapter { task } => (Stage::TrainAdapter, task.map(Task::from)),
        Command::TrainBaselines { task } => (Stage::TrainBaselines, task.map(Task::from)),
        Command::EvalPred => (Stage::EvalPred, None),
        Command::EvalCate => (Stage::EvalCate, None),
        Command::EvalEnergy => (Stage::EvalEnergy, None),
        Command::Report => (Stage::Report, None),
    };
    Ok(Pipeline::new(cfg)?.run_stage(stage, task)?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
