use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mbil::config::ExperimentConfig;
use mbil::experiment;

#[derive(Parser)]
#[command(name = "mbil", version, about = "Markov balance-based imitation learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config value by dotted path, e.g. `mbil.alpha=1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Base seed (`run.seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (`run.out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the expert demonstration pool as JSONL.
    GenExpert(Common),
    /// Train over every dataset size and seed.
    Train(Common),
    /// Roll out a policy checkpoint.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `eval.final_episodes`.
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Compare a run's density models with the true densities.
    DensityCheck {
        #[command(flatten)]
        common: Common,
        /// Run directory holding flow_p.json and flow_t.json.
        #[arg(long)]
        run: PathBuf,
    },
    /// Run the (alpha, beta) ablation grid.
    Ablate(Common),
}

fn resolve(c: &Common) -> Result<ExperimentConfig, mbil::Error> {
    let mut set = c.set.clone();
    if let Some(s) = c.seed {
        set.push(format!("run.seed={s}"));
    }
    if let Some(o) = &c.out {
        set.push(format!("run.out={}", toml::Value::String(o.display().to_string())));
    }
    ExperimentConfig::resolve(c.config.as_deref(), &set)
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn run(cmd: Command) -> Result<(), (u8, mbil::Error)> {
    let common = match &cmd {
        Command::GenExpert(c) | Command::Train(c) | Command::Ablate(c) => c,
        Command::Evaluate { common, .. } | Command::DensityCheck { common, .. } => common,
    };
    let cfg = resolve(common).map_err(|e| (1, e))?;
    let runtime = |e| (2, e);
    match cmd {
        Command::GenExpert(_) => {
            let p = experiment::cmd_gen_expert(&cfg).map_err(runtime)?;
            println!("wrote {}", p.display());
        }
        Command::Train(_) => {
            let r = experiment::cmd_train(&cfg).map_err(runtime)?;
            println!("{} runs, summary in {}", r.len(), cfg.run.out.join("summary.csv").display());
        }
        Command::Ablate(_) => {
            let r = experiment::cmd_ablate(&cfg).map_err(runtime)?;
            println!("{} runs, summary in {}", r.len(), cfg.run.out.join("summary.csv").display());
        }
        Command::Evaluate { checkpoint, episodes, .. } => {
            let n = episodes.unwrap_or(cfg.eval.final_episodes);
            let r = experiment::cmd_evaluate(&cfg, &checkpoint, n, cfg.run.seed).map_err(runtime)?;
            print_json(&r);
        }
        Command::DensityCheck { run, .. } => {
            let r = experiment::cmd_density_check(&cfg, &run).map_err(runtime)?;
            print_json(&r);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err((code, e)) => {
            eprintln!("error: {e}");
            ExitCode::from(code)
        }
    }
}
