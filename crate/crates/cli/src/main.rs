use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cfpref_cli::commands::{self, CliError, Overrides};
use cfpref_core::policy::LossKind;
use cfpref_core::sim::ScenarioId;

#[derive(Parser)]
#[command(name = "cfpref", version, about = "Counterfactual preference pipeline for local navigation")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Common {
    /// Run config (JSON); defaults to <out>/config.json, then built-in defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct PolicyArgs {
    #[arg(long, conflicts_with = "loss")]
    checkpoint: Option<PathBuf>,
    /// Use <out>/checkpoints/<loss>.json.
    #[arg(long, value_parser = parse_loss)]
    loss: Option<LossKind>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Teleoperated demonstrations and unannotated candidate sets.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        observations: Option<usize>,
    },
    /// HTTP annotation service; exports on Ctrl-C.
    AnnotateServe {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        #[arg(long)]
        lease_secs: Option<f64>,
    },
    /// Scripted targets and oracle labels for every pair.
    AutoAnnotate {
        #[command(flatten)]
        common: Common,
    },
    /// Best candidate per observation and the dataset summary.
    Aggregate {
        #[command(flatten)]
        common: Common,
    },
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_loss)]
        loss: LossKind,
    },
    /// Offline metrics on the held-out split.
    EvalOffline {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: PolicyArgs,
    },
    /// Closed-loop episodes with the asynchronous executor.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        policy: PolicyArgs,
        /// Repeatable; defaults to every configured scenario.
        #[arg(long, value_parser = parse_scenario)]
        scenario: Vec<ScenarioId>,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Tables and histograms from earlier outputs.
    Report {
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    LossKind::parse(s).ok_or_else(|| format!("unknown loss {s:?}; use bc or chop"))
}

fn parse_scenario(s: &str) -> Result<ScenarioId, String> {
    let names: Vec<&str> = ScenarioId::ALL.iter().map(|s| s.as_str()).collect();
    ScenarioId::parse(s).ok_or_else(|| format!("unknown scenario {s:?}; use one of {}", names.join(", ")))
}

fn overrides(c: &Common) -> Overrides {
    Overrides {
        config: c.config.clone(),
        seed: c.seed,
        ..Overrides::default()
    }
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn policy(out: &Path, p: &PolicyArgs) -> Result<(PathBuf, String), CliError> {
    commands::resolve_checkpoint(out, p.checkpoint.as_deref(), p.loss)
}

fn run(cmd: Cmd) -> Result<(), CliError> {
    match cmd {
        Cmd::GenData { common, observations } => {
            let cfg = commands::load_config(
                &common.out,
                &Overrides {
                    observations,
                    ..overrides(&common)
                },
            )?;
            print_json(&commands::gen_data(&common.out, &cfg)?);
        }
        Cmd::AnnotateServe {
            common,
            addr,
            lease_secs,
        } => {
            let cfg = commands::load_config(&common.out, &overrides(&common))?;
            let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::InvalidArgument(e.to_string()))?;
            rt.block_on(commands::annotate_serve(&common.out, &cfg, &addr, lease_secs))?;
        }
        Cmd::AutoAnnotate { common } => {
            let cfg = commands::load_config(&common.out, &overrides(&common))?;
            print_json(&commands::auto_annotate(&common.out, &cfg)?);
        }
        Cmd::Aggregate { common } => {
            let cfg = commands::load_config(&common.out, &overrides(&common))?;
            print_json(&commands::aggregate(&common.out, &cfg)?);
        }
        Cmd::Train { common, loss } => {
            let cfg = commands::load_config(&common.out, &overrides(&common))?;
            print_json(&commands::train(&common.out, &cfg, loss)?);
        }
        Cmd::EvalOffline { common, policy: p } => {
            let cfg = commands::load_config(&common.out, &overrides(&common))?;
            let (path, label) = policy(&common.out, &p)?;
            let mut report = commands::eval_offline(&common.out, &cfg, &path, &label)?;
            report.rows.clear();
            print_json(&report);
        }
        Cmd::Simulate {
            common,
            policy: p,
            scenario,
            episodes,
        } => {
            let cfg = commands::load_config(
                &common.out,
                &Overrides {
                    episodes,
                    ..overrides(&common)
                },
            )?;
            let (path, label) = policy(&common.out, &p)?;
            print_json(&commands::simulate(&common.out, &cfg, &path, &label, &scenario)?);
        }
        Cmd::Report { out } => print!("{}", commands::report(&out)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse().cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
