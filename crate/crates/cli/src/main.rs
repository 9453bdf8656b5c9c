//! `nobox`: train tiny substitute models, craft transferable adversarial
//! examples on them, and evaluate transfer against victim classifiers.

mod commands;
mod config;
mod manifest;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use nobox_core::evaluation::RemoteVictimConfig;

#[derive(Parser)]
#[command(name = "nobox", version, about = "No-box substitute training and transfer attacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the bundled two-class toy dataset as PNG files.
    GenData {
        /// Output root; images land in `<root>/<class>/NNNN.png`.
        #[arg(long)]
        root: PathBuf,
        #[arg(long, default_value_t = 60)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "class0,class1", value_delimiter = ',')]
        class_dirs: Vec<String>,
    },
    /// Train the toy victim zoo and write checkpoint files.
    TrainVictims {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 300)]
        per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train one substitute per target image.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Craft adversarial examples from trained checkpoints.
    Craft {
        #[arg(long)]
        config: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score crafted examples against victim checkpoints.
    Eval {
        /// Directory with crafted PNGs and their sidecar JSONs.
        #[arg(long)]
        adv_dir: PathBuf,
        /// Directory with victim checkpoints (*.nbcl).
        #[arg(long)]
        victims: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Optional remote victim endpoint (evaluation only). The bearer
        /// token is read from NOBOX_REMOTE_TOKEN.
        #[arg(long)]
        remote_endpoint: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate one or more completed runs into tables and plots.
    Report {
        #[arg(long)]
        out: PathBuf,
        /// Completed run directories.
        run_dirs: Vec<PathBuf>,
    },
    /// train, craft, eval, and report in order.
    Pipeline {
        #[arg(long)]
        config: PathBuf,
        /// Use an existing victim zoo instead of training one.
        #[arg(long)]
        victims: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

/// Flag overrides for config fields.
#[derive(clap::Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_root: Option<PathBuf>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    mechanism: Option<String>,
    #[arg(long)]
    num_decoders: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
}

fn apply_overrides(config: &mut RunConfig, o: &Overrides) -> anyhow::Result<()> {
    if let Some(seed) = o.seed {
        config.run.seed = seed;
    }
    if let Some(root) = &o.output_root {
        config.run.output_root = root.clone();
    }
    if let Some(eps) = o.epsilon {
        config.attack.epsilon = eps;
    }
    if let Some(mech) = &o.mechanism {
        config.substitute.mechanism = serde_json::from_value(serde_json::Value::String(mech.clone()))
            .map_err(|_| anyhow::anyhow!("config field `substitute.mechanism`: unknown mechanism `{mech}`"))?;
    }
    if let Some(k) = o.num_decoders {
        config.substitute.num_decoders = k;
    }
    if let Some(n) = o.n {
        config.run.n = n;
    }
    config.validate()?;
    Ok(())
}

/// Exit codes: 0 success, 1 validation error, 2 runtime failure,
/// 3 partial/incomplete report.
fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let text = format!("{e:#}");
            if text.contains("config field")
                || text.contains("parsing config")
                || text.contains("missing sidecar")
                || text.contains("invalid")
            {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::GenData {
            root,
            per_class,
            size,
            seed,
            class_dirs,
        } => {
            if class_dirs.len() != 2 {
                anyhow::bail!("config field `class_dirs`: exactly two class names required");
            }
            let dirs = [class_dirs[0].clone(), class_dirs[1].clone()];
            commands::cmd_gen_data(&root, per_class, size, seed, &dirs)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::TrainVictims {
            out,
            size,
            per_class,
            seed,
        } => {
            commands::cmd_train_victims(&out, size, per_class, seed)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Train { config, overrides } => {
            let mut config = RunConfig::load(&config)?;
            apply_overrides(&mut config, &overrides)?;
            commands::cmd_train(&config)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Craft { config, overrides } => {
            let mut config = RunConfig::load(&config)?;
            apply_overrides(&mut config, &overrides)?;
            commands::cmd_craft(&config)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            adv_dir,
            victims,
            out,
            remote_endpoint,
            seed,
        } => {
            let remote = remote_endpoint.map(|endpoint| {
                let mut rc = RemoteVictimConfig::new(endpoint);
                rc.auth_token = std::env::var("NOBOX_REMOTE_TOKEN").ok();
                rc
            });
            let report = commands::cmd_eval(&adv_dir, &victims, &out, remote, seed)?;
            if report.incomplete {
                eprintln!("warning: report incomplete (some items unscored)");
                return Ok(ExitCode::from(3));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Report { out, run_dirs } => {
            commands::cmd_report(&run_dirs, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Pipeline {
            config,
            victims,
            overrides,
        } => {
            let mut config = RunConfig::load(&config)?;
            apply_overrides(&mut config, &overrides)?;
            let report = commands::cmd_pipeline(&config, victims.as_deref())?;
            if report.incomplete {
                return Ok(ExitCode::from(3));
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
