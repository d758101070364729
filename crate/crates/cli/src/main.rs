//! `rpf`: generation, pretraining, training, inference, interpolation,
//! symmetry reporting and evaluation as reproducible command-line runs.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rpf_core::Error;

use crate::config::RunConfig;

#[derive(Parser)]
#[command(name = "rpf", version, about = "Rectified point flow pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory prefix; the run writes to `<out>-<confighash8>`.
    #[arg(long)]
    out: Option<String>,
    /// Worker thread cap (0 = library default).
    #[arg(long)]
    threads: Option<usize>,
    /// Extra `key=value` overrides for any config key.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of MPC + pose files.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        task: Option<String>,
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Pretrain the overlap encoder on a dataset.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Train the flow model against a frozen encoder checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Run inference; writes predicted MPC + pose files and the noise used.
    Assemble {
        #[command(flatten)]
        common: Common,
        /// Euler steps K.
        #[arg(long)]
        steps: Option<usize>,
        /// Fixed-noise checkpoint to use instead of seeded draws.
        #[arg(long)]
        noise: Option<PathBuf>,
    },
    /// Predictions for s ∈ {0, 0.25, 0.5, 0.75, 1} between two noise files.
    Interpolate {
        #[command(flatten)]
        common: Common,
    },
    /// Detected identical-part classes and stabilizers per object.
    SymmetryReport {
        #[command(flatten)]
        common: Common,
    },
    /// Metrics report over a dataset.
    Evaluate {
        #[command(flatten)]
        common: Common,
    },
}

fn common_overrides(common: &Common) -> Result<Vec<(String, String)>, Error> {
    let mut out = Vec::new();
    for kv in &common.set {
        let Some((k, v)) = kv.split_once('=') else {
            return Err(Error::ConfigError(format!(
                "--set expects KEY=VALUE, got '{kv}'"
            )));
        };
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    if let Some(seed) = common.seed {
        out.push(("seed".into(), seed.to_string()));
    }
    if let Some(out_dir) = &common.out {
        out.push(("out".into(), out_dir.clone()));
    }
    if let Some(threads) = common.threads {
        out.push(("threads".into(), threads.to_string()));
    }
    Ok(out)
}

fn run(cli: Cli) -> Result<(), Error> {
    let (common, schema, extra, cmd): (&Common, &[&str], Vec<(String, String)>, _) =
        match &cli.command {
            Command::GenData {
                common,
                task,
                scheme,
                count,
            } => {
                let mut extra = Vec::new();
                if let Some(v) = task {
                    extra.push(("task".to_string(), v.clone()));
                }
                if let Some(v) = scheme {
                    extra.push(("scheme".to_string(), v.clone()));
                }
                if let Some(v) = count {
                    extra.push(("count".to_string(), v.to_string()));
                }
                (common, commands::GEN_DATA_KEYS, extra, commands::cmd_gen_data as fn(&RunConfig) -> Result<(), Error>)
            }
            Command::Pretrain { common } => {
                (common, commands::PRETRAIN_KEYS, Vec::new(), commands::cmd_pretrain as _)
            }
            Command::Train { common } => {
                (common, commands::TRAIN_KEYS, Vec::new(), commands::cmd_train as _)
            }
            Command::Assemble {
                common,
                steps,
                noise,
            } => {
                let mut extra = Vec::new();
                if let Some(v) = steps {
                    extra.push(("steps".to_string(), v.to_string()));
                }
                if let Some(v) = noise {
                    extra.push(("noise".to_string(), v.display().to_string()));
                }
                (common, commands::ASSEMBLE_KEYS, extra, commands::cmd_assemble as _)
            }
            Command::Interpolate { common } => {
                (common, commands::INTERPOLATE_KEYS, Vec::new(), commands::cmd_interpolate as _)
            }
            Command::SymmetryReport { common } => {
                (common, commands::SYMMETRY_KEYS, Vec::new(), commands::cmd_symmetry_report as _)
            }
            Command::Evaluate { common } => {
                (common, commands::EVALUATE_KEYS, Vec::new(), commands::cmd_evaluate as _)
            }
        };
    let mut overrides = extra;
    overrides.extend(common_overrides(common)?);
    let cfg = RunConfig::load(schema, common.config.as_deref(), &overrides)?;
    let threads = cfg.usize("threads", 0)?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::ConfigError(format!("thread pool: {e}")))?;
    }
    cmd(&cfg)
}

/// Exit codes by failure category: 2 config, 3 io, 4 format, 5 numeric,
/// 1 anything else.
fn categorize(err: &Error) -> (&'static str, u8) {
    match err {
        Error::ConfigError(_) => ("config", 2),
        Error::Io(_) => ("io", 3),
        Error::ParseError { .. } | Error::VersionMismatch(_) => ("format", 4),
        Error::NonFiniteLoss { .. } | Error::NonFiniteActivation(_) => ("numeric", 5),
        _ => ("runtime", 1),
    }
}

fn main() -> ExitCode {
    let level = std::env::var("RPF_LOG").unwrap_or_else(|_| "info".into());
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (category, code) = categorize(&err);
            eprintln!("error ({category}): {err}");
            ExitCode::from(code)
        }
    }
}
