use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{run_command, CliError};
use crate::config::{parse_override, resolve_config};

#[derive(Debug, Parser)]
#[command(name = "deturb", version, about = "Turbulence restoration with an MC-dropout uncertainty prior")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a degraded/clean training set from a directory of clean images
    Synth,
    /// Train the dropout prior network on (degraded -> clean)
    TrainPrior,
    /// Train the restoration network on (degraded + prior -> clean)
    TrainRestore,
    /// Write the uncertainty prior of an image (or directory of images)
    Estimate,
    /// Restore an image (or directory of images)
    Restore,
    /// Score restorations of a manifest, optionally with identity retrieval
    Eval,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Synth => "synth",
            Command::TrainPrior => "train-prior",
            Command::TrainRestore => "train-restore",
            Command::Estimate => "estimate",
            Command::Restore => "restore",
            Command::Eval => "eval",
        }
    }
}

/// Values are kept as text and validated by the config layer, so flags and
/// config files report type errors the same way.
#[derive(Debug, Args)]
struct Common {
    /// Flat key=value config file
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<String>,
    /// Worker threads; results do not depend on it
    #[arg(long, global = true, value_name = "N")]
    threads: Option<String>,
    #[arg(long, global = true, value_name = "PATH")]
    input: Option<String>,
    #[arg(long, global = true, value_name = "DIR")]
    output: Option<String>,
    #[arg(long, global = true, value_name = "PATH")]
    manifest: Option<String>,
    /// Prior-network checkpoint
    #[arg(long = "atnet1-ckpt", global = true, value_name = "PATH")]
    atnet1_ckpt: Option<String>,
    /// Restoration-network checkpoint
    #[arg(long = "atnet-ckpt", global = true, value_name = "PATH")]
    atnet_ckpt: Option<String>,
    /// Monte-Carlo dropout passes
    #[arg(long = "S", global = true, value_name = "N")]
    samples: Option<String>,
    /// Training iterations of the current stage
    #[arg(long, global = true, value_name = "N")]
    iters: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    batch: Option<String>,
    /// Any config key, e.g. --set lambda_p=0 (repeatable)
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn overrides(command: &Command, c: &Common) -> Result<Vec<(String, String)>, CliError> {
    let mut out = c
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    let iters_key = match command {
        Command::TrainPrior => Some("prior_iters"),
        Command::TrainRestore => Some("restore_iters"),
        _ => None,
    };
    if c.iters.is_some() && iters_key.is_none() {
        return Err(CliError::Usage("--iters only applies to train-prior and train-restore".into()));
    }
    let flags = [
        ("seed", &c.seed),
        ("threads", &c.threads),
        ("input", &c.input),
        ("output", &c.output),
        ("manifest", &c.manifest),
        ("atnet1_ckpt", &c.atnet1_ckpt),
        ("atnet_ckpt", &c.atnet_ckpt),
        ("S", &c.samples),
        ("batch", &c.batch),
        (iters_key.unwrap_or("prior_iters"), &c.iters),
    ];
    out.extend(
        flags
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone()))),
    );
    Ok(out)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let cfg = resolve_config(cli.common.config.as_deref(), &overrides(&cli.command, &cli.common)?)?;
    let threads = cfg.usize("threads");
    if threads > 0 {
        // Fails only if a pool already exists (e.g. repeated in-process calls); harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    }
    run_command(cli.command.name(), &cfg)
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code: 0 success, 1 usage error, 2 runtime failure.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
