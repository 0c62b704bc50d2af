//! Command-line pipeline over the `megcast` library: synthesise, tokenise, train,
//! generate, evaluate and decode, with every artifact written under one
//! output directory.

pub mod commands;
pub mod config;
pub mod error;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use commands::Stage;
pub use config::RunConfig;
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "megcast", version, about = "Forecasting pipeline for multichannel time series")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesise (or ingest) a recording.
    Synth(Common),
    /// Split, preprocess and tokenise the recording.
    Tokenize(Common),
    /// Train the configured model.
    Train(Common),
    /// Generate data from the trained model.
    Generate(Common),
    /// Compare generated and reference data.
    Eval(Common),
    /// Decode conditions generatively and with transfer-learned classifiers.
    Decode(Common),
    /// Print the resolved configuration.
    Config(Common),
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Configuration file (TOML); defaults apply when absent.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output root; each command writes a subdirectory of it.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replace artifacts of an earlier run.
    #[arg(long)]
    pub force: bool,
    /// Dotted overrides such as train.learning_rate=0.0005.
    #[arg(value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Synth(c)
            | Command::Tokenize(c)
            | Command::Train(c)
            | Command::Generate(c)
            | Command::Eval(c)
            | Command::Decode(c)
            | Command::Config(c) => c,
        }
    }
}

/// Config file, then dotted overrides, then `--seed` and `--out`.
pub fn resolve_config(c: &Common) -> Result<RunConfig, CliError> {
    let text = match &c.config {
        Some(p) => std::fs::read_to_string(p).map_err(|_| CliError::MissingInput {
            path: p.clone(),
            hint: "configuration file not readable".into(),
        })?,
        None => String::new(),
    };
    let mut cfg = RunConfig::parse(&text, &c.overrides)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.out = o.to_string_lossy().into_owned();
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs one parsed command; returns the directory it wrote, if any.
pub fn execute(command: &Command) -> Result<Option<PathBuf>, CliError> {
    let common = command.common();
    let cfg = resolve_config(common)?;
    let f = common.force;
    let dir = match command {
        Command::Synth(_) => commands::cmd_synth(&cfg, f)?,
        Command::Tokenize(_) => commands::cmd_tokenize(&cfg, f)?,
        Command::Train(_) => commands::cmd_train(&cfg, f)?,
        Command::Generate(_) => commands::cmd_generate(&cfg, f)?,
        Command::Eval(_) => commands::cmd_eval(&cfg, f)?,
        Command::Decode(_) => commands::cmd_decode(&cfg, f)?,
        Command::Config(_) => {
            print!("{}", cfg.to_toml());
            return Ok(None);
        }
    };
    Ok(Some(dir))
}

/// Parses arguments, runs the command and returns the process exit code.
/// Failures print a single `error code=… kind=… message=…` line to stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            if code == 0 {
                print!("{e}");
            } else {
                let err = CliError::Config(e.kind().to_string());
                eprintln!("{}", err.line());
            }
            return code;
        }
    };
    match execute(&cli.command) {
        Ok(Some(dir)) => {
            println!("ok {}", dir.display());
            0
        }
        Ok(None) => 0,
        Err(e) => {
            eprintln!("{}", e.line());
            e.exit_code()
        }
    }
}
