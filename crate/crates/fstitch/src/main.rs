mod commands;

use std::ffi::OsString;
use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

pub const EXIT_OK: u8 = 0;
pub const EXIT_NO_MATCH: u8 = 1;
pub const EXIT_USAGE: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

/// Frontier-stitching watermarks for small image classifiers.
#[derive(Debug, Parser)]
#[command(name = "fstitch", version, args_override_self = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Seed for every random choice of the run.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// File of `key=value` lines supplying flag values; explicit flags win.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Where to write the run manifest.
    #[arg(long, global = true, value_name = "FILE")]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a classifier on MNIST.
    Train(commands::TrainArgs),
    /// Build a key and embed it into a model.
    Mark(commands::MarkArgs),
    /// Query a model (file or HTTP endpoint) with a key and decide.
    Extract(commands::ExtractArgs),
    /// Run removal attacks against a marked model.
    Attack(commands::AttackArgs),
    /// Serve a model over HTTP until interrupted.
    Serve(commands::ServeArgs),
    /// Simulate random responders against the decision rule.
    Nullsim(commands::NullsimArgs),
    /// Re-run the command recorded in a manifest.
    Replay(commands::ReplayArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Train(_) => "train",
            Command::Mark(_) => "mark",
            Command::Extract(_) => "extract",
            Command::Attack(_) => "attack",
            Command::Serve(_) => "serve",
            Command::Nullsim(_) => "nullsim",
            Command::Replay(_) => "replay",
        }
    }
}

const SUBCOMMANDS: [&str; 7] = ["train", "mark", "extract", "attack", "serve", "nullsim", "replay"];

/// Misuse of the tool rather than a failure while running it.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Reads `key=value` lines into flag arguments. `#` starts a comment;
/// `true`/`false` toggle switches.
fn config_args(path: &std::path::Path) -> Result<Vec<OsString>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    let mut args = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| UsageError(format!("{}:{}: expected key=value", path.display(), n + 1)))?;
        let flag = format!("--{}", k.trim().replace('_', "-"));
        match v.trim() {
            "true" => args.push(flag.into()),
            "false" => {}
            value => {
                args.push(flag.into());
                args.push(value.into());
            }
        }
    }
    Ok(args)
}

/// Splices config-file arguments in right after the subcommand so that
/// explicit flags, which come later, override them.
fn merge_config(argv: Vec<OsString>) -> Result<Vec<OsString>> {
    let mut config = None;
    for (i, a) in argv.iter().enumerate() {
        let s = a.to_string_lossy();
        if s == "--config" {
            config = argv.get(i + 1).map(PathBuf::from);
        } else if let Some(p) = s.strip_prefix("--config=") {
            config = Some(PathBuf::from(p));
        }
    }
    let Some(path) = config else {
        return Ok(argv);
    };
    let extra = config_args(&path)?;
    let pos = argv
        .iter()
        .position(|a| SUBCOMMANDS.contains(&a.to_string_lossy().as_ref()))
        .map_or(argv.len(), |p| p + 1);
    let mut merged = argv[..pos].to_vec();
    merged.extend(extra);
    merged.extend_from_slice(&argv[pos..]);
    Ok(merged)
}

pub fn exit_code_for(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        EXIT_USAGE
    } else {
        EXIT_RUNTIME
    }
}

/// Parses `argv` (program name first) and runs the command.
pub fn run(argv: Vec<OsString>) -> Result<u8> {
    let argv = merge_config(argv)?;
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return Ok(code);
        }
    };
    let effective: Vec<String> = argv
        .iter()
        .skip(1)
        .map(|a| a.to_string_lossy().into_owned())
        .collect();
    commands::dispatch(cli, effective)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(std::env::args_os().collect()) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            let code = exit_code_for(&err);
            eprintln!("error: {:#}", err);
            if code == EXIT_USAGE {
                eprintln!("run `fstitch --help` for usage");
            }
            ExitCode::from(code)
        }
    }
}
