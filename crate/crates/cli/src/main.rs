//! `clicksense`: end-to-end command-line pipeline.

mod commands;
mod config;

use std::ffi::OsString;
use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Failure carried to the top level and printed as one JSON line.
#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    pub path: Option<PathBuf>,
}

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: "config",
            message: message.into(),
            path: None,
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            kind: "io",
            message: format!("{}: {e}", path.display()),
            path: Some(path.to_path_buf()),
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: "usage",
            message: message.into(),
            path: None,
        }
    }

    fn exit_code(&self) -> u8 {
        match self.kind {
            "usage" | "config" => 2,
            _ => 1,
        }
    }

    pub fn json_line(&self) -> String {
        serde_json::json!({ "error": { "kind": self.kind, "message": self.message, "path": self.path } }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<clicksense::Error> for CliError {
    fn from(e: clicksense::Error) -> Self {
        use clicksense::Error as E;
        let (kind, path) = match &e {
            E::Io { path, .. } => ("io", Some(path.clone())),
            E::Wav { path, .. } | E::Format { path, .. } => ("format", Some(path.clone())),
            E::InvalidParameter(_) => ("invalid_parameter", None),
            E::Diverged { .. } => ("diverged", None),
            _ => ("pipeline", None),
        };
        Self {
            kind,
            message: e.to_string(),
            path,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "clicksense", version, about = "Teeth-click detection pipeline")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in base configuration (default, tiny).
    #[arg(long, global = true, default_value = "default")]
    pub preset: String,
    /// Record that a bit-reproducible run was requested. Every computation
    /// here runs sequentially in a fixed order, so results are reproducible
    /// with or without it.
    #[arg(long, global = true)]
    pub deterministic: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct CorpusArg {
    /// Corpus manifest, or the directory containing manifest.jsonl.
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        participants: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cut a continuous recording into labeled one-second segments.
    Annotate {
        #[arg(long)]
        input: PathBuf,
        /// pattern1, pattern2 or no_pattern:<kind>.
        #[arg(long)]
        label: String,
        #[arg(long)]
        participant: String,
        #[arg(long, default_value = "session")]
        session: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write feature matrices for every segment of a corpus.
    Featurize {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write one noisy evaluation corpus per configured SNR level.
    Augment {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one rotation fold; writes the checkpoint and a JSON history.
    Train {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// History path (default: checkpoint path with .history.json).
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Score a checkpoint on a fold's held-out participants.
    Eval {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        fold: usize,
    },
    /// Experiment grids: rotation, robustness, size, features, axis or all.
    Sweep {
        #[command(flatten)]
        corpus: CorpusArg,
        #[arg(long, default_value = "robustness")]
        kind: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter count, multiply-accumulates and inference latency.
    Bench {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sliding-window detection over a recording.
    Stream {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Splits `--section.key value` (or `--section.key=value`) overrides from
/// the arguments clap understands.
pub fn split_overrides(args: Vec<OsString>) -> Result<(Vec<OsString>, Vec<(String, String)>), CliError> {
    let mut rest = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let key = a.to_str().and_then(|s| s.strip_prefix("--")).filter(|k| k.contains('.'));
        match key {
            Some(k) => {
                let (k, v) = match k.split_once('=') {
                    Some((k, v)) => (k.to_string(), v.to_string()),
                    None => {
                        let v = it.next().ok_or_else(|| CliError::usage(format!("--{k} needs a value")))?;
                        let v = v
                            .into_string()
                            .map_err(|_| CliError::usage(format!("--{k}: value is not UTF-8")))?;
                        (k.to_string(), v)
                    }
                };
                overrides.push((k, v));
            }
            None => rest.push(a),
        }
    }
    Ok((rest, overrides))
}

fn run(args: Vec<OsString>) -> Result<(), CliError> {
    let (args, overrides) = split_overrides(args)?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e)
            if matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            ) =>
        {
            print!("{e}");
            return Ok(());
        }
        Err(e) => return Err(CliError::usage(e.to_string().trim().to_string())),
    };
    let env_seed = std::env::var(config::SEED_ENV).ok();
    let cfg = config::load(&cli.preset, cli.config.as_deref(), &overrides, env_seed.as_deref())?;
    commands::dispatch(&cli, cfg)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(std::env::args_os().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.json_line());
            ExitCode::from(e.exit_code())
        }
    }
}
