mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use commands::{Command, Run};
use config::Config;
use error::CliError;

/// Train, distill, evaluate and profile encoder-decoder and decoder-only models.
#[derive(Parser, Debug)]
#[command(name = "encdec", version)]
struct Args {
    #[arg(value_enum)]
    command: Command,
    /// Run-config file of `section.key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key (`key=value`); a key may be shortened to a unique last segment.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory for artifacts and the manifest.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn run(args: Args) -> Result<(), CliError> {
    let cfg = Config::load(args.config.as_deref(), &args.set)?;
    let mut run = Run::new(args.command, cfg, args.out)?;
    let res = run.execute();
    if res.is_err() && run.out.is_dir() {
        let _ = run.write_manifest("failed");
    }
    res
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::Usage(first.to_string()).line());
            return ExitCode::from(2);
        }
    };
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
