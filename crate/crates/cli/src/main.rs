//! dnfuse command-line entry point.
//!
//! One JSON config drives six subcommands: gen-data, train, fuse, verify,
//! eval, bench. Every field can be overridden with `--set a.b=v`. Seeds
//! come from the config only; nothing reads the wall clock for randomness.
//!
//! Exit codes: 0 success or pass, 1 verification or numeric failure,
//! 2 usage or IO error.

mod artifacts;
mod commands;
mod config;

use std::env;
use std::process::ExitCode;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    GenData,
    Train,
    Fuse,
    Verify,
    Eval,
    Bench,
}

impl Command {
    fn parse(name: &str) -> Option<Self> {
        match name {
            "gen-data" => Some(Command::GenData),
            "train" => Some(Command::Train),
            "fuse" => Some(Command::Fuse),
            "verify" => Some(Command::Verify),
            "eval" => Some(Command::Eval),
            "bench" => Some(Command::Bench),
            _ => None,
        }
    }
}

struct Invocation {
    command: Command,
    config_file: Option<String>,
    sets: Vec<(String, String)>,
}

fn usage() -> &'static str {
    "\
dnfuse - train, fuse, and evaluate per-layer feature denoisers

USAGE:
  dnfuse <SUBCOMMAND> [--config PATH] [--set KEY=VALUE]...

SUBCOMMANDS:
  gen-data   Generate the synthetic retrieval benchmark and the frozen backbone
  train      Train one linear denoiser per backbone layer
  fuse       Fold trained denoisers into the backbone weights
  verify     Check fused output against the explicit denoise pipeline
  eval       Report mAP / Rank-1 / CMC for baseline, explicit, and fused
  bench      Eval plus parameter counts and median forward latency

OPTIONS:
  --config PATH      JSON config file; fields overlay built-in defaults
  --set KEY=VALUE    Override one config field by dotted key, repeatable
                     (e.g. --set train.epochs=100 --set fusion.z_policy=zero)
  -h, --help         Print this help

ENVIRONMENT:
  DNF_THREADS        Cap on worker threads (positive integer)

Exit codes: 0 success/pass, 1 verification failure, 2 usage or IO error.
"
}

fn parse_args(args: &[String]) -> Result<Invocation, String> {
    let mut iter = args.iter();
    let Some(first) = iter.next() else {
        return Err("missing subcommand".into());
    };
    if first == "-h" || first == "--help" {
        print!("{}", usage());
        std::process::exit(0);
    }
    let Some(command) = Command::parse(first) else {
        return Err(format!("unknown subcommand `{first}`"));
    };

    let mut config_file = None;
    let mut sets = Vec::new();
    while let Some(arg) = iter.next() {
        match arg.as_str() {
            "-h" | "--help" => {
                print!("{}", usage());
                std::process::exit(0);
            }
            "--config" => {
                let Some(path) = iter.next() else {
                    return Err("--config needs a file path".into());
                };
                config_file = Some(path.clone());
            }
            "--set" => {
                let Some(pair) = iter.next() else {
                    return Err("--set needs KEY=VALUE".into());
                };
                let Some((key, value)) = pair.split_once('=') else {
                    return Err(format!("--set expects KEY=VALUE, got `{pair}`"));
                };
                if key.is_empty() {
                    return Err(format!("--set expects KEY=VALUE, got `{pair}`"));
                }
                sets.push((key.to_string(), value.to_string()));
            }
            other => return Err(format!("unexpected argument `{other}`")),
        }
    }
    Ok(Invocation { command, config_file, sets })
}

/// Reads DNF_THREADS if present. The engine is single-threaded today, so
/// any valid cap is honored trivially, but garbage values are still
/// rejected so typos do not pass silently.
fn check_thread_cap() -> Result<(), String> {
    match env::var("DNF_THREADS") {
        Ok(raw) => match raw.parse::<usize>() {
            Ok(n) if n >= 1 => Ok(()),
            _ => Err(format!("DNF_THREADS must be a positive integer, got `{raw}`")),
        },
        Err(env::VarError::NotPresent) => Ok(()),
        Err(e) => Err(format!("DNF_THREADS is not valid unicode: {e}")),
    }
}

fn main() -> ExitCode {
    let args: Vec<String> = env::args().skip(1).collect();
    let invocation = match parse_args(&args) {
        Ok(inv) => inv,
        Err(msg) => {
            eprintln!("error: {msg}");
            eprint!("{}", usage());
            return ExitCode::from(2);
        }
    };
    if let Err(msg) = check_thread_cap() {
        eprintln!("error: {msg}");
        return ExitCode::from(2);
    }
    let cfg = match config::resolve(invocation.config_file.as_deref(), &invocation.sets) {
        Ok(cfg) => cfg,
        Err(msg) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
    };

    let outcome = match invocation.command {
        Command::GenData => commands::cmd_gen_data(&cfg),
        Command::Train => commands::cmd_train(&cfg),
        Command::Fuse => commands::cmd_fuse(&cfg),
        Command::Verify => commands::cmd_verify(&cfg),
        Command::Eval => commands::cmd_eval(&cfg),
        Command::Bench => commands::cmd_bench(&cfg),
    };
    if let Some(msg) = &outcome.message {
        eprintln!("error: {msg}");
    }
    ExitCode::from(outcome.code as u8)
}
