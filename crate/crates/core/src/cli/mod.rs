//! `ddrl` command line: sft, rl, eval, verify and serve.
//!
//! Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime
//! failure, 3 a verification check failed.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod metrics;

use std::ffi::OsString;
use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::error::Error;
use crate::reward_service::{serve, Registry, ServiceConfig};
pub use checkpoint::Checkpoint;
pub use commands::*;
pub use config::{env_overrides, ConfigErrors, RunConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "ddrl", version, about = "Data-regularized diffusion RL on synthetic tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set rl.beta=2`. Repeatable; wins over
    /// the file and `DDRL__*` environment variables.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Diffusion-loss pretraining on task data.
    Sft(ConfigArgs),
    /// RL fine-tuning starting from `init.checkpoint`.
    Rl {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from an RL checkpoint written by the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Add per-iteration wallclock to the metrics (breaks byte-identical reruns).
        #[arg(long)]
        record_wallclock: bool,
    },
    /// Sample a checkpoint and compare with the tilted target.
    Eval {
        checkpoint: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run a property suite and report each check.
    Verify {
        #[arg(value_enum)]
        suite: VerifySuite,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the reward service until a shutdown message or SIGINT/SIGTERM.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        #[arg(long, default_value_t = ServiceConfig::default().workers)]
        workers: usize,
        #[arg(long, default_value_t = ServiceConfig::default().batch_window)]
        batch_window: usize,
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Argument(_) => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn parse_sets(sets: &[String]) -> Result<Vec<(String, String)>, ConfigErrors> {
    let mut out = Vec::new();
    let mut errors = Vec::new();
    for s in sets {
        match s.split_once('=') {
            Some((k, v)) => out.push((k.trim().to_string(), v.to_string())),
            None => errors.push(Error::config("--set", format!("`{s}` is not KEY=VALUE"))),
        }
    }
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(ConfigErrors(errors))
    }
}

/// Loads the run configuration: file < `DDRL__*` environment < `--set`.
pub fn load_config(args: &ConfigArgs, env: impl Iterator<Item = (String, String)>) -> Result<RunConfig, ConfigErrors> {
    let sets = parse_sets(&args.sets)?;
    RunConfig::load(args.config.as_deref(), &env_overrides(env), &sets)
}

fn report_config_errors(e: &ConfigErrors) -> i32 {
    eprintln!("configuration rejected ({} problem(s)):", e.0.len());
    for p in &e.0 {
        eprintln!("  - {p}");
    }
    EXIT_VALIDATION
}

fn run_serve(bind: &str, workers: usize, batch_window: usize, snapshot: Option<PathBuf>) -> i32 {
    let addr: SocketAddr = match bind.parse() {
        Ok(a) => a,
        Err(e) => {
            eprintln!("invalid --bind `{bind}`: {e}");
            return EXIT_VALIDATION;
        }
    };
    let cfg = ServiceConfig {
        workers,
        batch_window,
        snapshot,
        ..ServiceConfig::default()
    };
    if let Err(e) = cfg.validate() {
        eprintln!("{e}");
        return EXIT_VALIDATION;
    }
    let handle = match serve(addr, Registry::builtin(), &cfg) {
        Ok(h) => h,
        Err(e) => {
            eprintln!("cannot start service on --bind {bind}: {e}");
            return EXIT_RUNTIME;
        }
    };
    let trigger = handle.shutdown_trigger();
    if let Err(e) = ctrlc::set_handler(move || trigger.trigger()) {
        log::warn!("signal handler not installed: {e}");
    }
    println!("reward service listening on {}", handle.addr());
    handle.wait_for_shutdown();
    match handle.shutdown() {
        Ok(()) => {
            println!("reward service stopped");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("shutdown: {e}");
            EXIT_RUNTIME
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    execute(cli, std::env::vars())
}

pub fn execute(cli: Cli, env: impl Iterator<Item = (String, String)>) -> i32 {
    let outcome = match cli.command {
        Command::Sft(args) => match load_config(&args, env) {
            Err(e) => return report_config_errors(&e),
            Ok(cfg) => cmd_sft(&cfg).map(|o| {
                println!("wrote {} and {}", o.checkpoint.display(), o.metrics.display());
                if let Some(l) = o.final_loss {
                    println!("final loss {l:.6}");
                }
            }),
        },
        Command::Rl {
            config,
            resume,
            record_wallclock,
        } => match load_config(&config, env) {
            Err(e) => return report_config_errors(&e),
            Ok(cfg) => cmd_rl(&cfg, resume.as_deref(), record_wallclock).map(|o| {
                println!(
                    "{} iterations; wrote {}, {} and {}",
                    o.iterations,
                    o.checkpoint.display(),
                    o.ema_checkpoint.display(),
                    o.metrics.display()
                );
            }),
        },
        Command::Eval { checkpoint, config } => match load_config(&config, env) {
            Err(e) => return report_config_errors(&e),
            Ok(cfg) => cmd_eval(&cfg, &checkpoint).map(|r| {
                for c in &r.conditions {
                    let kl = c.kl_to_target.map_or("n/a".to_string(), |k| format!("{k:.5}"));
                    println!(
                        "condition {}: mean {:?} variance {:?} reward {:.4} KL-to-target {kl}",
                        c.condition, c.mean, c.variance, c.mean_reward
                    );
                }
            }),
        },
        Command::Verify { suite, seed } => match cmd_verify(suite, seed) {
            Ok(suites) => {
                let mut ok = true;
                for s in &suites {
                    println!("[{}]", s.name);
                    for c in &s.checks {
                        println!("  {c}");
                    }
                    ok &= s.passed();
                }
                return if ok { EXIT_OK } else { EXIT_VERIFY };
            }
            Err(e) => Err(e),
        },
        Command::Serve {
            bind,
            workers,
            batch_window,
            snapshot,
        } => return run_serve(&bind, workers, batch_window, snapshot),
    };
    match outcome {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
