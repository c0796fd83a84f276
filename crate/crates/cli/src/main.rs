use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod diagnostic;
mod output;

use config::RunConfig;
use diagnostic::Diagnostic;
use output::Output;

#[derive(Parser)]
#[command(name = "entroproj", version, about = "Entropic projection under time-indexed constraints")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML or JSON run configuration.
    #[arg(short, long)]
    config: PathBuf,
    /// Overrides `output_dir` from the config.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form Gaussian solution.
    Oracle(RunArgs),
    /// Particle dual solve.
    SolveDual(RunArgs),
    /// Constrained Schrödinger bridge on a finite state space.
    Bridge(RunArgs),
    /// Feynman-Kac potential and gradient.
    Hjb(RunArgs),
    /// Rejection-sampled particle conditioning.
    Condition(RunArgs),
    /// Constraint-relaxation sweep.
    Stability(RunArgs),
    /// Multiplier stability under perturbation of the data.
    WeakStability(RunArgs),
    /// Acceptance suite.
    Verify {
        /// Deterministic subset only.
        #[arg(long)]
        quick: bool,
        #[arg(short, long)]
        output_dir: Option<PathBuf>,
    },
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Oracle(_) => "oracle",
        Command::SolveDual(_) => "solve-dual",
        Command::Bridge(_) => "bridge",
        Command::Hjb(_) => "hjb",
        Command::Condition(_) => "condition",
        Command::Stability(_) => "stability",
        Command::WeakStability(_) => "weak-stability",
        Command::Verify { .. } => "verify",
    }
}

fn run(cli: Cli) -> Result<i32, Diagnostic> {
    let name = command_name(&cli.command);
    if let Command::Verify { quick, output_dir } = cli.command {
        let mut out = Output::new(output_dir, name, 0, serde_json::json!({ "quick": quick }))?;
        let done = commands::verify(quick, &mut out)?;
        out.finish(done.status)?;
        return Ok(done.exit_code);
    }
    let args = match &cli.command {
        Command::Oracle(a)
        | Command::SolveDual(a)
        | Command::Bridge(a)
        | Command::Hjb(a)
        | Command::Condition(a)
        | Command::Stability(a)
        | Command::WeakStability(a) => a,
        Command::Verify { .. } => unreachable!(),
    };
    let cfg = RunConfig::load(&args.config)?;
    let dir = args
        .output_dir
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Diagnostic::validation("no output directory; pass --output-dir or set output_dir").with_field("output_dir"))?;
    let snapshot = serde_json::to_value(&cfg).map_err(|e| Diagnostic::failure("serialization", e.to_string()))?;
    let mut out = Output::new(Some(dir), name, cfg.seed, snapshot)?;
    let done = match cli.command {
        Command::Oracle(_) => commands::oracle(&cfg, &mut out),
        Command::SolveDual(_) => commands::solve_dual(&cfg, &mut out),
        Command::Bridge(_) => commands::bridge(&cfg, &mut out),
        Command::Hjb(_) => commands::hjb(&cfg, &mut out),
        Command::Condition(_) => commands::condition(&cfg, &mut out),
        Command::Stability(_) => commands::stability(&cfg, &mut out),
        Command::WeakStability(_) => commands::weak_stability(&cfg, &mut out),
        Command::Verify { .. } => unreachable!(),
    };
    let done = match done {
        Ok(d) => d,
        Err(d) => {
            if let Some(dir) = out.dir() {
                let _ = std::fs::write(dir.join("diagnostic.json"), d.to_json() + "\n");
            }
            return Err(d);
        }
    };
    out.finish(done.status)?;
    Ok(done.exit_code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(code) => code,
        Err(d) => {
            eprintln!("{}", d.to_json());
            d.exit_code
        }
    };
    ExitCode::from(code as u8)
}
