use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fmdlab::{execute, Command, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fmdlab", version, about = "Fractional maximal distribution experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Every configured stage: solve, operators, distributions, norms, scans.
    Run(Common),
    /// Solve the configured problem.
    Solve(Common),
    /// Fractional maximal functions of the input field or of the solution functionals.
    Maximal(Common),
    /// Norms of the maximal functions, and norm comparisons for a solved problem.
    Norms(Common),
    /// Ingredient checks and good-λ scans.
    Verify(Common),
    /// Merge JSON reports into one summary table.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// TOML config, or a run manifest to re-run.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (overrides `output.dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run seed (overrides `seed`).
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long)]
    threads: Option<usize>,
}

fn main() -> ExitCode {
    match real_main() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main() -> Result<ExitCode> {
    let cli = Cli::parse();
    let (cmd, args) = match cli.cmd {
        Cmd::Run(a) => (Command::Run, a),
        Cmd::Solve(a) => (Command::Solve, a),
        Cmd::Maximal(a) => (Command::Maximal, a),
        Cmd::Norms(a) => (Command::Norms, a),
        Cmd::Verify(a) => (Command::Verify, a),
        Cmd::Report(a) => (Command::Report, a),
    };
    if let Some(k) = args.threads {
        rayon::ThreadPoolBuilder::new().num_threads(k).build_global().context("configuring the thread pool")?;
    }
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        let old = cfg.seed;
        cfg.seed = s;
        if let Some(d) = cfg.problem.as_mut().and_then(|p| p.draw.as_mut()) {
            if d.seed == Some(old) {
                d.seed = None;
            }
        }
        if let Some(sc) = cfg.scan.as_mut() {
            if sc.ball_seed == Some(old) {
                sc.ball_seed = None;
            }
        }
    }
    if let Some(o) = args.out {
        cfg.output.dir = o;
    }
    let cfg = cfg.resolve()?;
    let dir = cfg.output.dir.clone();
    let (manifest, failure) = execute(cmd, cfg)?;
    let manifest_path = dir.join(fmdlab::run::manifest_name(cmd));
    if let Some(e) = failure {
        eprintln!("error: {e:#}");
        eprintln!("manifest: {}", manifest_path.display());
        return Ok(ExitCode::from(1));
    }
    println!("{} files written to {} (manifest {})", manifest.files.len(), dir.display(), manifest_path.display());
    Ok(ExitCode::SUCCESS)
}
