use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use unitlens::pipeline::{Profile, Run, RunConfig};
use unitlens::{Error, Result};

/// Train, ablate, record, embed and score a small MNIST-family CNN.
///
/// Exit codes: 0 success, 2 usage or invalid input, 3 data or I/O,
/// 4 numeric failure, 5 missing upstream artifact or provenance mismatch.
#[derive(Parser)]
#[command(name = "unitlens", version)]
struct Cli {
    /// JSON run configuration; may be partial, missing fields come from the profile.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory.
    #[arg(long, global = true, env = "UNITLENS_OUT", default_value = "unitlens-out")]
    out: PathBuf,

    /// Master seed; every stage seed derives from it.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Profile supplying defaults: desk (subsampled, 5 epochs) or full.
    #[arg(long, global = true)]
    profile: Option<Profile>,

    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Directory holding the IDX files; overrides `data.dir`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,

    /// Suppress progress messages.
    #[arg(long, short, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the effective configuration.
    Config,
    /// Train the network; writes a checkpoint and the per-epoch history.
    Train,
    /// Evaluate the checkpoint on the test set.
    Eval,
    /// Random-fraction ablation campaigns per layer.
    Ablate,
    /// Single-unit ablation sweep.
    Sweep,
    /// Record the activation matrix.
    Capture,
    /// Horizontal, vertical and ablated-model embeddings.
    Embed,
    /// AS, AES and neighborhood-hit scores.
    Metrics,
    /// Figures, stacked-bar table and the JSON report.
    Report,
    /// Every stage in order.
    Pipeline,
}

fn config(cli: &Cli) -> Result<(RunConfig, Option<String>)> {
    let (mut cfg, text) = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Usage(format!("cannot read config {}: {e}", p.display())))?;
            (RunConfig::from_json(&text, cli.profile)?, Some(text))
        }
        None => (RunConfig::for_profile(cli.profile.unwrap_or(Profile::Desk)), None),
    };
    if let Some(s) = cli.seed {
        cfg.master_seed = s;
    }
    if let Some(d) = &cli.data {
        cfg.data.dir = d.clone();
    }
    cfg.validate()?;
    Ok((cfg, text))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(Error::Usage("--workers must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Usage(format!("cannot start {n} workers: {e}")))?;
    }
    let (cfg, text) = config(&cli)?;
    if let Command::Config = cli.command {
        print!("{}", cfg.to_json()?);
        return Ok(());
    }
    let mut run = Run::new(cfg, &cli.out, text)?;
    run.verbose = !cli.quiet;
    let stage = match cli.command {
        Command::Config => unreachable!(),
        Command::Pipeline => {
            run.pipeline()?;
            return Ok(());
        }
        Command::Train => "train",
        Command::Eval => "eval",
        Command::Ablate => "ablate",
        Command::Sweep => "sweep",
        Command::Capture => "capture",
        Command::Embed => "embed",
        Command::Metrics => "metrics",
        Command::Report => "report",
    };
    let m = run.run_stage(stage)?;
    if !cli.quiet {
        for f in &m.outputs {
            eprintln!("wrote {} ({})", f.path, &f.sha256[..12]);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
