use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dyadrep::error::Error;
use dyadrep::experiments::{run, write_outcome, Command, ExperimentConfig};

#[derive(Parser)]
#[command(name = "dyadrep", version, about = "Dyadic representation and sparse domination experiments")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON experiment config; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    eta: Option<f64>,
    #[arg(long, global = true)]
    r: Option<u32>,
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Smooth truncation scale.
    #[arg(long, global = true)]
    eps: Option<f64>,
}

#[derive(Subcommand, Clone, Copy)]
enum Cmd {
    /// Martingale split of ⟨T(f,g),h⟩ into Σ¹, Σ², Σ³ and the remainder.
    Decompose,
    /// Shift and paraproduct extraction with reassembly check.
    Extract,
    /// Every extractable coefficient against its divisor.
    CoeffBounds,
    /// Probability that a cube is good, per base level.
    PiGood,
    /// Sparse families, domination ratios and the universal family.
    Sparse,
    /// Empirical norms of random shifts.
    Norms,
    /// sup over truncations against the sparse form.
    Corollary,
}

impl From<Cmd> for Command {
    fn from(c: Cmd) -> Self {
        match c {
            Cmd::Decompose => Command::Decompose,
            Cmd::Extract => Command::Extract,
            Cmd::CoeffBounds => Command::CoeffBounds,
            Cmd::PiGood => Command::PiGood,
            Cmd::Sparse => Command::Sparse,
            Cmd::Norms => Command::Norms,
            Cmd::Corollary => Command::Corollary,
        }
    }
}

fn resolve(c: &Common) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    if let Some(o) = &c.out {
        cfg.output_dir = o.clone();
    }
    if let Some(e) = c.eta {
        cfg.eta = e;
    }
    if let Some(r) = c.r {
        cfg.grid.r = r;
    }
    if let Some(t) = c.trials {
        cfg.trials = t;
    }
    if let Some(e) = c.eps {
        cfg.eps = e;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let cfg = match resolve(&cli.common) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    if let Some(n) = cli.common.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    let cmd = Command::from(cli.command);
    let started = std::time::Instant::now();
    let outcome = match run(cmd, &cfg) {
        Ok(o) => o,
        Err(e @ (Error::Config(_) | Error::Domain(_))) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
        Err(e @ (Error::Tolerance(_) | Error::Normalization { .. })) => {
            eprintln!("gate failed: {e}");
            return ExitCode::from(3);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Err(e) = write_outcome(&cfg.output_dir, cmd, &cfg, &outcome) {
        eprintln!("error: writing reports: {e}");
        return ExitCode::from(1);
    }
    println!("{}", outcome.summary);
    println!(
        "wrote {}/{name}.json, {name}.csv and {name}.config.json in {:.1?}",
        cfg.output_dir.display(),
        started.elapsed(),
        name = cmd.name()
    );
    if outcome.gate_failed {
        eprintln!("gate failed");
        return ExitCode::from(3);
    }
    ExitCode::SUCCESS
}
