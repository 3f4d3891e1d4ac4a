use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nmsleak_cli::config::{ExperimentKind, RunConfig};
use nmsleak_cli::{default_out_dir, experiments, run, CliError, EXIT_CHECKS_FAILED};

/// Timing side-channel experiments on a simulated object detector.
#[derive(Parser)]
#[command(name = "nmsleak", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Spearman correlation of NMS time with candidate count across amplification factors.
    Profile(Common),
    /// Evasion budget against initially detected copies under degraded tiling.
    AmplifySweep(Common),
    /// Fit the neural runtime model on black images and check NMS-time estimates.
    Calibrate(Common),
    /// Timing-guided evasion, paired with the decision-only baseline.
    Evade(Common),
    /// Decision-only evasion baseline alone.
    EvadeBaseline(Common),
    /// Evasion budget across step lengths.
    LambdaSweep(Common),
    /// Timing-only dataset inference on synthetic member and nonmember sets.
    InferDataset(Common),
    /// False-positive bound against target-set size, with a Monte Carlo check.
    FpBoundCurve(Common),
    /// Leakage of constant-time NMS against greedy NMS.
    CountermeasureEval(Common),
    /// Run the detection service, or with --parity the loopback timing campaign.
    Serve(ServeArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed for every random choice in the run.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to $RUN_DIR/<kind>-seed<seed>.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Relative phase-noise level.
    #[arg(long)]
    noise_fraction: Option<f64>,
    /// Absolute phase-noise standard deviation in seconds.
    #[arg(long)]
    sigma: Option<f64>,
    /// Scene or gadget count for the experiment.
    #[arg(long)]
    count: Option<usize>,
    /// Exit with status 4 when a built-in check fails.
    #[arg(long)]
    check: bool,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    common: Common,
    /// Listen address (overrides NMSLEAK_BIND).
    #[arg(long)]
    bind: Option<String>,
    /// Stop after this many seconds.
    #[arg(long)]
    duration: Option<f64>,
    /// Lognormal jitter mean and standard deviation in seconds.
    #[arg(long)]
    jitter: Option<f64>,
    /// Run the loopback parity campaign and write a run directory.
    #[arg(long)]
    parity: bool,
}

fn resolve(kind: ExperimentKind, c: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &c.config {
        Some(path) => {
            let cfg = RunConfig::load(path)?;
            if cfg.kind != kind {
                return Err(CliError::Config(format!(
                    "kind: config file is for {}, subcommand is {kind}",
                    cfg.kind
                )));
            }
            cfg
        }
        None => RunConfig::new(kind, 0),
    };
    if let Some(seed) = c.seed {
        if cfg.detector.weight_seed == nmsleak_cli::config::derived_weight_seed(cfg.seed) {
            cfg.detector.weight_seed = nmsleak_cli::config::derived_weight_seed(seed);
        }
        cfg.seed = seed;
    }
    if let Some(f) = c.noise_fraction {
        cfg.clock.noise_fraction = f;
    }
    if c.sigma.is_some() {
        cfg.clock.sigma = c.sigma;
    }
    if let Some(n) = c.count {
        match kind {
            ExperimentKind::Profile => cfg.profile.scenes = n,
            ExperimentKind::Calibrate => cfg.calibrate.scenes = n,
            ExperimentKind::CountermeasureEval => cfg.countermeasure.scenes = n,
            ExperimentKind::InferDataset => cfg.infer.targets = n,
            ExperimentKind::Serve => cfg.serve.scenes = n,
            ExperimentKind::FpBoundCurve => cfg.fp_bound.mc_trials = n,
            _ => cfg.evade.gadgets = n,
        }
    }
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<i32, CliError> {
    let (kind, common, serve) = match cli.command {
        Command::Profile(c) => (ExperimentKind::Profile, c, None),
        Command::AmplifySweep(c) => (ExperimentKind::AmplifySweep, c, None),
        Command::Calibrate(c) => (ExperimentKind::Calibrate, c, None),
        Command::Evade(c) => (ExperimentKind::Evade, c, None),
        Command::EvadeBaseline(c) => (ExperimentKind::EvadeBaseline, c, None),
        Command::LambdaSweep(c) => (ExperimentKind::LambdaSweep, c, None),
        Command::InferDataset(c) => (ExperimentKind::InferDataset, c, None),
        Command::FpBoundCurve(c) => (ExperimentKind::FpBoundCurve, c, None),
        Command::CountermeasureEval(c) => (ExperimentKind::CountermeasureEval, c, None),
        Command::Serve(s) => (
            ExperimentKind::Serve,
            s.common,
            Some((s.bind, s.duration, s.jitter, s.parity)),
        ),
    };
    let mut cfg = resolve(kind, &common)?;
    if let Some((bind, duration, jitter, parity)) = serve {
        cfg.serve.bind = bind.or(cfg.serve.bind);
        cfg.serve.duration_secs = duration.or(cfg.serve.duration_secs);
        cfg.serve.jitter_secs = jitter.or(cfg.serve.jitter_secs);
        cfg.serve.parity |= parity;
        if !cfg.serve.parity {
            cfg.validate()?;
            experiments::remote::serve_blocking(&cfg, |url| println!("serving POST {url}/detect"))?;
            return Ok(0);
        }
    }
    let out = common.out.clone().unwrap_or_else(|| default_out_dir(&cfg));
    let summary = run(&cfg, &out)?;
    print!(
        "{}",
        std::fs::read_to_string(out.join(nmsleak_cli::output::REPORT_FILE)).unwrap_or_default()
    );
    println!("results in {}", out.display());
    let failed = summary.checks.iter().any(|c| !c.passed);
    Ok(if common.check && failed { EXIT_CHECKS_FAILED } else { 0 })
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
