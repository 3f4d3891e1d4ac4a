//! Experiment implementations. Each returns a typed result for programmatic
//! use and converts it into an [`Outcome`] for the run directory.

pub mod evasion;
pub mod inference;
pub mod leakage;
pub mod remote;

use nmsleak_core::clock::{ClockSpec, PhaseNoise};
use nmsleak_core::detector::SyntheticDetector;
use nmsleak_core::measurement::LocalDetector;
use nmsleak_core::{seed, stats, Raster};

use crate::config::{ExperimentKind, RunConfig};
use crate::output::Outcome;
use crate::CliError;

pub type Result<T> = std::result::Result<T, CliError>;

/// Runs a batch experiment. `serve` without `parity` is a long-running
/// service and is started by [`crate::run`] instead.
pub fn run_experiment(cfg: &RunConfig) -> Result<Outcome> {
    Ok(match cfg.kind {
        ExperimentKind::Profile => leakage::profile(cfg)?.outcome(),
        ExperimentKind::Calibrate => leakage::calibrate(cfg)?.outcome(),
        ExperimentKind::CountermeasureEval => leakage::countermeasure(cfg)?.outcome(),
        ExperimentKind::Evade => evasion::evade(cfg, true)?.outcome(),
        ExperimentKind::EvadeBaseline => evasion::evade(cfg, false)?.outcome(),
        ExperimentKind::LambdaSweep => evasion::lambda_sweep(cfg)?.outcome(),
        ExperimentKind::AmplifySweep => evasion::amplify_sweep(cfg)?.outcome(),
        ExperimentKind::InferDataset => inference::infer(cfg)?.outcome(),
        ExperimentKind::FpBoundCurve => inference::fp_bound_curve(cfg)?.outcome(),
        ExperimentKind::Serve => remote::parity(cfg)?.outcome(),
    })
}

pub fn detector(cfg: &RunConfig) -> Result<SyntheticDetector> {
    Ok(SyntheticDetector::new(cfg.detector)?)
}

/// Gaussian phase noise: the configured absolute sigma, or the configured
/// fraction of `reference_nms` seconds.
pub fn noise_sigma(cfg: &RunConfig, reference_nms: f64) -> f64 {
    cfg.clock.sigma.unwrap_or(cfg.clock.noise_fraction * reference_nms)
}

pub fn clock_spec(cfg: &RunConfig, sigma: f64, rng_seed: u64) -> ClockSpec {
    ClockSpec {
        mode: cfg.clock.mode,
        noise: PhaseNoise::gaussian(sigma),
        repeats: cfg.clock.repeats,
        rng_seed,
    }
}

/// Mean noiseless modeled NMS time over `images`.
pub fn mean_nms_time(det: &SyntheticDetector, images: &[Raster]) -> Result<f64> {
    let mut local = LocalDetector::new(det, ClockSpec::noiseless())?;
    let mut times = Vec::with_capacity(images.len());
    for img in images {
        times.push(local.observe(img)?.1.nms_time);
    }
    Ok(stats::mean(&times))
}

pub fn stream(cfg: &RunConfig, name: &str) -> u64 {
    seed::substream(cfg.seed, name)
}
