//! Timing sources for the detector pipeline.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::noise::NoiseSpec;
use crate::seed::{self, SimRng};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    /// Phase times computed from the cost model plus sampled noise.
    #[default]
    Modeled,
    /// Monotonic clock around each pipeline phase.
    WallClock,
    /// Client-side round-trip time of a remote query.
    RemoteRtt,
}

impl std::fmt::Display for ClockMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ClockMode::Modeled => "modeled",
            ClockMode::WallClock => "wall_clock",
            ClockMode::RemoteRtt => "remote_rtt",
        })
    }
}

/// Additive noise on each pipeline phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct PhaseNoise {
    #[serde(default)]
    pub neural: NoiseSpec,
    #[serde(default)]
    pub nms: NoiseSpec,
}

impl PhaseNoise {
    /// Zero-mean Gaussian with the same `sigma` on both phases.
    pub fn gaussian(sigma: f64) -> Self {
        Self {
            neural: NoiseSpec::gaussian(sigma),
            nms: NoiseSpec::gaussian(sigma),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockSpec {
    #[serde(default)]
    pub mode: ClockMode,
    #[serde(default)]
    pub noise: PhaseNoise,
    /// Measurements per query, aggregated by median.
    #[serde(default = "default_repeats")]
    pub repeats: usize,
    #[serde(default)]
    pub rng_seed: u64,
}

fn default_repeats() -> usize {
    1
}

impl Default for ClockSpec {
    fn default() -> Self {
        Self::modeled(PhaseNoise::default(), 0)
    }
}

impl ClockSpec {
    pub fn modeled(noise: PhaseNoise, rng_seed: u64) -> Self {
        Self {
            mode: ClockMode::Modeled,
            noise,
            repeats: 1,
            rng_seed,
        }
    }

    pub fn noiseless() -> Self {
        Self::default()
    }

    pub fn validate(&self) -> Result<()> {
        if self.repeats == 0 {
            return Err(Error::param("clock.repeats", "must be at least 1"));
        }
        self.noise.neural.validate()?;
        self.noise.nms.validate()
    }
}

/// A clock instance owning its noise generator. One clock serves one serial
/// measurement campaign.
#[derive(Debug, Clone)]
pub struct Clock {
    spec: ClockSpec,
    rng: SimRng,
}

impl Clock {
    pub fn new(spec: ClockSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            rng: seed::rng(spec.rng_seed),
        })
    }

    pub fn spec(&self) -> &ClockSpec {
        &self.spec
    }

    pub fn mode(&self) -> ClockMode {
        self.spec.mode
    }

    pub fn repeats(&self) -> usize {
        self.spec.repeats
    }

    pub fn neural_noise(&mut self) -> f64 {
        self.spec.noise.neural.sample(&mut self.rng)
    }

    pub fn nms_noise(&mut self) -> f64 {
        self.spec.noise.nms.sample(&mut self.rng)
    }

    pub fn sample(&mut self, spec: &NoiseSpec) -> f64 {
        spec.sample(&mut self.rng)
    }

    pub fn rng(&mut self) -> &mut SimRng {
        &mut self.rng
    }
}

/// Blocks until `deadline`: sleeps for the bulk, then spins for the final
/// stretch so the wake-up error stays in the microseconds.
pub fn wait_until(deadline: Instant) {
    const SPIN: Duration = Duration::from_micros(300);
    loop {
        let now = Instant::now();
        if now >= deadline {
            return;
        }
        let left = deadline - now;
        if left > SPIN {
            std::thread::sleep(left - SPIN);
        } else {
            std::hint::spin_loop();
        }
    }
}

pub fn busy_wait(seconds: f64) {
    if seconds > 0.0 && seconds.is_finite() {
        wait_until(Instant::now() + Duration::from_secs_f64(seconds));
    }
}
