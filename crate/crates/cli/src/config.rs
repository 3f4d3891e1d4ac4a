//! Run configuration: a TOML file with per-experiment sections, every field
//! defaulted.

use std::path::{Path, PathBuf};

use nmsleak_core::clock::ClockMode;
use nmsleak_core::detector::DetectorConfig;
use nmsleak_core::evasion::EvasionConfig;
use nmsleak_core::seed;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    Profile,
    AmplifySweep,
    Calibrate,
    Evade,
    EvadeBaseline,
    LambdaSweep,
    InferDataset,
    FpBoundCurve,
    CountermeasureEval,
    Serve,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 10] = [
        ExperimentKind::Profile,
        ExperimentKind::AmplifySweep,
        ExperimentKind::Calibrate,
        ExperimentKind::Evade,
        ExperimentKind::EvadeBaseline,
        ExperimentKind::LambdaSweep,
        ExperimentKind::InferDataset,
        ExperimentKind::FpBoundCurve,
        ExperimentKind::CountermeasureEval,
        ExperimentKind::Serve,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Profile => "profile",
            ExperimentKind::AmplifySweep => "amplify-sweep",
            ExperimentKind::Calibrate => "calibrate",
            ExperimentKind::Evade => "evade",
            ExperimentKind::EvadeBaseline => "evade-baseline",
            ExperimentKind::LambdaSweep => "lambda-sweep",
            ExperimentKind::InferDataset => "infer-dataset",
            ExperimentKind::FpBoundCurve => "fp-bound-curve",
            ExperimentKind::CountermeasureEval => "countermeasure-eval",
            ExperimentKind::Serve => "serve",
        }
    }
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Timing noise for local experiments. The Gaussian phase noise defaults to
/// `noise_fraction` times a reference mean NMS time chosen by each
/// experiment; `sigma` sets it in seconds instead.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClockConfig {
    pub mode: ClockMode,
    pub noise_fraction: f64,
    pub sigma: Option<f64>,
    pub repeats: usize,
}

impl Default for ClockConfig {
    fn default() -> Self {
        Self {
            mode: ClockMode::Modeled,
            noise_fraction: 0.05,
            sigma: None,
            repeats: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProfileParams {
    pub scenes: usize,
    pub ks: Vec<usize>,
}

impl Default for ProfileParams {
    fn default() -> Self {
        Self {
            scenes: 300,
            ks: vec![1, 3, 7],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrateParams {
    /// Scenes on which estimated and true NMS times are compared.
    pub scenes: usize,
}

impl Default for CalibrateParams {
    fn default() -> Self {
        Self { scenes: 300 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvadeParams {
    pub gadgets: usize,
    pub attack: EvasionConfig,
    /// Write one trace row per query.
    pub trace: bool,
}

impl Default for EvadeParams {
    fn default() -> Self {
        Self {
            gadgets: 30,
            attack: EvasionConfig::default(),
            trace: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LambdaSweepParams {
    pub lambdas: Vec<f64>,
}

impl Default for LambdaSweepParams {
    fn default() -> Self {
        Self {
            lambdas: vec![0.25, 0.5, 1.0, 2.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AmplifySweepParams {
    pub degradations: Vec<f64>,
    /// Plant every sweep gadget at `gadget_score`, so the copy count follows
    /// the degradation rather than each gadget's confidence. When false the
    /// evasion gadget range is used.
    pub fixed_score: bool,
    pub gadget_score: f64,
}

impl Default for AmplifySweepParams {
    fn default() -> Self {
        Self {
            degradations: vec![0.4, 0.7, 1.0],
            fixed_score: true,
            gadget_score: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferParams {
    pub members: usize,
    pub nonmembers: usize,
    /// Size of each target set; one is drawn from each population.
    pub targets: usize,
    /// Fraction of heavy (high-confidence, many-box) scenes per population.
    pub member_heavy_fraction: f64,
    pub nonmember_heavy_fraction: f64,
    pub k: usize,
    /// Indicator threshold in seconds; the histogram valley when unset.
    pub tau: Option<f64>,
    pub bins: usize,
}

impl Default for InferParams {
    fn default() -> Self {
        Self {
            members: 2000,
            nonmembers: 2000,
            targets: 500,
            member_heavy_fraction: 0.068,
            nonmember_heavy_fraction: 0.029,
            k: 5,
            tau: None,
            bins: 40,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FpBoundParams {
    pub mu_m: f64,
    pub mu_nonm: f64,
    pub n_member: usize,
    pub n_nonmember: usize,
    pub target_min: usize,
    pub target_max: usize,
    pub target_step: usize,
    pub mc_trials: usize,
    pub mc_target: usize,
}

impl Default for FpBoundParams {
    fn default() -> Self {
        Self {
            mu_m: 0.068,
            mu_nonm: 0.029,
            n_member: 2000,
            n_nonmember: 2000,
            target_min: 50,
            target_max: 2000,
            target_step: 50,
            mc_trials: 10_000,
            mc_target: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CountermeasureParams {
    pub scenes: usize,
    /// Padded box capacity of constant-time NMS.
    pub capacity: usize,
}

impl Default for CountermeasureParams {
    fn default() -> Self {
        Self {
            scenes: 500,
            capacity: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeParams {
    /// Listen address; `NMSLEAK_BIND` or the built-in default when unset.
    pub bind: Option<String>,
    pub workers: usize,
    /// Lognormal server-side jitter with mean and standard deviation equal
    /// to this fraction of the mean jitter-free round-trip time.
    pub jitter_fraction: f64,
    /// Long-running mode: lognormal jitter with this mean and standard
    /// deviation in seconds.
    pub jitter_secs: Option<f64>,
    /// Run the loopback parity campaign and exit instead of serving.
    pub parity: bool,
    pub scenes: usize,
    pub k: usize,
    pub repeats: usize,
    /// Queries used to estimate the mean round-trip time.
    pub pilot_queries: usize,
    /// Stop serving after this many seconds; serve until killed when unset.
    pub duration_secs: Option<f64>,
}

impl Default for ServeParams {
    fn default() -> Self {
        Self {
            bind: None,
            workers: 1,
            jitter_fraction: 0.2,
            jitter_secs: None,
            parity: false,
            scenes: 300,
            k: 3,
            repeats: 5,
            pilot_queries: 30,
            duration_secs: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    /// TOML file holding a `DetectorConfig`; replaces `[detector]`.
    #[serde(default)]
    pub detector_config: Option<PathBuf>,
    #[serde(default)]
    pub detector: DetectorConfig,
    #[serde(default)]
    pub clock: ClockConfig,
    #[serde(default)]
    pub profile: ProfileParams,
    #[serde(default)]
    pub calibrate: CalibrateParams,
    #[serde(default)]
    pub evade: EvadeParams,
    #[serde(default)]
    pub lambda_sweep: LambdaSweepParams,
    #[serde(default)]
    pub amplify_sweep: AmplifySweepParams,
    #[serde(default)]
    pub infer: InferParams,
    #[serde(default)]
    pub fp_bound: FpBoundParams,
    #[serde(default)]
    pub countermeasure: CountermeasureParams,
    #[serde(default)]
    pub serve: ServeParams,
}

impl RunConfig {
    /// Defaults for `kind`, with detector weights derived from `seed`.
    pub fn new(kind: ExperimentKind, seed: u64) -> Self {
        Self {
            kind,
            seed,
            detector_config: None,
            detector: DetectorConfig {
                weight_seed: derived_weight_seed(seed),
                ..DetectorConfig::default()
            },
            clock: ClockConfig::default(),
            profile: ProfileParams::default(),
            calibrate: CalibrateParams::default(),
            evade: EvadeParams::default(),
            lambda_sweep: LambdaSweepParams::default(),
            amplify_sweep: AmplifySweepParams::default(),
            infer: InferParams::default(),
            fp_bound: FpBoundParams::default(),
            countermeasure: CountermeasureParams::default(),
            serve: ServeParams::default(),
        }
    }

    /// Parses a config file. Detector weights come from `[detector]` or the
    /// detector file when they set `weight_seed`, else from the master seed.
    /// Relative detector paths resolve against the config file's directory.
    pub fn from_toml(text: &str, base: Option<&Path>) -> Result<Self, CliError> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        let explicit_weights = table.get("detector").and_then(|d| d.get("weight_seed")).is_some();
        let mut cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        if !explicit_weights {
            cfg.detector.weight_seed = derived_weight_seed(cfg.seed);
        }
        if let Some(path) = cfg.detector_config.take() {
            let path = match base {
                Some(dir) if path.is_relative() => dir.join(path),
                _ => path,
            };
            let text = std::fs::read_to_string(&path)
                .map_err(|e| CliError::Config(format!("detector_config {}: {e}", path.display())))?;
            let det: toml::Table = text
                .parse()
                .map_err(|e: toml::de::Error| CliError::Config(format!("detector_config: {e}")))?;
            let explicit = det.contains_key("weight_seed");
            cfg.detector = det
                .try_into()
                .map_err(|e: toml::de::Error| CliError::Config(format!("detector_config: {e}")))?;
            if !explicit {
                cfg.detector.weight_seed = derived_weight_seed(cfg.seed);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent())
    }

    /// The fully resolved configuration, re-loadable with [`Self::from_toml`].
    /// TOML integers are signed, so seeds above `i64::MAX` are rejected.
    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot write config: {e}")))
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |field: &str, reason: &str| Err(CliError::Config(format!("{field}: {reason}")));
        self.detector
            .validate()
            .map_err(|e| CliError::Config(format!("detector: {e}")))?;
        if !(self.clock.noise_fraction >= 0.0 && self.clock.noise_fraction.is_finite()) {
            return bad("clock.noise_fraction", "must be a non-negative number");
        }
        if self.clock.sigma.is_some_and(|s| !(s >= 0.0 && s.is_finite())) {
            return bad("clock.sigma", "must be a non-negative number");
        }
        if self.clock.repeats == 0 {
            return bad("clock.repeats", "must be at least 1");
        }
        if self.clock.mode == ClockMode::RemoteRtt {
            return bad("clock.mode", "remote timing is selected with the serve experiment");
        }
        match self.kind {
            ExperimentKind::Profile => {
                if self.profile.scenes < 3 {
                    return bad("profile.scenes", "need at least 3 scenes");
                }
                if self.profile.ks.is_empty() || self.profile.ks.contains(&0) {
                    return bad("profile.ks", "need positive amplification factors");
                }
            }
            ExperimentKind::Calibrate if self.calibrate.scenes < 3 => {
                return bad("calibrate.scenes", "need at least 3 scenes");
            }
            ExperimentKind::Evade
            | ExperimentKind::EvadeBaseline
            | ExperimentKind::LambdaSweep
            | ExperimentKind::AmplifySweep => {
                if self.evade.gadgets == 0 {
                    return bad("evade.gadgets", "must be positive");
                }
                self.evade
                    .attack
                    .validate()
                    .map_err(|e| CliError::Config(format!("evade.attack: {e}")))?;
                if self.kind == ExperimentKind::LambdaSweep
                    && (self.lambda_sweep.lambdas.is_empty()
                        || self.lambda_sweep.lambdas.iter().any(|l| l.is_nan() || *l <= 0.0))
                {
                    return bad("lambda_sweep.lambdas", "need positive step lengths");
                }
                if self.kind == ExperimentKind::AmplifySweep
                    && (self.amplify_sweep.degradations.is_empty()
                        || self.amplify_sweep.degradations.iter().any(|d| !(0.0..=1.0).contains(d)))
                {
                    return bad("amplify_sweep.degradations", "need values in [0, 1]");
                }
                if self.kind == ExperimentKind::AmplifySweep && !(0.0..1.0).contains(&self.amplify_sweep.gadget_score) {
                    return bad("amplify_sweep.gadget_score", "must lie in [0, 1)");
                }
            }
            ExperimentKind::InferDataset => {
                let p = &self.infer;
                if p.members == 0 || p.nonmembers == 0 || p.targets == 0 {
                    return bad("infer", "set sizes must be positive");
                }
                for (field, f) in [
                    ("infer.member_heavy_fraction", p.member_heavy_fraction),
                    ("infer.nonmember_heavy_fraction", p.nonmember_heavy_fraction),
                ] {
                    if !(0.0..=1.0).contains(&f) {
                        return bad(field, "must lie in [0, 1]");
                    }
                }
                if p.k == 0 {
                    return bad("infer.k", "must be positive");
                }
                if p.tau.is_some_and(|t| t.is_nan() || t <= 0.0) {
                    return bad("infer.tau", "must be positive");
                }
                if p.bins < 3 {
                    return bad("infer.bins", "need at least 3 bins");
                }
            }
            ExperimentKind::FpBoundCurve => {
                let p = &self.fp_bound;
                if p.target_min == 0 || p.target_step == 0 || p.target_max < p.target_min {
                    return bad(
                        "fp_bound.target_min",
                        "need 1 <= target_min <= target_max and a positive step",
                    );
                }
                if p.mc_trials < 1000 {
                    return bad("fp_bound.mc_trials", "need at least 1000 trials");
                }
            }
            ExperimentKind::CountermeasureEval if self.countermeasure.scenes < 3 => {
                return bad("countermeasure.scenes", "need at least 3 scenes");
            }
            ExperimentKind::Serve => {
                let p = &self.serve;
                if p.workers == 0 || p.repeats == 0 || p.k == 0 || p.pilot_queries == 0 {
                    return bad("serve", "workers, repeats, k and pilot_queries must be positive");
                }
                if p.jitter_secs.is_some_and(|j| j.is_nan() || j <= 0.0) {
                    return bad("serve.jitter_secs", "must be positive");
                }
                if p.jitter_fraction.is_nan() || p.jitter_fraction < 0.0 {
                    return bad("serve.jitter_fraction", "must be non-negative");
                }
                if p.parity && p.scenes < 3 {
                    return bad("serve.scenes", "need at least 3 scenes");
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Kept within `i64` so the resolved config stays valid TOML.
pub fn derived_weight_seed(master: u64) -> u64 {
    seed::substream(master, "detector.weights") & i64::MAX as u64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_takes_defaults() {
        let cfg = RunConfig::from_toml("kind = \"profile\"\nseed = 4\n", None).unwrap();
        assert_eq!(cfg, RunConfig::new(ExperimentKind::Profile, 4));
    }

    #[test]
    fn resolved_config_round_trips() {
        let mut cfg = RunConfig::new(ExperimentKind::Evade, 9);
        cfg.evade.attack.lambda = 2.0;
        cfg.clock.sigma = Some(1e-5);
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap(), None).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn explicit_weight_seed_is_kept() {
        let cfg = RunConfig::from_toml("kind = \"profile\"\nseed = 4\n[detector]\nweight_seed = 0\n", None).unwrap();
        assert_eq!(cfg.detector.weight_seed, 0);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = RunConfig::from_toml("kind = \"profile\"\n[profile]\nscene = 3\n", None).unwrap_err();
        assert!(err.to_string().contains("scene"));
    }

    #[test]
    fn validation_names_the_field() {
        let mut cfg = RunConfig::new(ExperimentKind::LambdaSweep, 0);
        cfg.lambda_sweep.lambdas = vec![0.5, -1.0];
        assert!(cfg.validate().unwrap_err().to_string().contains("lambda_sweep.lambdas"));
    }
}
