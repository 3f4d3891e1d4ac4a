//! Leakage profiling, neural-model calibration and the constant-time
//! countermeasure.

use nmsleak_core::clock::ClockSpec;
use nmsleak_core::detector::{DecisionBox, DetectorConfig, SyntheticDetector};
use nmsleak_core::measurement::{
    calibrate_neural_model, default_calibration_sizes, estimate_nms_time, leakage_report, LeakageRow, LocalDetector,
    MeasurementRecord, NeuralRuntimeModel,
};
use nmsleak_core::nms::NmsVariant;
use nmsleak_core::scenes::SceneFamily;
use nmsleak_core::{stats, Raster};

use super::{clock_spec, detector, mean_nms_time, noise_sigma, stream, Result};
use crate::config::RunConfig;
use crate::output::{num, Check, Outcome, Table};

/// Single-object profile scenes and the phase-noise sigma derived from their
/// mean unamplified NMS time.
pub fn profile_scenes(cfg: &RunConfig, det: &SyntheticDetector, count: usize) -> Result<(Vec<Raster>, f64)> {
    let scenes: Vec<Raster> = SceneFamily::profile()
        .generate(det, count, stream(cfg, "scenes.profile"))?
        .into_iter()
        .map(|s| s.raster)
        .collect();
    let sigma = noise_sigma(cfg, mean_nms_time(det, &scenes)?);
    Ok((scenes, sigma))
}

fn calibration_table(name: &str, model: &NeuralRuntimeModel) -> Table {
    let mut t = Table::new(name, &["pixels", "total_time"]);
    for (px, time) in &model.calibration_points {
        t.push(vec![px.to_string(), num(*time)]);
    }
    t
}

#[derive(Debug, Clone)]
pub struct ProfileResult {
    pub sigma: f64,
    pub model: NeuralRuntimeModel,
    pub rows: Vec<LeakageRow>,
    pub records: Vec<MeasurementRecord>,
}

pub fn profile(cfg: &RunConfig) -> Result<ProfileResult> {
    let det = detector(cfg)?;
    let (scenes, sigma) = profile_scenes(cfg, &det, cfg.profile.scenes)?;
    let mut local = LocalDetector::new(&det, clock_spec(cfg, sigma, stream(cfg, "clock.profile")))?;
    let model = calibrate_neural_model(&mut local, &default_calibration_sizes())?;
    let (rows, records) = leakage_report(&mut local, &scenes, &cfg.profile.ks, &model)?;
    Ok(ProfileResult {
        sigma,
        model,
        rows,
        records,
    })
}

impl ProfileResult {
    /// Correlation of `B` with the attacker's estimated NMS time at `k`.
    pub fn rho(&self, k: usize) -> Option<f64> {
        self.rows.iter().find(|r| r.k == k).map(|r| r.rho_estimated)
    }

    pub fn outcome(&self) -> Outcome {
        let mut out = Outcome::default();
        let mut m = Table::new(
            "measurements",
            &MeasurementRecord::CSV_HEADER.split(',').collect::<Vec<_>>(),
        );
        for r in &self.records {
            m.push(r.csv_row().split(',').map(str::to_owned).collect());
        }
        let mut l = Table::new("leakage", &["k", "scenes", "rho_time", "rho_estimated"]);
        out.line(format!("noise sigma {:.3e} s per phase", self.sigma));
        for r in &self.rows {
            l.push(vec![
                r.k.to_string(),
                r.scenes.to_string(),
                num(r.rho_time),
                num(r.rho_estimated),
            ]);
            out.line(format!(
                "k={}: Spearman(B, NMS time) {:.4}, Spearman(B, estimated) {:.4}",
                r.k, r.rho_time, r.rho_estimated
            ));
        }
        out.tables = vec![m, l, calibration_table("calibration", &self.model)];
        out.metric("sigma", self.sigma);
        out.metric("leakage", &self.rows);
        out.metric("model", self.model_summary());
        if let Some(rho) = self.rho(1) {
            out.checks
                .push(Check::new("rho_k1", rho >= 0.8, format!("{rho:.4} >= 0.80")));
        }
        let ordered = self.rows.windows(2).all(|w| w[1].rho_estimated >= w[0].rho_estimated);
        out.checks.push(Check::new(
            "rho_non_decreasing_in_k",
            ordered,
            self.rows
                .iter()
                .map(|r| format!("{:.4}", r.rho_estimated))
                .collect::<Vec<_>>()
                .join(" <= "),
        ));
        out
    }

    fn model_summary(&self) -> serde_json::Value {
        serde_json::json!({
            "slope_per_pixel": self.model.slope_per_pixel,
            "intercept": self.model.intercept,
            "r_squared": self.model.r_squared,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CalibrateResult {
    pub true_slope: f64,
    pub true_intercept: f64,
    pub noiseless: NeuralRuntimeModel,
    pub noisy: NeuralRuntimeModel,
    pub sigma: f64,
    /// `(scene, B, NMS phase time, estimated NMS time)`.
    pub scenes: Vec<(usize, usize, f64, f64)>,
    pub rho_estimated_true: f64,
}

impl CalibrateResult {
    pub fn slope_rel_error(&self) -> f64 {
        ((self.noiseless.slope_per_pixel - self.true_slope) / self.true_slope).abs()
    }

    pub fn intercept_rel_error(&self) -> f64 {
        ((self.noiseless.intercept - self.true_intercept) / self.true_intercept).abs()
    }
}

pub fn calibrate(cfg: &RunConfig) -> Result<CalibrateResult> {
    let det = detector(cfg)?;
    let true_slope = det.config().neural_cost_per_pixel;
    let black = Raster::black(32, 32)?;
    let mut exact = LocalDetector::new(&det, ClockSpec::noiseless())?;
    let true_intercept = exact.observe(&black)?.1.total_time - true_slope * black.pixel_count() as f64;
    let noiseless = calibrate_neural_model(&mut exact, &default_calibration_sizes())?;

    let (scenes, sigma) = profile_scenes(cfg, &det, cfg.calibrate.scenes)?;
    let mut local = LocalDetector::new(&det, clock_spec(cfg, sigma, stream(cfg, "clock.calibrate")))?;
    let noisy = calibrate_neural_model(&mut local, &default_calibration_sizes())?;
    let mut rows = Vec::with_capacity(scenes.len());
    for (i, img) in scenes.iter().enumerate() {
        let (_, obs) = local.observe(img)?;
        rows.push((
            i,
            obs.box_count,
            obs.nms_time,
            estimate_nms_time(&noisy, obs.total_time, img.pixel_count()),
        ));
    }
    let truth: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let est: Vec<f64> = rows.iter().map(|r| r.3).collect();
    Ok(CalibrateResult {
        true_slope,
        true_intercept,
        noiseless,
        noisy,
        sigma,
        rho_estimated_true: stats::spearman(&est, &truth)?,
        scenes: rows,
    })
}

impl CalibrateResult {
    pub fn outcome(&self) -> Outcome {
        let mut out = Outcome::default();
        let mut cal = Table::new("calibration", &["pixels", "noiseless_total_time", "noisy_total_time"]);
        for ((px, a), (_, b)) in self
            .noiseless
            .calibration_points
            .iter()
            .zip(&self.noisy.calibration_points)
        {
            cal.push(vec![px.to_string(), num(*a), num(*b)]);
        }
        let mut est = Table::new("estimates", &["scene_id", "B", "nms_time", "estimated_nms_time"]);
        for (i, b, t, e) in &self.scenes {
            est.push(vec![i.to_string(), b.to_string(), num(*t), num(*e)]);
        }
        out.tables = vec![cal, est];
        for (name, model) in [("noiseless", &self.noiseless), ("noisy", &self.noisy)] {
            out.metric(
                &format!("{name}_model"),
                serde_json::json!({
                    "slope_per_pixel": model.slope_per_pixel,
                    "intercept": model.intercept,
                    "r_squared": model.r_squared,
                    "slope_std_error": model.slope_std_error,
                }),
            );
            out.line(format!(
                "{name}: slope {:.6e} s/px, intercept {:.6e} s, R^2 {:.6}",
                model.slope_per_pixel, model.intercept, model.r_squared
            ));
        }
        out.metric("true_slope", self.true_slope);
        out.metric("true_intercept", self.true_intercept);
        out.metric("sigma", self.sigma);
        out.metric("rho_estimated_true", self.rho_estimated_true);
        out.line(format!(
            "Spearman(estimated, true NMS time) {:.4}",
            self.rho_estimated_true
        ));
        let (se, ie) = (self.slope_rel_error(), self.intercept_rel_error());
        out.checks.push(Check::new(
            "noiseless_recovery",
            se <= 1e-9 && ie <= 1e-9,
            format!("relative errors slope {se:.2e}, intercept {ie:.2e} <= 1e-9"),
        ));
        out.checks.push(Check::new(
            "estimate_tracks_truth",
            self.rho_estimated_true >= 0.95,
            format!("{:.4} >= 0.95", self.rho_estimated_true),
        ));
        out
    }
}

#[derive(Debug, Clone)]
pub struct CountermeasureResult {
    pub capacity: usize,
    pub sigma: f64,
    /// `(scene, B, greedy NMS time, constant-time NMS time, estimated)`.
    pub scenes: Vec<(usize, usize, f64, f64, f64)>,
    pub rho_greedy: f64,
    pub rho_constant: f64,
    pub mismatched_scenes: Vec<usize>,
}

pub fn countermeasure(cfg: &RunConfig) -> Result<CountermeasureResult> {
    let greedy = SyntheticDetector::new(DetectorConfig {
        nms: NmsVariant::Greedy,
        ..cfg.detector
    })?;
    let capacity = cfg.countermeasure.capacity;
    let constant = SyntheticDetector::new(DetectorConfig {
        nms: NmsVariant::ConstantTime { capacity },
        ..cfg.detector
    })?;
    let (scenes, sigma) = profile_scenes(cfg, &greedy, cfg.countermeasure.scenes)?;
    let spec = clock_spec(cfg, sigma, stream(cfg, "clock.countermeasure"));
    let mut g = LocalDetector::new(&greedy, spec)?;
    let mut c = LocalDetector::new(&constant, spec)?;
    let model = calibrate_neural_model(&mut c, &default_calibration_sizes())?;
    let mut rows = Vec::with_capacity(scenes.len());
    let mut mismatched = Vec::new();
    for (i, img) in scenes.iter().enumerate() {
        let (kept_g, obs_g) = g.observe(img)?;
        let (kept_c, obs_c) = c.observe(img)?;
        let same = kept_g
            .iter()
            .map(DecisionBox::from)
            .eq(kept_c.iter().map(DecisionBox::from));
        if !same {
            mismatched.push(i);
        }
        rows.push((
            i,
            obs_g.box_count,
            obs_g.nms_time,
            obs_c.nms_time,
            estimate_nms_time(&model, obs_c.total_time, img.pixel_count()),
        ));
    }
    let b: Vec<f64> = rows.iter().map(|r| r.1 as f64).collect();
    let tg: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let tc: Vec<f64> = rows.iter().map(|r| r.4).collect();
    Ok(CountermeasureResult {
        capacity,
        sigma,
        rho_greedy: stats::spearman(&b, &tg)?,
        rho_constant: stats::spearman(&b, &tc)?,
        scenes: rows,
        mismatched_scenes: mismatched,
    })
}

impl CountermeasureResult {
    pub fn outcome(&self) -> Outcome {
        let mut out = Outcome::default();
        let mut t = Table::new(
            "countermeasure",
            &[
                "scene_id",
                "B",
                "greedy_nms_time",
                "constant_nms_time",
                "constant_estimated_nms_time",
            ],
        );
        for (i, b, g, c, e) in &self.scenes {
            t.push(vec![i.to_string(), b.to_string(), num(*g), num(*c), num(*e)]);
        }
        out.tables = vec![t];
        out.metric("capacity", self.capacity);
        out.metric("sigma", self.sigma);
        out.metric("rho_greedy", self.rho_greedy);
        out.metric("rho_constant_time", self.rho_constant);
        out.metric("mismatched_scenes", &self.mismatched_scenes);
        out.line(format!(
            "Spearman(B, time): greedy {:.4}, constant-time {:.4} (capacity {})",
            self.rho_greedy, self.rho_constant, self.capacity
        ));
        out.checks.push(Check::new(
            "constant_time_flat",
            self.rho_constant.abs() < 0.1,
            format!("|{:.4}| < 0.1", self.rho_constant),
        ));
        out.checks.push(Check::new(
            "detections_identical",
            self.mismatched_scenes.is_empty(),
            format!(
                "{} of {} scenes differ",
                self.mismatched_scenes.len(),
                self.scenes.len()
            ),
        ));
        out
    }
}
