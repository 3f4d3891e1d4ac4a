//! Black-box query handles, neural-runtime calibration, NMS-time estimation
//! and leakage reports.

use serde::{Deserialize, Serialize};

use crate::clock::{Clock, ClockMode, ClockSpec};
use crate::detector::{amplify, DecisionBox, SyntheticDetector, TimingObservation};
use crate::geometry::Detection;
use crate::raster::Raster;
use crate::stats::{self, ols};
use crate::{Error, Result};

/// What a black-box attacker sees from one query.
#[derive(Debug, Clone, PartialEq)]
pub struct Observed {
    pub detections: Vec<DecisionBox>,
    /// End-to-end time in seconds (median over the handle's repeats).
    pub total_time: f64,
}

impl Observed {
    pub fn detected(&self) -> bool {
        !self.detections.is_empty()
    }
}

/// A detector that can be queried for decisions and end-to-end time. Queries
/// are serial: implementations take `&mut self`.
pub trait DetectorHandle {
    fn query(&mut self, img: &Raster) -> Result<Observed>;

    fn mode(&self) -> ClockMode;
}

/// In-process handle over a [`SyntheticDetector`] and its own clock.
#[derive(Debug)]
pub struct LocalDetector<'a> {
    detector: &'a SyntheticDetector,
    clock: Clock,
    last: Option<TimingObservation>,
}

impl<'a> LocalDetector<'a> {
    pub fn new(detector: &'a SyntheticDetector, clock: ClockSpec) -> Result<Self> {
        Ok(Self {
            detector,
            clock: Clock::new(clock)?,
            last: None,
        })
    }

    pub fn detector(&self) -> &SyntheticDetector {
        self.detector
    }

    /// Full white-box view of one query, for ground truth in experiments.
    pub fn observe(&mut self, img: &Raster) -> Result<(Vec<Detection>, TimingObservation)> {
        let (kept, obs) = self.detector.detect(img, &mut self.clock)?;
        self.last = Some(obs);
        Ok((kept, obs))
    }

    pub fn last_observation(&self) -> Option<&TimingObservation> {
        self.last.as_ref()
    }
}

impl DetectorHandle for LocalDetector<'_> {
    fn query(&mut self, img: &Raster) -> Result<Observed> {
        let (kept, obs) = self.observe(img)?;
        Ok(Observed {
            detections: kept.iter().map(DecisionBox::from).collect(),
            total_time: obs.total_time,
        })
    }

    fn mode(&self) -> ClockMode {
        self.clock.mode()
    }
}

/// Linear model of the object-independent part of end-to-end time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuralRuntimeModel {
    pub slope_per_pixel: f64,
    pub intercept: f64,
    pub r_squared: f64,
    /// Standard error of the slope estimate.
    pub slope_std_error: f64,
    /// `(pixel_count, measured_total)` pairs used in the fit.
    pub calibration_points: Vec<(usize, f64)>,
}

impl NeuralRuntimeModel {
    pub fn predict(&self, pixel_count: usize) -> f64 {
        self.slope_per_pixel * pixel_count as f64 + self.intercept
    }
}

/// Base side of the default calibration schedule.
pub const CALIBRATION_BASE: usize = 416;

/// The 78 black-image sizes `416 × (416 + 32k)` and `(416 + 32k) × 416`
/// for `k = 1..=39`.
pub fn default_calibration_sizes() -> Vec<(usize, usize)> {
    (1..=39)
        .flat_map(|k| {
            let long = CALIBRATION_BASE + 32 * k;
            [(CALIBRATION_BASE, long), (long, CALIBRATION_BASE)]
        })
        .collect()
}

/// Times black images of the given `(height, width)` sizes and regresses the
/// end-to-end time on pixel count.
pub fn calibrate_neural_model<H: DetectorHandle + ?Sized>(
    handle: &mut H,
    sizes: &[(usize, usize)],
) -> Result<NeuralRuntimeModel> {
    let mut distinct = sizes.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(Error::Degenerate(format!(
            "calibration needs at least 3 distinct sizes, got {}",
            distinct.len()
        )));
    }
    let mut pixel_counts: Vec<usize> = distinct.iter().map(|(h, w)| h * w).collect();
    pixel_counts.sort_unstable();
    pixel_counts.dedup();
    if pixel_counts.len() < 2 {
        return Err(Error::Degenerate(
            "all calibration sizes have the same pixel count".into(),
        ));
    }
    let mut points = Vec::with_capacity(sizes.len());
    for &(h, w) in sizes {
        let obs = handle.query(&Raster::black(h, w)?)?;
        points.push((h * w, obs.total_time));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0 as f64).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1).collect();
    let fit = ols(&xs, &ys)?;
    let n = xs.len() as f64;
    let mx = stats::mean(&xs);
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    let ss_res: f64 = xs.iter().zip(&ys).map(|(x, y)| (y - fit.predict(*x)).powi(2)).sum();
    let slope_std_error = if n > 2.0 {
        (ss_res / (n - 2.0) / sxx).sqrt()
    } else {
        0.0
    };
    Ok(NeuralRuntimeModel {
        slope_per_pixel: fit.slope,
        intercept: fit.intercept,
        r_squared: fit.r_squared,
        slope_std_error,
        calibration_points: points,
    })
}

/// End-to-end time minus the predicted neural share. Negative values under
/// noise are returned as-is.
pub fn estimate_nms_time(model: &NeuralRuntimeModel, total_time: f64, pixel_count: usize) -> f64 {
    total_time - model.predict(pixel_count)
}

/// One timed scene, as emitted in measurement CSVs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub scene_id: usize,
    pub k: usize,
    #[serde(rename = "B")]
    pub box_count: usize,
    #[serde(rename = "o")]
    pub object_count: usize,
    pub comparisons: u64,
    pub neural_time: f64,
    pub nms_time: f64,
    pub total_time: f64,
    pub estimated_nms_time: f64,
}

impl MeasurementRecord {
    pub const CSV_HEADER: &'static str =
        "scene_id,k,B,o,comparisons,neural_time,nms_time,total_time,estimated_nms_time";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:e},{:e},{:e},{:e}",
            self.scene_id,
            self.k,
            self.box_count,
            self.object_count,
            self.comparisons,
            self.neural_time,
            self.nms_time,
            self.total_time,
            self.estimated_nms_time
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeakageRow {
    pub k: usize,
    pub scenes: usize,
    /// Spearman of `B` against the measured NMS phase time.
    pub rho_time: f64,
    /// Spearman of `B` against the NMS time estimated from end-to-end time.
    pub rho_estimated: f64,
}

/// Times every scene amplified by each `k` and correlates time with the
/// candidate count `B`.
pub fn leakage_report(
    local: &mut LocalDetector<'_>,
    scenes: &[Raster],
    ks: &[usize],
    model: &NeuralRuntimeModel,
) -> Result<(Vec<LeakageRow>, Vec<MeasurementRecord>)> {
    let mut rows = Vec::with_capacity(ks.len());
    let mut records = Vec::with_capacity(ks.len() * scenes.len());
    for &k in ks {
        let start = records.len();
        for (scene_id, scene) in scenes.iter().enumerate() {
            let img = amplify(scene, k, false, 1.0)?;
            let (_, obs) = local.observe(&img)?;
            records.push(MeasurementRecord {
                scene_id,
                k,
                box_count: obs.box_count,
                object_count: obs.object_count,
                comparisons: obs.comparison_count,
                neural_time: obs.neural_time,
                nms_time: obs.nms_time,
                total_time: obs.total_time,
                estimated_nms_time: estimate_nms_time(model, obs.total_time, img.pixel_count()),
            });
        }
        let batch = &records[start..];
        let b: Vec<f64> = batch.iter().map(|r| r.box_count as f64).collect();
        let t: Vec<f64> = batch.iter().map(|r| r.nms_time).collect();
        let e: Vec<f64> = batch.iter().map(|r| r.estimated_nms_time).collect();
        rows.push(LeakageRow {
            k,
            scenes: batch.len(),
            rho_time: stats::spearman(&b, &t)?,
            rho_estimated: stats::spearman(&b, &e)?,
        });
    }
    Ok((rows, records))
}
