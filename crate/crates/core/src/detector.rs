//! Synthetic two-phase detector: a linear-logistic anchor scorer followed by
//! NMS, with modeled or wall-clock phase timing.
//!
//! Every anchor sees an `window × window` patch at a multiple of `stride` and
//! scores it as `logistic(w · patch + bias)`. All anchors share one filter
//! `w`, so the weights are periodic with period `stride` and tiling an image
//! replicates its candidate boxes exactly. The filter has zero mean, which
//! makes any uniform image (black, gray, white) score `logistic(bias)`.

use std::time::Instant;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::clock::{Clock, ClockMode};
use crate::geometry::{BoundingBox, Detection};
use crate::nms::{self, NmsCostModel, NmsInput, NmsOutcome, NmsVariant};
use crate::raster::{Raster, CHANNELS, DIM_MULTIPLE};
use crate::seed;
use crate::stats;
use crate::{Error, Result};

/// Logit bonus of the most central core anchor of a planted object.
pub const CORE_PEAK: f64 = 0.25;
/// Logit drop per ring of anchors away from the core.
pub const HALO_STEP: f64 = 1.5;
/// Convergence tolerance of the planting solver, in logits.
const PLANT_TOLERANCE: f64 = 1e-4;
const PLANT_MAX_SWEEPS: usize = 2000;

fn unit_zero_mean(v: &mut [f64]) {
    let m = stats::mean(v);
    v.iter_mut().for_each(|x| *x -= m);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
}

pub fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorGridConfig {
    pub stride: usize,
    pub window: usize,
    /// Side of the square box each anchor proposes, centred on its window.
    pub box_size: f64,
}

impl Default for AnchorGridConfig {
    fn default() -> Self {
        Self {
            stride: 4,
            window: 8,
            box_size: 64.0,
        }
    }
}

impl AnchorGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 || !DIM_MULTIPLE.is_multiple_of(self.stride) {
            return Err(Error::param(
                "grid.stride",
                format!("{} must be a positive divisor of {DIM_MULTIPLE}", self.stride),
            ));
        }
        if self.window < self.stride || self.window > DIM_MULTIPLE {
            return Err(Error::param(
                "grid.window",
                format!("{} must lie in [stride, {DIM_MULTIPLE}]", self.window),
            ));
        }
        if !(self.box_size.is_finite() && self.box_size > 0.0) {
            return Err(Error::param("grid.box_size", "must be positive"));
        }
        Ok(())
    }

    /// Anchor columns and rows for an image.
    pub fn anchor_dims(&self, height: usize, width: usize) -> (usize, usize) {
        (
            (width - self.window) / self.stride + 1,
            (height - self.window) / self.stride + 1,
        )
    }

    pub fn anchor_box(&self, ax: usize, ay: usize) -> BoundingBox {
        let half = self.window as f64 / 2.0;
        BoundingBox::centered(
            (ax * self.stride) as f64 + half,
            (ay * self.stride) as f64 + half,
            self.box_size,
        )
        .expect("positive box size")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub grid: AnchorGridConfig,
    pub weight_seed: u64,
    /// Norm of the shared filter.
    pub gain: f64,
    /// Weight of the spatially uniform colour component of the filter
    /// against its i.i.d. component; higher values correlate neighbouring
    /// anchors.
    pub coherence: f64,
    pub bias: f64,
    pub detection_threshold: f64,
    pub nms_threshold: f64,
    pub nms: NmsVariant,
    pub nms_cost: NmsCostModel,
    pub neural_cost_per_pixel: f64,
    pub neural_cost_fixed: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            grid: AnchorGridConfig::default(),
            weight_seed: 0,
            gain: 10.0,
            coherence: 0.3,
            bias: -3.0,
            detection_threshold: 0.6,
            nms_threshold: 0.45,
            nms: NmsVariant::Greedy,
            nms_cost: NmsCostModel::default(),
            neural_cost_per_pixel: 2.0e-8,
            neural_cost_fixed: 5.0e-4,
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        self.nms.validate()?;
        self.nms_cost.validate()?;
        if !(self.gain.is_finite() && self.gain > 0.0) {
            return Err(Error::param("gain", "must be positive"));
        }
        if !(self.detection_threshold > 0.0 && self.detection_threshold < 1.0) {
            return Err(Error::param("detection_threshold", "must lie in (0, 1)"));
        }
        if !(self.nms_threshold > 0.0 && self.nms_threshold < 1.0) {
            return Err(Error::param("nms_threshold", "must lie in (0, 1)"));
        }
        if !self.bias.is_finite() || logistic(self.bias) >= self.detection_threshold {
            return Err(Error::param(
                "bias",
                "logistic(bias) must stay below the detection threshold so empty images yield no boxes",
            ));
        }
        let costs = [self.neural_cost_per_pixel, self.neural_cost_fixed];
        if costs.iter().any(|c| !c.is_finite() || *c < 0.0) {
            return Err(Error::param("neural_cost", "must be finite and non-negative"));
        }
        Ok(())
    }
}

/// A box and class as returned by a decision-only interface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionBox {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    #[serde(rename = "class")]
    pub class_id: u32,
}

impl From<&Detection> for DecisionBox {
    fn from(d: &Detection) -> Self {
        Self {
            bbox: d.bbox,
            class_id: d.class_id,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingObservation {
    pub neural_time: f64,
    pub nms_time: f64,
    pub total_time: f64,
    pub comparison_count: u64,
    /// Candidates entering NMS (`B`).
    pub box_count: usize,
    /// Detections kept by NMS (`o`).
    pub object_count: usize,
    pub mode: ClockMode,
}

#[derive(Debug, Clone)]
pub struct SyntheticDetector {
    config: DetectorConfig,
    weights: Vec<f32>,
}

impl SyntheticDetector {
    pub fn new(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        let n = config.grid.window * config.grid.window * CHANNELS;
        let mut rng = seed::stream_rng(config.weight_seed, "detector.weights");
        let mut noise: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        unit_zero_mean(&mut noise);
        let mut colour: Vec<f64> = (0..CHANNELS).map(|_| StandardNormal.sample(&mut rng)).collect();
        unit_zero_mean(&mut colour);
        let mut u: Vec<f64> = (0..n)
            .map(|i| config.coherence * colour[i % CHANNELS] + (1.0 - config.coherence) * noise[i])
            .collect();
        unit_zero_mean(&mut u);
        let weights = u.iter().map(|v| (v * config.gain) as f32).collect();
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn weights(&self) -> &[f32] {
        &self.weights
    }

    fn check_fits(&self, img: &Raster) -> Result<()> {
        let w = self.config.grid.window;
        if w > img.height() || w > img.width() {
            return Err(Error::param("grid.window", "larger than the image"));
        }
        Ok(())
    }

    fn window_dot(&self, img: &Raster, x0: usize, y0: usize) -> f64 {
        let win = self.config.grid.window;
        let row_len = win * CHANNELS;
        let data = img.data();
        // Eight independent lanes let the compiler vectorize the reduction.
        let mut lanes = [0f32; 8];
        for dy in 0..win {
            let start = img.offset(x0, y0 + dy, 0);
            let px = &data[start..start + row_len];
            let wt = &self.weights[dy * row_len..(dy + 1) * row_len];
            let mut pc = px.chunks_exact(8);
            let mut wc = wt.chunks_exact(8);
            for (p, w) in (&mut pc).zip(&mut wc) {
                for l in 0..8 {
                    lanes[l] += p[l] * w[l];
                }
            }
            for (l, (p, w)) in pc.remainder().iter().zip(wc.remainder()).enumerate() {
                lanes[l] += p * w;
            }
        }
        lanes.iter().map(|v| *v as f64).sum()
    }

    /// Logit of every anchor, row-major over the anchor grid.
    pub fn anchor_logits(&self, img: &Raster) -> Result<Vec<f64>> {
        self.check_fits(img)?;
        let (cols, rows) = self.config.grid.anchor_dims(img.height(), img.width());
        let s = self.config.grid.stride;
        let mut out = Vec::with_capacity(cols * rows);
        for ay in 0..rows {
            for ax in 0..cols {
                out.push(self.window_dot(img, ax * s, ay * s) + self.config.bias);
            }
        }
        Ok(out)
    }

    /// Candidates whose score reaches the detection threshold, in anchor order.
    pub fn score_anchors(&self, img: &Raster) -> Result<Vec<Detection>> {
        let logits = self.anchor_logits(img)?;
        let (cols, _) = self.config.grid.anchor_dims(img.height(), img.width());
        let t = self.config.detection_threshold;
        let mut out = Vec::new();
        for (i, z) in logits.iter().enumerate() {
            let score = logistic(*z);
            if score >= t {
                let bbox = self.config.grid.anchor_box(i % cols, i / cols);
                out.push(Detection::new(bbox, 0, score)?);
            }
        }
        Ok(out)
    }

    /// Runs the configured NMS variant. Returns the outcome and any extra
    /// delay the variant adds.
    pub fn run_nms(&self, candidates: &[Detection], delay_seed: u64) -> Result<(NmsOutcome, f64)> {
        let input = NmsInput::new(candidates, self.config.nms_threshold)?;
        match &self.config.nms {
            NmsVariant::Greedy => Ok((nms::greedy_nms(input), 0.0)),
            NmsVariant::ConstantTime { capacity } => Ok((nms::constant_time_nms(input, *capacity)?, 0.0)),
            NmsVariant::RandomDelay { delay } => nms::random_delay_nms(input, delay, delay_seed),
        }
    }

    /// Noiseless modeled phase times for an image and its NMS outcome.
    pub fn modeled_times(&self, img: &Raster, outcome: &NmsOutcome) -> (f64, f64) {
        let c = &self.config;
        (
            c.neural_cost_fixed + c.neural_cost_per_pixel * img.pixel_count() as f64,
            nms::modeled_nms_time(outcome, &c.nms_cost),
        )
    }

    /// Full pipeline: score, suppress, time. Repeated measurements (the
    /// clock's `repeats`) are aggregated by the median of each phase and of
    /// the total.
    pub fn detect(&self, img: &Raster, clock: &mut Clock) -> Result<(Vec<Detection>, TimingObservation)> {
        let repeats = clock.repeats();
        let mut neural = Vec::with_capacity(repeats);
        let mut nms_t = Vec::with_capacity(repeats);
        let mut total = Vec::with_capacity(repeats);
        let mut result = None;
        match clock.mode() {
            ClockMode::WallClock => {
                for _ in 0..repeats {
                    let delay_seed = rand::Rng::random(clock.rng());
                    let t0 = Instant::now();
                    let candidates = self.score_anchors(img)?;
                    let t1 = Instant::now();
                    let (outcome, delay) = self.run_nms(&candidates, delay_seed)?;
                    crate::clock::busy_wait(delay);
                    let t2 = Instant::now();
                    let n = (t1 - t0).as_secs_f64();
                    let m = (t2 - t1).as_secs_f64();
                    neural.push(n);
                    nms_t.push(m);
                    total.push(n + m);
                    result = Some((candidates.len(), outcome));
                }
            }
            ClockMode::Modeled | ClockMode::RemoteRtt => {
                let candidates = self.score_anchors(img)?;
                let mut outcome = None;
                for _ in 0..repeats {
                    let delay_seed = rand::Rng::random(clock.rng());
                    let (o, delay) = self.run_nms(&candidates, delay_seed)?;
                    let (n0, m0) = self.modeled_times(img, &o);
                    let n = n0 + clock.neural_noise();
                    let m = m0 + delay + clock.nms_noise();
                    neural.push(n);
                    nms_t.push(m);
                    total.push(n + m);
                    outcome = Some(o);
                }
                result = Some((candidates.len(), outcome.expect("repeats >= 1")));
            }
        }
        let (box_count, outcome) = result.expect("repeats >= 1");
        let obs = TimingObservation {
            neural_time: stats::median(&neural)?,
            nms_time: stats::median(&nms_t)?,
            total_time: stats::median(&total)?,
            comparison_count: outcome.comparison_count,
            box_count,
            object_count: outcome.kept.len(),
            mode: clock.mode(),
        };
        Ok((outcome.kept, obs))
    }

    /// Decisions only (no timing, no noise).
    pub fn decide(&self, img: &Raster) -> Result<Vec<Detection>> {
        let candidates = self.score_anchors(img)?;
        Ok(self.run_nms(&candidates, 0)?.0.kept)
    }

    /// Plants a synthetic object inside `region` (pixel coordinates).
    ///
    /// The `n_boxes` anchors whose windows lie inside the region and sit
    /// closest to its centre form the core; they are driven to logits in
    /// `[logit(target), logit(target) + CORE_PEAK]`, peaking at the centre.
    /// Remaining anchors touching the region form a halo whose logit falls by
    /// `HALO_STEP` per ring away from the core, floored at the bias. Halo
    /// anchors with windows fully inside the region are solved exactly, the
    /// ones straddling its edge only capped from above. Only pixels inside
    /// the region change.
    pub fn plant_object(
        &self,
        img: &Raster,
        region: &BoundingBox,
        target_score: f64,
        n_boxes: usize,
    ) -> Result<Raster> {
        self.check_fits(img)?;
        let cfg = &self.config;
        if !(target_score > cfg.detection_threshold && target_score < 1.0) {
            return Err(Error::param(
                "target_score",
                format!("{target_score} not in (detection_threshold, 1)"),
            ));
        }
        if n_boxes == 0 {
            return Err(Error::param("n_boxes", "must be positive"));
        }
        let (h, w) = (img.height() as f64, img.width() as f64);
        if region.x_min() < 0.0 || region.y_min() < 0.0 || region.x_max() > w || region.y_max() > h {
            return Err(Error::param("region", "must lie inside the image"));
        }
        let rx0 = region.x_min().ceil() as usize;
        let ry0 = region.y_min().ceil() as usize;
        let rx1 = region.x_max().floor() as usize;
        let ry1 = region.y_max().floor() as usize;

        let grid = cfg.grid;
        let (s, win) = (grid.stride, grid.window);
        let (cols, rows) = grid.anchor_dims(img.height(), img.width());
        let inside =
            |ax: usize, ay: usize| ax * s >= rx0 && ay * s >= ry0 && ax * s + win <= rx1 && ay * s + win <= ry1;
        let touches = |ax: usize, ay: usize| ax * s < rx1 && ay * s < ry1 && ax * s + win > rx0 && ay * s + win > ry0;

        let (cx, cy) = (
            (region.x_min() + region.x_max()) / 2.0,
            (region.y_min() + region.y_max()) / 2.0,
        );
        let centre_dist = |ax: usize, ay: usize| {
            let half = win as f64 / 2.0;
            ((ax * s) as f64 + half - cx).hypot((ay * s) as f64 + half - cy)
        };
        let mut interior: Vec<(usize, usize)> = (0..rows)
            .flat_map(|ay| (0..cols).map(move |ax| (ax, ay)))
            .filter(|&(ax, ay)| inside(ax, ay))
            .collect();
        if n_boxes > interior.len() {
            return Err(Error::param(
                "n_boxes",
                format!("{n_boxes} exceeds the {} anchors inside the region", interior.len()),
            ));
        }
        interior.sort_by(|a, b| centre_dist(a.0, a.1).total_cmp(&centre_dist(b.0, b.1)));
        let core = &interior[..n_boxes];
        let dmax = core.iter().map(|a| centre_dist(a.0, a.1)).fold(0.0, f64::max);

        let base = logit(target_score);
        struct Target {
            ax: usize,
            ay: usize,
            logit: f64,
            exact: bool,
        }
        let mut targets = Vec::new();
        for ay in 0..rows {
            for ax in 0..cols {
                if !touches(ax, ay) {
                    continue;
                }
                let t = if let Some(a) = core.iter().find(|a| **a == (ax, ay)) {
                    base + CORE_PEAK * (1.0 - centre_dist(a.0, a.1) / (dmax + 1.0))
                } else {
                    let ring = core
                        .iter()
                        .map(|&(cx, cy)| cx.abs_diff(ax).max(cy.abs_diff(ay)))
                        .min()
                        .expect("core is non-empty");
                    (base - HALO_STEP * ring as f64).max(cfg.bias)
                };
                targets.push(Target {
                    ax,
                    ay,
                    logit: t,
                    exact: inside(ax, ay),
                });
            }
        }

        let mut data = img.data().to_vec();
        let width = img.width();
        let row_len = win * CHANNELS;
        // Weight entries of each target that fall on region pixels.
        let masked_norm2: Vec<f64> = targets
            .iter()
            .map(|t| {
                let mut n2 = 0.0;
                for dy in 0..win {
                    for dx in 0..win {
                        let (x, y) = (t.ax * s + dx, t.ay * s + dy);
                        if (rx0..rx1).contains(&x) && (ry0..ry1).contains(&y) {
                            for c in 0..CHANNELS {
                                n2 += (self.weights[dy * row_len + dx * CHANNELS + c] as f64).powi(2);
                            }
                        }
                    }
                }
                n2
            })
            .collect();
        let dot = |data: &[f32], t: &Target| {
            let mut acc = 0f64;
            for dy in 0..win {
                let start = ((t.ay * s + dy) * width + t.ax * s) * CHANNELS;
                for (i, v) in data[start..start + row_len].iter().enumerate() {
                    acc += (*v as f64) * self.weights[dy * row_len + i] as f64;
                }
            }
            acc + cfg.bias
        };

        for _ in 0..PLANT_MAX_SWEEPS {
            let mut worst = 0f64;
            for (t, n2) in targets.iter().zip(&masked_norm2) {
                if *n2 == 0.0 {
                    continue;
                }
                let z = dot(&data, t);
                let delta = if t.exact { t.logit - z } else { (t.logit - z).min(0.0) };
                worst = worst.max(delta.abs());
                if delta.abs() <= PLANT_TOLERANCE / 4.0 {
                    continue;
                }
                let step = delta / n2;
                for dy in 0..win {
                    let y = t.ay * s + dy;
                    if !(ry0..ry1).contains(&y) {
                        continue;
                    }
                    for dx in 0..win {
                        let x = t.ax * s + dx;
                        if !(rx0..rx1).contains(&x) {
                            continue;
                        }
                        for c in 0..CHANNELS {
                            let o = (y * width + x) * CHANNELS + c;
                            let wv = self.weights[dy * row_len + dx * CHANNELS + c] as f64;
                            data[o] = (data[o] as f64 + step * wv).clamp(0.0, 1.0) as f32;
                        }
                    }
                }
            }
            if worst < PLANT_TOLERANCE {
                break;
            }
        }

        let planted = img.with_data(data);
        for t in targets.iter().filter(|t| core.contains(&(t.ax, t.ay))) {
            let z = dot(planted.data(), t);
            if z < base - 1e-3 {
                return Err(Error::InfeasiblePlant(format!(
                    "anchor ({}, {}) reaches logit {z:.4}, needs {base:.4}",
                    t.ax, t.ay
                )));
            }
        }
        Ok(planted)
    }
}

/// Tiles `img` `k × k` times. With `resize_back`, each tile's contrast around
/// its per-channel mean is scaled by `degradation^(((i + j) mod k + 1) / k)`
/// for tile `(i, j)`, so copies on different anti-diagonal classes lose
/// different amounts of signal, and the tiled image keeps full resolution.
/// `k = 1` returns the image unchanged.
pub fn amplify(img: &Raster, k: usize, resize_back: bool, degradation: f64) -> Result<Raster> {
    if k == 0 {
        return Err(Error::param("k", "must be at least 1"));
    }
    if !(0.0..=1.0).contains(&degradation) {
        return Err(Error::param("degradation", "must lie in [0, 1]"));
    }
    if k == 1 {
        return Ok(img.clone());
    }
    let (h, w) = (img.height(), img.width());
    let (big_h, big_w) = (h * k, w * k);
    let mut data = vec![0f32; big_h * big_w * CHANNELS];
    let mut channel_mean = [0f64; CHANNELS];
    if resize_back {
        for (i, v) in img.data().iter().enumerate() {
            channel_mean[i % CHANNELS] += *v as f64;
        }
        channel_mean.iter_mut().for_each(|m| *m /= img.pixel_count() as f64);
    }
    for tj in 0..k {
        for ti in 0..k {
            let factor = if resize_back {
                degradation.powf(((ti + tj) % k + 1) as f64 / k as f64)
            } else {
                1.0
            };
            for y in 0..h {
                let src = &img.data()[y * w * CHANNELS..(y + 1) * w * CHANNELS];
                let start = ((tj * h + y) * big_w + ti * w) * CHANNELS;
                let dst = &mut data[start..start + w * CHANNELS];
                if factor == 1.0 {
                    dst.copy_from_slice(src);
                } else {
                    for (i, (d, s)) in dst.iter_mut().zip(src).enumerate() {
                        let m = channel_mean[i % CHANNELS];
                        *d = (m + factor * (*s as f64 - m)).clamp(0.0, 1.0) as f32;
                    }
                }
            }
        }
    }
    Ok(Raster::from_parts_unchecked(big_h, big_w, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{ClockSpec, PhaseNoise};

    fn detector() -> SyntheticDetector {
        SyntheticDetector::new(DetectorConfig::default()).unwrap()
    }

    fn gray(h: usize, w: usize) -> Raster {
        Raster::filled(h, w, 0.5).unwrap()
    }

    fn region(x0: f64, y0: f64, x1: f64, y1: f64) -> BoundingBox {
        BoundingBox::new(x0, y0, x1, y1).unwrap()
    }

    fn noiseless() -> Clock {
        Clock::new(ClockSpec::noiseless()).unwrap()
    }

    #[test]
    fn filter_is_zero_mean_with_configured_norm() {
        let d = detector();
        let sum: f64 = d.weights().iter().map(|w| *w as f64).sum();
        let norm: f64 = d.weights().iter().map(|w| (*w as f64).powi(2)).sum::<f64>().sqrt();
        assert!(sum.abs() < 1e-4);
        assert!((norm - 10.0).abs() < 1e-4);
    }

    #[test]
    fn black_image_has_no_candidates() {
        let d = detector();
        assert!(d.score_anchors(&Raster::black(64, 64).unwrap()).unwrap().is_empty());
        assert!(d.score_anchors(&gray(64, 96)).unwrap().is_empty());
    }

    #[test]
    fn planted_object_yields_requested_boxes() {
        let d = detector();
        let img = d
            .plant_object(&gray(64, 64), &region(8.0, 8.0, 56.0, 56.0), 0.9, 20)
            .unwrap();
        assert!(img.is_valid());
        let cands = d.score_anchors(&img).unwrap();
        let strong = cands.iter().filter(|c| c.score() >= 0.9 - 1e-4).count();
        assert!(strong >= 20, "{strong}");
        assert!(cands.len() >= 20);
        assert_eq!(d.score_anchors(&img).unwrap(), cands);
    }

    #[test]
    fn single_box_object_survives_as_one_detection() {
        let d = detector();
        let img = d
            .plant_object(&gray(64, 64), &region(12.0, 12.0, 52.0, 52.0), 0.95, 1)
            .unwrap();
        let (kept, obs) = d.detect(&img, &mut noiseless()).unwrap();
        assert!(obs.box_count >= 1);
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn planting_is_local() {
        let d = detector();
        let reg = region(32.0, 32.0, 64.0, 64.0);
        let img = d.plant_object(&gray(96, 96), &reg, 0.9, 4).unwrap();
        for y in 0..96 {
            for x in 0..96 {
                if !(32..64).contains(&x) || !(32..64).contains(&y) {
                    assert_eq!(img.get(x, y, 0), 0.5);
                }
            }
        }
        let mut erased = img.clone();
        erased.fill_rect(32, 32, 64, 64, 0.5);
        assert!(d.score_anchors(&erased).unwrap().is_empty());
    }

    #[test]
    fn two_disjoint_objects_give_two_iterations() {
        let d = detector();
        let img = d
            .plant_object(&gray(64, 160), &region(4.0, 12.0, 44.0, 52.0), 0.9, 6)
            .unwrap();
        let img = d.plant_object(&img, &region(112.0, 12.0, 152.0, 52.0), 0.9, 6).unwrap();
        let (kept, obs) = d.detect(&img, &mut noiseless()).unwrap();
        assert_eq!(kept.len(), 2);
        assert_eq!(obs.object_count, 2);
    }

    #[test]
    fn infeasible_requests_are_rejected() {
        let d = detector();
        assert!(d
            .plant_object(&gray(64, 64), &region(8.0, 8.0, 24.0, 24.0), 0.9, 50)
            .is_err());
        assert!(d
            .plant_object(&gray(64, 64), &region(8.0, 8.0, 56.0, 56.0), 0.5, 3)
            .is_err());
        let weak = SyntheticDetector::new(DetectorConfig {
            gain: 2.0,
            ..DetectorConfig::default()
        })
        .unwrap();
        let reachable: f64 = weak.weights().iter().map(|w| (*w as f64).max(0.0)).sum::<f64>() + weak.config().bias;
        let target = logistic(reachable + 0.5);
        assert!(target < 1.0);
        assert!(matches!(
            weak.plant_object(&gray(64, 64), &region(8.0, 8.0, 56.0, 56.0), target, 1),
            Err(Error::InfeasiblePlant(_))
        ));
    }

    #[test]
    fn black_image_timing_is_fixed_cost() {
        let d = detector();
        let (kept, obs) = d.detect(&Raster::black(64, 64).unwrap(), &mut noiseless()).unwrap();
        assert!(kept.is_empty());
        assert_eq!(obs.box_count, 0);
        assert_eq!(obs.nms_time, d.config().nms_cost.fixed_cost);
        assert_eq!(obs.total_time, obs.neural_time + obs.nms_time);
    }

    #[test]
    fn more_boxes_cost_more_nms_time() {
        let d = detector();
        let reg = region(8.0, 8.0, 56.0, 56.0);
        let time = |n| {
            let img = d.plant_object(&gray(64, 64), &reg, 0.9, n).unwrap();
            d.detect(&img, &mut noiseless()).unwrap().1.nms_time
        };
        assert!(time(30) > time(5));
    }

    #[test]
    fn neural_time_is_linear_in_area() {
        let cfg = DetectorConfig {
            neural_cost_fixed: 0.0,
            ..DetectorConfig::default()
        };
        let d = SyntheticDetector::new(cfg).unwrap();
        let small = d.detect(&Raster::black(416, 416).unwrap(), &mut noiseless()).unwrap().1;
        let large = d
            .detect(&Raster::black(416, 1664).unwrap(), &mut noiseless())
            .unwrap()
            .1;
        assert!((large.neural_time / small.neural_time - 4.0).abs() < 1e-12);
    }

    #[test]
    fn raising_confidence_never_lowers_box_count() {
        let d = detector();
        let reg = region(8.0, 8.0, 56.0, 56.0);
        let mut last = 0;
        for target in [0.65, 0.75, 0.85, 0.95] {
            let img = d.plant_object(&gray(64, 64), &reg, target, 9).unwrap();
            let b = d.score_anchors(&img).unwrap().len();
            assert!(b >= last, "{target}: {b} < {last}");
            last = b;
        }
    }

    #[test]
    fn tiling_copies_pixels_and_multiplies_candidates() {
        let d = detector();
        let img = d
            .plant_object(&gray(64, 64), &region(8.0, 8.0, 56.0, 56.0), 0.9, 12)
            .unwrap();
        assert_eq!(amplify(&img, 1, false, 1.0).unwrap(), img);
        let big = amplify(&img, 3, false, 1.0).unwrap();
        assert_eq!((big.height(), big.width()), (192, 192));
        for (x, y) in [(0, 0), (17, 40), (63, 63)] {
            for (i, j) in [(1, 0), (2, 2), (0, 1)] {
                assert_eq!(big.get(x + i * 64, y + j * 64, 2), img.get(x, y, 2));
            }
        }
        let b1 = d.score_anchors(&img).unwrap().len();
        let b3 = d.score_anchors(&big).unwrap().len();
        assert_eq!(b3, 9 * b1);
        let (kept, _) = d.detect(&big, &mut noiseless()).unwrap();
        assert_eq!(kept.len(), 9);
    }

    #[test]
    fn degraded_tiling_loses_copies() {
        let d = detector();
        let img = d
            .plant_object(&gray(32, 32), &region(4.0, 4.0, 28.0, 28.0), 0.8, 4)
            .unwrap();
        let full = amplify(&img, 3, true, 1.0).unwrap();
        let weak = amplify(&img, 3, true, 0.3).unwrap();
        let copies = |r: &Raster| d.decide(r).unwrap().len();
        assert_eq!(copies(&full), 9);
        assert!(copies(&weak) < 9);
    }

    #[test]
    fn repeats_report_the_median() {
        let d = detector();
        let spec = ClockSpec {
            repeats: 5,
            ..ClockSpec::modeled(PhaseNoise::gaussian(1e-4), 9)
        };
        let img = gray(64, 64);
        let (_, obs) = d.detect(&img, &mut Clock::new(spec).unwrap()).unwrap();
        let mut clock = Clock::new(spec).unwrap();
        let (n0, m0) = (
            d.config().neural_cost_fixed + d.config().neural_cost_per_pixel * 4096.0,
            d.config().nms_cost.fixed_cost,
        );
        let totals: Vec<f64> = (0..5)
            .map(|_| {
                let _: u64 = rand::Rng::random(clock.rng());
                n0 + clock.neural_noise() + m0 + clock.nms_noise()
            })
            .collect();
        assert_eq!(obs.total_time, stats::median(&totals).unwrap());
    }
}
