//! The detection service: loopback parity campaign and long-running mode.

use std::time::Duration;

use nmsleak_core::detector::amplify;
use nmsleak_core::measurement::{
    calibrate_neural_model, default_calibration_sizes, estimate_nms_time, DetectorHandle, LocalDetector,
};
use nmsleak_core::noise::NoiseSpec;
use nmsleak_core::{stats, Raster};
use nmsleak_service::{resolve_bind, serve, Endpoint, PayloadFormat, RemoteDetector, ServiceConfig, ServiceHandle};

use super::leakage::profile_scenes;
use super::{clock_spec, detector, stream, Result};
use crate::config::RunConfig;
use crate::output::{num, Check, Outcome, Table};
use crate::CliError;

const TIMEOUT: Duration = Duration::from_secs(30);

fn start(cfg: &RunConfig, sigma: f64, jitter: NoiseSpec, bind: String) -> Result<ServiceHandle> {
    serve(
        detector(cfg)?,
        ServiceConfig {
            bind,
            clock: clock_spec(cfg, sigma, stream(cfg, "clock.service")),
            jitter,
            jitter_seed: stream(cfg, "service.jitter"),
            workers: cfg.serve.workers,
            ..ServiceConfig::default()
        },
    )
    .map_err(|e| CliError::Runtime(e.to_string()))
}

#[derive(Debug, Clone)]
pub struct ParityResult {
    pub sigma: f64,
    pub mean_rtt: f64,
    pub jitter: NoiseSpec,
    /// `(scene, B, local estimated NMS time, remote RTT)`.
    pub scenes: Vec<(usize, usize, f64, f64)>,
    pub rho_local: f64,
    pub rho_remote: f64,
}

/// Times the same amplified scenes in process and through a loopback
/// server with lognormal jitter scaled to the jitter-free mean RTT.
pub fn parity(cfg: &RunConfig) -> Result<ParityResult> {
    let p = &cfg.serve;
    let det = detector(cfg)?;
    let (scenes, sigma) = profile_scenes(cfg, &det, p.scenes)?;
    let images = scenes
        .iter()
        .map(|s| amplify(s, p.k, false, 1.0))
        .collect::<nmsleak_core::Result<Vec<Raster>>>()?;

    let mut local = LocalDetector::new(&det, clock_spec(cfg, sigma, stream(cfg, "clock.profile")))?;
    let model = calibrate_neural_model(&mut local, &default_calibration_sizes())?;
    let mut rows = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let (_, obs) = local.observe(img)?;
        rows.push((
            i,
            obs.box_count,
            estimate_nms_time(&model, obs.total_time, img.pixel_count()),
            0.0,
        ));
    }

    let loopback = "127.0.0.1:0".to_owned();
    let mean_rtt = {
        let server = start(cfg, sigma, NoiseSpec::None, loopback.clone())?;
        let mut remote = RemoteDetector::new(Endpoint::new(&server.url(), PayloadFormat::Raw, TIMEOUT), 1);
        let mut rtts = Vec::new();
        for img in images.iter().cycle().take(p.pilot_queries) {
            rtts.push(remote.query(img)?.total_time);
        }
        stats::mean(&rtts)
    };
    let jitter = if p.jitter_fraction > 0.0 {
        NoiseSpec::lognormal_with_moments(0.0, p.jitter_fraction * mean_rtt, p.jitter_fraction * mean_rtt)?
    } else {
        NoiseSpec::None
    };
    let server = start(cfg, sigma, jitter, loopback)?;
    let mut remote = RemoteDetector::new(Endpoint::new(&server.url(), PayloadFormat::Raw, TIMEOUT), p.repeats);
    for (row, img) in rows.iter_mut().zip(&images) {
        row.3 = remote.query(img)?.total_time;
    }
    let b: Vec<f64> = rows.iter().map(|r| r.1 as f64).collect();
    let est: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let rtt: Vec<f64> = rows.iter().map(|r| r.3).collect();
    Ok(ParityResult {
        sigma,
        mean_rtt,
        jitter,
        rho_local: stats::spearman(&b, &est)?,
        rho_remote: stats::spearman(&b, &rtt)?,
        scenes: rows,
    })
}

impl ParityResult {
    pub fn outcome(&self) -> Outcome {
        let mut out = Outcome::default();
        let mut t = Table::new("rtt", &["scene_id", "B", "local_estimated_nms_time", "rtt"]);
        for (i, b, e, r) in &self.scenes {
            t.push(vec![i.to_string(), b.to_string(), num(*e), num(*r)]);
        }
        out.tables = vec![t];
        out.metric("sigma", self.sigma);
        out.metric("mean_rtt", self.mean_rtt);
        out.metric("jitter", self.jitter);
        out.metric("rho_local", self.rho_local);
        out.metric("rho_remote", self.rho_remote);
        out.line(format!(
            "Spearman(B, time): local {:.4}, remote RTT {:.4} (mean jitter-free RTT {:.3e} s)",
            self.rho_local, self.rho_remote, self.mean_rtt
        ));
        let gap = (self.rho_local - self.rho_remote).abs();
        out.checks
            .push(Check::new("remote_parity", gap <= 0.1, format!("|{gap:.4}| <= 0.1")));
        out
    }
}

/// Serves until killed, or for `serve.duration_secs`. Returns the address
/// that was bound.
pub fn serve_blocking(cfg: &RunConfig, announce: impl FnOnce(&str)) -> Result<String> {
    let jitter = match cfg.serve.jitter_secs {
        Some(j) => NoiseSpec::lognormal_with_moments(0.0, j, j)?,
        None => NoiseSpec::None,
    };
    let sigma = cfg.clock.sigma.unwrap_or(0.0);
    let server = start(cfg, sigma, jitter, resolve_bind(cfg.serve.bind.as_deref()))?;
    let url = server.url();
    announce(&url);
    match cfg.serve.duration_secs {
        Some(secs) => std::thread::sleep(Duration::from_secs_f64(secs.max(0.0))),
        None => server.join(),
    }
    Ok(url)
}
