use std::time::{Duration, Instant};

use nmsleak_core::clock::{ClockSpec, PhaseNoise};
use nmsleak_core::detector::{amplify, DecisionBox, DetectorConfig, SyntheticDetector};
use nmsleak_core::measurement::{calibrate_neural_model, default_calibration_sizes, DetectorHandle};
use nmsleak_core::noise::NoiseSpec;
use nmsleak_core::scenes::SceneFamily;
use nmsleak_core::{seed, stats, Raster};
use nmsleak_service::client::TransportKind;
use nmsleak_service::{serve, ClientError, Endpoint, PayloadFormat, RemoteDetector, ServiceConfig, ServiceHandle};

fn detector() -> SyntheticDetector {
    SyntheticDetector::new(DetectorConfig::default()).unwrap()
}

fn start(det: SyntheticDetector, config: ServiceConfig) -> ServiceHandle {
    serve(
        det,
        ServiceConfig {
            bind: "127.0.0.1:0".into(),
            ..config
        },
    )
    .unwrap()
}

fn endpoint(handle: &ServiceHandle, format: PayloadFormat) -> Endpoint {
    Endpoint::new(&handle.url(), format, Duration::from_secs(10))
}

fn post(url: &str, body: &[u8]) -> (u16, serde_json::Value) {
    let resp = match ureq::post(url).send_bytes(body) {
        Ok(r) => r,
        Err(ureq::Error::Status(_, r)) => r,
        Err(e) => panic!("{e}"),
    };
    (
        resp.status(),
        serde_json::from_str(&resp.into_string().unwrap()).unwrap(),
    )
}

#[test]
fn black_raster_has_no_detections() {
    let server = start(detector(), ServiceConfig::default());
    for format in [PayloadFormat::Raw, PayloadFormat::Png] {
        let (resp, _) = endpoint(&server, format)
            .timed_query(&Raster::black(64, 64).unwrap(), 1)
            .unwrap();
        assert!(resp.detections.is_empty());
    }
}

#[test]
fn malformed_requests_are_rejected_with_reasons() {
    let server = start(detector(), ServiceConfig::default());
    let url = format!("{}/detect", server.url());
    let mut raw = Raster::black(32, 32).unwrap().encode_raw();
    raw[4..8].copy_from_slice(&33u32.to_le_bytes());
    let (status, body) = post(&url, &raw);
    assert_eq!((status, body["error"].as_str()), (400, Some("bad_dimensions")));
    let (status, body) = post(&url, b"not an image");
    assert_eq!((status, body["error"].as_str()), (400, Some("unknown_format")));
    let (status, _) = post(&format!("{}/other", server.url()), b"");
    assert_eq!(status, 404);
    let get = ureq::get(&url).call();
    assert!(matches!(get, Err(ureq::Error::Status(405, _))));
}

#[test]
fn remote_detections_match_in_process() {
    let det = detector();
    let scenes = SceneFamily::profile().generate(&det, 5, 8).unwrap();
    let server = start(det.clone(), ServiceConfig::default());
    let mut ep = endpoint(&server, PayloadFormat::Raw);
    for scene in &scenes {
        let (resp, _) = ep.timed_query(&scene.raster, 1).unwrap();
        let local: Vec<DecisionBox> = det
            .decide(&scene.raster)
            .unwrap()
            .iter()
            .map(DecisionBox::from)
            .collect();
        assert!(!resp.detections.is_empty());
        assert_eq!(resp.detections, local);
    }
}

#[test]
fn unreachable_endpoint_is_a_transport_error() {
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let mut ep = Endpoint::new(
        &format!("http://127.0.0.1:{port}"),
        PayloadFormat::Raw,
        Duration::from_secs(2),
    );
    let err = ep.timed_query(&Raster::black(32, 32).unwrap(), 1).unwrap_err();
    assert!(matches!(
        err,
        ClientError::Transport {
            kind: TransportKind::ConnectionRefused,
            ..
        }
    ));
}

#[test]
fn aggregate_is_the_median_of_repeats() {
    let server = start(detector(), ServiceConfig::default());
    let (_, agg) = endpoint(&server, PayloadFormat::Raw)
        .timed_query(&Raster::black(32, 32).unwrap(), 5)
        .unwrap();
    assert_eq!(agg.samples.len(), 5);
    let rtts: Vec<f64> = agg.samples.iter().map(|s| s.rtt).collect();
    assert_eq!(agg.median, stats::median(&rtts).unwrap());
    assert!(rtts.iter().all(|r| *r > 0.0));
}

#[test]
fn requests_are_served_one_at_a_time() {
    let det = SyntheticDetector::new(DetectorConfig {
        neural_cost_fixed: 0.1,
        ..DetectorConfig::default()
    })
    .unwrap();
    let server = start(det, ServiceConfig::default());
    let url = server.url();
    let start = Instant::now();
    let clients: Vec<_> = (0..2)
        .map(|_| {
            let url = url.clone();
            std::thread::spawn(move || {
                Endpoint::new(&url, PayloadFormat::Raw, Duration::from_secs(10))
                    .timed_query(&Raster::black(32, 32).unwrap(), 1)
                    .unwrap()
            })
        })
        .collect();
    for c in clients {
        c.join().unwrap();
    }
    assert!(start.elapsed() >= Duration::from_millis(200));
}

#[test]
fn rtt_tracks_candidate_count() {
    let det = detector();
    let scenes = SceneFamily::profile().generate(&det, 100, 21).unwrap();
    let server = start(det.clone(), ServiceConfig::default());
    // Amplified and repeated as an attacker would, so scheduler noise from
    // concurrently running tests stays well below the NMS signal.
    let mut remote = RemoteDetector::new(endpoint(&server, PayloadFormat::Raw), 5);
    let mut b = Vec::new();
    let mut rtt = Vec::new();
    for s in &scenes {
        let img = amplify(&s.raster, 3, false, 1.0).unwrap();
        b.push(det.score_anchors(&img).unwrap().len() as f64);
        rtt.push(remote.query(&img).unwrap().total_time);
    }
    let rho = stats::spearman(&b, &rtt).unwrap();
    assert!(rho >= 0.8, "rho = {rho}");
}

#[test]
fn remote_calibration_recovers_the_slope() {
    let det = detector();
    let truth = det.config().neural_cost_per_pixel;
    let jitter = NoiseSpec::lognormal_with_moments(0.0, 5e-4, 5e-4).unwrap();
    let server = start(
        det,
        ServiceConfig {
            clock: ClockSpec::modeled(PhaseNoise::default(), seed::substream(1, "clock")),
            jitter,
            jitter_seed: 2,
            ..ServiceConfig::default()
        },
    );
    // Black images are exact in PNG, and the small bodies keep upload time
    // out of the fitted slope.
    let mut remote = RemoteDetector::new(endpoint(&server, PayloadFormat::Png), 1);
    let model = calibrate_neural_model(&mut remote, &default_calibration_sizes()).unwrap();
    let z = (model.slope_per_pixel - truth).abs() / model.slope_std_error;
    assert!(z < 3.0, "slope {} vs {truth}, z = {z}", model.slope_per_pixel);
}
