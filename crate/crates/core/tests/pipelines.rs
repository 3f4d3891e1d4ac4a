use nmsleak_core::clock::{ClockSpec, PhaseNoise};
use nmsleak_core::detector::{DetectorConfig, SyntheticDetector};
use nmsleak_core::evasion::{run_decision_baseline, run_timing_attack, EvasionConfig};
use nmsleak_core::inference::{end_to_end_inference, Decision};
use nmsleak_core::measurement::{calibrate_neural_model, default_calibration_sizes, leakage_report, LocalDetector};
use nmsleak_core::scenes::{MembershipFamily, SceneFamily};
use nmsleak_core::Raster;

fn detector() -> SyntheticDetector {
    SyntheticDetector::new(DetectorConfig::default()).unwrap()
}

fn rasters(det: &SyntheticDetector, count: usize, heavy: f64, seed: u64) -> Vec<Raster> {
    MembershipFamily::default()
        .generate(det, count, heavy, seed)
        .unwrap()
        .into_iter()
        .map(|s| s.raster)
        .collect()
}

#[test]
fn leakage_grows_with_amplification() {
    let det = detector();
    let scenes: Vec<Raster> = SceneFamily::profile()
        .generate(&det, 60, 11)
        .unwrap()
        .into_iter()
        .map(|s| s.raster)
        .collect();
    let mut local = LocalDetector::new(&det, ClockSpec::modeled(PhaseNoise::gaussian(2e-5), 3)).unwrap();
    let model = calibrate_neural_model(&mut local, &default_calibration_sizes()).unwrap();
    let (rows, records) = leakage_report(&mut local, &scenes, &[1, 3], &model).unwrap();
    assert_eq!(records.len(), 120);
    assert!(rows[1].rho_time > rows[0].rho_time);
    assert!(rows[1].rho_estimated > 0.8);
}

#[test]
fn timing_attack_beats_baseline_on_a_confident_gadget() {
    let det = detector();
    let gadget = SceneFamily::gadget()
        .scene_with(&det, &mut nmsleak_core::seed::rng(1), 0, 6, 0.85)
        .unwrap();
    let cfg = EvasionConfig {
        max_iterations: 300,
        rng_seed: 4,
        ..Default::default()
    };
    let clock = ClockSpec::modeled(PhaseNoise::gaussian(5e-5), 4);
    let (_, timing) = run_timing_attack(&mut LocalDetector::new(&det, clock).unwrap(), &gadget.raster, &cfg).unwrap();
    let budget = EvasionConfig {
        query_budget: Some(cfg.timing_queries(300)),
        max_iterations: usize::MAX,
        ..cfg
    };
    let (_, base) =
        run_decision_baseline(&mut LocalDetector::new(&det, clock).unwrap(), &gadget.raster, &budget).unwrap();
    assert!(timing.evaded());
    assert!(base.query_count <= cfg.timing_queries(300));
    assert!(timing.budget() <= base.budget());
}

#[test]
fn dataset_inference_separates_member_and_nonmember_targets() {
    let det = detector();
    let member = rasters(&det, 400, 0.3, 1);
    let nonmember = rasters(&det, 400, 0.05, 2);
    let mut local = LocalDetector::new(&det, ClockSpec::modeled(PhaseNoise::gaussian(5e-6), 5)).unwrap();
    let model = calibrate_neural_model(&mut local, &default_calibration_sizes()).unwrap();
    let as_member = end_to_end_inference(
        &mut local,
        &model,
        &member,
        &nonmember,
        &rasters(&det, 200, 0.3, 3),
        None,
        5,
    )
    .unwrap();
    assert_eq!(as_member.verdict.decision, Decision::Member);
    let tau = as_member.verdict.tau;
    let as_nonmember = end_to_end_inference(
        &mut local,
        &model,
        &member,
        &nonmember,
        &rasters(&det, 200, 0.05, 4),
        Some(tau),
        5,
    )
    .unwrap();
    assert_eq!(as_nonmember.verdict.decision, Decision::Nonmember);
    let unreachable = end_to_end_inference(&mut local, &model, &member, &nonmember, &member, Some(1e3), 5).unwrap();
    assert_eq!(unreachable.verdict.mu_hat_m, 0.0);
    assert_eq!(unreachable.verdict.decision, Decision::Nonmember);
}
