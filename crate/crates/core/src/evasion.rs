//! Timing-guided evolutionary evasion and its decision-only baseline.
//!
//! Each iteration of the timing attack checks whether the gadget is still
//! detected, times the amplified gadget, draws `p` random perturbations,
//! times each amplified population member and steps the gadget along the
//! fitness-weighted sum of the perturbations that made the detector faster.
//! Fewer candidate boxes mean less NMS work, so "faster" means "less
//! confident".
//!
//! Units: pixels are stored in `[0, 1]` and `lambda` is the unit-scale
//! Frobenius length of each step (before clipping), while the population
//! `radius` is given on the 0–255 scale.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::amplify;
use crate::measurement::DetectorHandle;
use crate::raster::Raster;
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvasionConfig {
    pub population_size: usize,
    /// Half-width of the uniform perturbation on the 0–255 scale.
    pub radius: f64,
    /// Step length in unit-scale Frobenius norm.
    pub lambda: f64,
    pub amplification_k: usize,
    pub max_iterations: usize,
    /// Stop before exceeding this many detector queries.
    pub query_budget: Option<u64>,
    pub rng_seed: u64,
    pub clip_to_valid: bool,
    /// Check detection on the amplified gadget instead of the original.
    pub check_amplified: bool,
    /// Amplify with per-tile attenuation (see [`amplify`]).
    pub resize_back: bool,
    pub degradation: f64,
}

impl Default for EvasionConfig {
    fn default() -> Self {
        Self {
            population_size: 20,
            radius: 25.0,
            lambda: 0.5,
            amplification_k: 3,
            max_iterations: 500,
            query_budget: None,
            rng_seed: 0,
            clip_to_valid: true,
            check_amplified: false,
            resize_back: false,
            degradation: 1.0,
        }
    }
}

impl EvasionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population_size < 2 {
            return Err(Error::param("population_size", "must be at least 2"));
        }
        if !(self.radius.is_finite() && self.radius > 0.0) {
            return Err(Error::param("radius", "must be positive"));
        }
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(Error::param("lambda", "must be positive"));
        }
        if self.amplification_k == 0 {
            return Err(Error::param("amplification_k", "must be at least 1"));
        }
        if self.max_iterations == 0 {
            return Err(Error::param("max_iterations", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.degradation) {
            return Err(Error::param("degradation", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Queries used by `iterations` full timing-attack iterations plus the
    /// final detection check.
    pub fn timing_queries(&self, iterations: usize) -> u64 {
        (iterations * (self.population_size + 2) + 1) as u64
    }

    /// Same for the decision baseline, which does not time the gadget.
    pub fn baseline_queries(&self, iterations: usize) -> u64 {
        (iterations * (self.population_size + 1) + 1) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    /// Pixel values in `[0, 1]`.
    Unit,
    /// Pixel values in `[0, 255]`.
    Byte,
}

impl Scale {
    fn factor(self) -> f64 {
        match self {
            Scale::Unit => 1.0,
            Scale::Byte => 255.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub l2: f64,
    pub l_inf: f64,
    pub mse: f64,
    pub scale: Scale,
}

pub fn perturbation_metrics(original: &Raster, adversarial: &Raster, scale: Scale) -> Result<PerturbationReport> {
    if !original.same_shape(adversarial) {
        return Err(Error::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            original.height(),
            original.width(),
            adversarial.height(),
            adversarial.width()
        )));
    }
    let f = scale.factor();
    let (mut sq, mut max) = (0f64, 0f64);
    for (a, b) in original.data().iter().zip(adversarial.data()) {
        let d = (*a as f64 - *b as f64).abs() * f;
        sq += d * d;
        max = max.max(d);
    }
    Ok(PerturbationReport {
        l2: sq.sqrt(),
        l_inf: max,
        mse: sq / original.len() as f64,
        scale,
    })
}

/// `fitness_j = |Δ_j| / Σ|Δ|` and `direction_j = sign(−Δ_j)` with
/// `Δ_j = member_time_j − gadget_time`. All-zero when no member differs.
pub fn fitness_and_direction(gadget_time: f64, member_times: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let deltas: Vec<f64> = member_times.iter().map(|t| t - gadget_time).collect();
    let total: f64 = deltas.iter().map(|d| d.abs()).sum();
    if total == 0.0 || !total.is_finite() {
        return (vec![0.0; deltas.len()], vec![0.0; deltas.len()]);
    }
    let fitness = deltas.iter().map(|d| d.abs() / total).collect();
    let direction = deltas
        .iter()
        .map(|d| {
            if *d < 0.0 {
                1.0
            } else if *d > 0.0 {
                -1.0
            } else {
                0.0
            }
        })
        .collect();
    (fitness, direction)
}

/// Moves `gadget` by `step` (unit-scale Frobenius norm) along the normalized
/// fitness-weighted perturbation sum. Returns the new gadget and the norm of
/// the raw mutation; a zero mutation leaves the gadget unchanged.
pub fn breed(
    gadget: &Raster,
    perturbations: &[Vec<f32>],
    fitness: &[f64],
    direction: &[f64],
    step: f64,
    clip_to_valid: bool,
) -> Result<(Raster, f64)> {
    if perturbations.len() != fitness.len() || fitness.len() != direction.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} perturbations, {} fitness values, {} directions",
            perturbations.len(),
            fitness.len(),
            direction.len()
        )));
    }
    let mut mutation = vec![0f64; gadget.len()];
    for ((pert, f), d) in perturbations.iter().zip(fitness).zip(direction) {
        if pert.len() != gadget.len() {
            return Err(Error::ShapeMismatch("perturbation and gadget sizes differ".into()));
        }
        let w = f * d;
        if w == 0.0 {
            continue;
        }
        for (m, p) in mutation.iter_mut().zip(pert) {
            *m += w * *p as f64;
        }
    }
    let norm = mutation.iter().map(|m| m * m).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Ok((gadget.clone(), 0.0));
    }
    let scale = step / norm;
    let data = gadget
        .data()
        .iter()
        .zip(&mutation)
        .map(|(g, m)| {
            let v = *g as f64 + scale * m;
            (if clip_to_valid { v.clamp(0.0, 1.0) } else { v }) as f32
        })
        .collect();
    Ok((gadget.with_data(data), norm))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// First 8 bytes of the SHA-256 of the gadget's raw encoding.
    pub gadget_id: String,
    /// `None` for the decision baseline, which does not time the gadget.
    pub gadget_time: Option<f64>,
    pub member_times: Vec<f64>,
    pub member_detected: Vec<bool>,
    pub fitness: Vec<f64>,
    pub direction: Vec<f64>,
    pub mutation_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvasionTrace {
    pub iterations: Vec<IterationRecord>,
    pub query_count: u64,
    /// Whether the final gadget is still detected.
    pub detected: bool,
    pub perturbation: PerturbationReport,
}

impl EvasionTrace {
    pub fn evaded(&self) -> bool {
        !self.detected
    }

    /// Unit-scale L2 budget, infinite when the attack failed.
    pub fn budget(&self) -> f64 {
        if self.detected {
            f64::INFINITY
        } else {
            self.perturbation.l2
        }
    }
}

pub fn snapshot_id(img: &Raster) -> String {
    let digest = Sha256::digest(img.encode_raw());
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Timing,
    Decision,
}

fn amplified(img: &Raster, k: usize, cfg: &EvasionConfig) -> Result<Raster> {
    amplify(img, k, cfg.resize_back, cfg.degradation)
}

fn run<H: DetectorHandle + ?Sized>(
    handle: &mut H,
    gadget0: &Raster,
    cfg: &EvasionConfig,
    mode: Mode,
) -> Result<(Raster, EvasionTrace)> {
    cfg.validate()?;
    let p = cfg.population_size;
    let k = if mode == Mode::Timing { cfg.amplification_k } else { 1 };
    let per_iteration = match mode {
        Mode::Timing => p as u64 + 2,
        Mode::Decision => p as u64 + 1,
    };
    let mut rng = seed::stream_rng(cfg.rng_seed, "evasion.population");
    let radius = cfg.radius / 255.0;
    let step = cfg.lambda;
    let check = |img: &Raster| -> Result<Raster> {
        if cfg.check_amplified && mode == Mode::Timing {
            amplified(img, k, cfg)
        } else {
            Ok(img.clone())
        }
    };

    let mut gadget = gadget0.clone();
    let mut queries = 0u64;
    let mut records = Vec::new();
    let mut detected = true;
    for i in 0..=cfg.max_iterations {
        let budget_left = |q: u64, need: u64| cfg.query_budget.is_none_or(|b| q + need <= b);
        if !budget_left(queries, 1) {
            break;
        }
        queries += 1;
        detected = handle.query(&check(&gadget)?)?.detected();
        if !detected || i == cfg.max_iterations || !budget_left(queries, per_iteration) {
            break;
        }
        let gadget_time = if mode == Mode::Timing {
            queries += 1;
            Some(handle.query(&amplified(&gadget, k, cfg)?)?.total_time)
        } else {
            None
        };
        let mut perts = Vec::with_capacity(p);
        let mut member_times = Vec::with_capacity(p);
        let mut member_detected = Vec::with_capacity(p);
        for _ in 0..p {
            let pert: Vec<f32> = (0..gadget.len())
                .map(|_| (rng.random_range(-1.0..=1.0) * radius) as f32)
                .collect();
            let member = gadget.with_data(
                gadget
                    .data()
                    .iter()
                    .zip(&pert)
                    .map(|(g, d)| (g + d).clamp(0.0, 1.0))
                    .collect(),
            );
            queries += 1;
            let obs = handle.query(&amplified(&member, k, cfg)?)?;
            member_times.push(obs.total_time);
            member_detected.push(obs.detected());
            perts.push(pert);
        }
        let (fitness, direction) = match gadget_time {
            Some(t) => fitness_and_direction(t, &member_times),
            None => (
                member_detected
                    .iter()
                    .map(|d| if *d { -1.0 / p as f64 } else { 1.0 / p as f64 })
                    .collect(),
                vec![1.0; p],
            ),
        };
        let (next, mutation_norm) = breed(&gadget, &perts, &fitness, &direction, step, cfg.clip_to_valid)?;
        records.push(IterationRecord {
            iteration: i,
            gadget_id: snapshot_id(&gadget),
            gadget_time,
            member_times,
            member_detected,
            fitness,
            direction,
            mutation_norm,
        });
        gadget = next;
    }
    let perturbation = perturbation_metrics(gadget0, &gadget, Scale::Unit)?;
    Ok((
        gadget,
        EvasionTrace {
            iterations: records,
            query_count: queries,
            detected,
            perturbation,
        },
    ))
}

/// Timing-leakage evasion. Returns the final gadget and its trace; running
/// out of iterations or budget is reported through `trace.detected`.
pub fn run_timing_attack<H: DetectorHandle + ?Sized>(
    handle: &mut H,
    gadget0: &Raster,
    cfg: &EvasionConfig,
) -> Result<(Raster, EvasionTrace)> {
    run(handle, gadget0, cfg, Mode::Timing)
}

/// Decision-only baseline: member fitness is `+1/p` when the member evades
/// and `−1/p` when it is detected; no amplification.
pub fn run_decision_baseline<H: DetectorHandle + ?Sized>(
    handle: &mut H,
    gadget0: &Raster,
    cfg: &EvasionConfig,
) -> Result<(Raster, EvasionTrace)> {
    run(handle, gadget0, cfg, Mode::Decision)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::ClockSpec;
    use crate::detector::{DetectorConfig, SyntheticDetector};
    use crate::geometry::BoundingBox;
    use crate::measurement::LocalDetector;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn fitness_examples() {
        let (f, d) = fitness_and_direction(0.100, &[0.090, 0.110]);
        assert!(close(&f, &[0.5, 0.5]) && d == [1.0, -1.0]);
        let (f, d) = fitness_and_direction(0.100, &[0.070, 0.090]);
        assert!(close(&f, &[0.75, 0.25]) && d == [1.0, 1.0]);
        let (f, _) = fitness_and_direction(0.100, &[0.100, 0.100]);
        assert_eq!(f, [0.0, 0.0]);
    }

    fn gray() -> Raster {
        Raster::filled(32, 32, 0.5).unwrap()
    }

    #[test]
    fn breed_single_member_steps_along_it() {
        let g = gray();
        let pert: Vec<f32> = (0..g.len()).map(|i| ((i % 7) as f32 - 3.0) * 0.01).collect();
        let norm = pert.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        let (next, m) = breed(&g, std::slice::from_ref(&pert), &[1.0], &[1.0], 0.5, false).unwrap();
        assert!((m - norm).abs() < 1e-9);
        for (i, v) in next.data().iter().enumerate() {
            let want = 0.5 + 0.5 * pert[i] as f64 / norm;
            assert!((*v as f64 - want).abs() < 1e-6);
        }
    }

    #[test]
    fn breed_cancelling_members_leave_gadget() {
        let g = gray();
        let pert = vec![0.1f32; g.len()];
        let (next, m) = breed(&g, &[pert.clone(), pert], &[0.5, 0.5], &[1.0, -1.0], 0.5, true).unwrap();
        assert_eq!(m, 0.0);
        assert_eq!(next, g);
    }

    #[test]
    fn metrics_examples() {
        let a = gray();
        let zero = perturbation_metrics(&a, &a, Scale::Unit).unwrap();
        assert_eq!((zero.l2, zero.l_inf, zero.mse), (0.0, 0.0, 0.0));
        let mut b = a.clone();
        b.set(3, 5, 1, 1.0);
        let r = perturbation_metrics(&a, &b, Scale::Unit).unwrap();
        assert_eq!((r.l2, r.l_inf), (0.5, 0.5));
        assert!((r.mse - 0.25 / a.len() as f64).abs() < 1e-18);
        let byte = perturbation_metrics(&a, &b, Scale::Byte).unwrap();
        assert!((byte.l_inf - 127.5).abs() < 1e-9);
        assert!(perturbation_metrics(&a, &Raster::black(64, 32).unwrap(), Scale::Unit).is_err());
    }

    fn setup() -> (SyntheticDetector, Raster) {
        let det = SyntheticDetector::new(DetectorConfig::default()).unwrap();
        let region = BoundingBox::new(4.0, 4.0, 28.0, 28.0).unwrap();
        let gadget = det.plant_object(&gray(), &region, 0.65, 4).unwrap();
        (det, gadget)
    }

    #[test]
    fn undetected_gadget_returns_immediately() {
        let (det, _) = setup();
        let mut local = LocalDetector::new(&det, ClockSpec::noiseless()).unwrap();
        let g = gray();
        let (out, trace) = run_timing_attack(&mut local, &g, &EvasionConfig::default()).unwrap();
        assert_eq!(out, g);
        assert_eq!(trace.query_count, 1);
        assert!(trace.evaded());
        assert_eq!(trace.perturbation.l2, 0.0);
        let (_, trace) = run_decision_baseline(&mut local, &g, &EvasionConfig::default()).unwrap();
        assert_eq!(trace.query_count, 1);
    }

    #[test]
    fn weak_object_is_evaded_with_exact_query_accounting() {
        let (det, gadget) = setup();
        let mut local = LocalDetector::new(&det, ClockSpec::noiseless()).unwrap();
        let cfg = EvasionConfig::default();
        let (out, trace) = run_timing_attack(&mut local, &gadget, &cfg).unwrap();
        assert!(trace.evaded(), "not evaded after {} iterations", trace.iterations.len());
        assert!(det.decide(&out).unwrap().is_empty());
        assert!(trace.perturbation.l2 > 0.0);
        assert_eq!(trace.query_count, cfg.timing_queries(trace.iterations.len()));
        for rec in &trace.iterations {
            let s: f64 = rec.fitness.iter().sum();
            assert!(s == 0.0 || (s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn exhausted_iterations_report_detection() {
        let (det, gadget) = setup();
        let mut local = LocalDetector::new(&det, ClockSpec::noiseless()).unwrap();
        let cfg = EvasionConfig {
            max_iterations: 2,
            ..EvasionConfig::default()
        };
        let (_, trace) = run_timing_attack(&mut local, &gadget, &cfg).unwrap();
        assert!(trace.detected);
        assert_eq!(trace.iterations.len(), 2);
        assert_eq!(trace.query_count, cfg.timing_queries(2));
        assert_eq!(trace.budget(), f64::INFINITY);
        let (_, trace) = run_decision_baseline(&mut local, &gadget, &cfg).unwrap();
        assert_eq!(trace.query_count, cfg.baseline_queries(2));
    }

    #[test]
    fn query_budget_is_respected() {
        let (det, gadget) = setup();
        let mut local = LocalDetector::new(&det, ClockSpec::noiseless()).unwrap();
        let cfg = EvasionConfig {
            query_budget: Some(50),
            ..EvasionConfig::default()
        };
        let (_, trace) = run_timing_attack(&mut local, &gadget, &cfg).unwrap();
        assert!(trace.query_count <= 50);
        let (_, trace) = run_decision_baseline(&mut local, &gadget, &cfg).unwrap();
        assert!(trace.query_count <= 50);
    }

    #[test]
    fn fixed_seed_reproduces_trace() {
        let (det, gadget) = setup();
        let cfg = EvasionConfig {
            max_iterations: 5,
            rng_seed: 11,
            ..EvasionConfig::default()
        };
        let mut a = LocalDetector::new(&det, ClockSpec::noiseless()).unwrap();
        let mut b = LocalDetector::new(&det, ClockSpec::noiseless()).unwrap();
        let (ga, ta) = run_timing_attack(&mut a, &gadget, &cfg).unwrap();
        let (gb, tb) = run_timing_attack(&mut b, &gadget, &cfg).unwrap();
        assert_eq!(ga.encode_raw(), gb.encode_raw());
        assert_eq!(ta, tb);
    }

    #[test]
    fn baseline_with_all_members_detected_steps_against_their_mean() {
        let g = gray();
        let perts: Vec<Vec<f32>> = (0..3)
            .map(|j| (0..g.len()).map(|i| ((i * (j + 2)) % 5) as f32 * 0.01).collect())
            .collect();
        let fitness = vec![-1.0 / 3.0; 3];
        let (next, _) = breed(&g, &perts, &fitness, &[1.0; 3], 0.1, false).unwrap();
        let mean: Vec<f64> = (0..g.len())
            .map(|i| perts.iter().map(|p| p[i] as f64).sum::<f64>() / 3.0)
            .collect();
        let norm = mean.iter().map(|m| m * m).sum::<f64>().sqrt();
        for (i, v) in next.data().iter().enumerate() {
            assert!((*v as f64 - (0.5 - 0.1 * mean[i] / norm)).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn fitness_sums_to_one_and_matches_signed_form(
            gadget in 0.01f64..1.0,
            members in proptest::collection::vec(0.01f64..1.0, 2..30)
        ) {
            let (f, d) = fitness_and_direction(gadget, &members);
            let total: f64 = members.iter().map(|m| (m - gadget).abs()).sum();
            if total > 0.0 {
                prop_assert!((f.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for j in 0..members.len() {
                    let signed = (gadget - members[j]) / total;
                    prop_assert!((d[j] * f[j] - signed).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn metrics_match_naive_loop(
            a in proptest::collection::vec(0.0f32..=1.0, 32 * 32 * 3),
            b in proptest::collection::vec(0.0f32..=1.0, 32 * 32 * 3)
        ) {
            let (ra, rb) = (Raster::new(32, 32, a.clone()).unwrap(), Raster::new(32, 32, b.clone()).unwrap());
            let r = perturbation_metrics(&ra, &rb, Scale::Byte).unwrap();
            let mut sum = 0.0;
            let mut max = 0.0f64;
            for i in 0..a.len() {
                let d = (a[i] as f64 * 255.0 - b[i] as f64 * 255.0).abs();
                sum += d * d;
                if d > max {
                    max = d;
                }
            }
            prop_assert!((r.l2 - sum.sqrt()).abs() < 1e-9 * (1.0 + sum.sqrt()));
            prop_assert!((r.l_inf - max).abs() < 1e-9);
            prop_assert!((r.mse - sum / a.len() as f64).abs() < 1e-9);
        }
    }
}
