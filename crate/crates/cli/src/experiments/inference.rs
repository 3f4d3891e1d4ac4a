//! Dataset inference and the false-positive bound curve.

use nmsleak_core::detector::amplify;
use nmsleak_core::inference::{
    end_to_end_inference, fn_rate_bound, fp_rate_bound, validate_theorem_monte_carlo, Decision, InferenceRun,
    MonteCarloReport, UnionBound,
};
use nmsleak_core::measurement::{calibrate_neural_model, default_calibration_sizes, LocalDetector, NeuralRuntimeModel};
use nmsleak_core::scenes::MembershipFamily;
use nmsleak_core::Raster;

use super::{clock_spec, detector, mean_nms_time, noise_sigma, stream, Result};
use crate::config::RunConfig;
use crate::output::{num, Check, Outcome, Table};

#[derive(Debug, Clone)]
pub struct InferResult {
    pub sigma: f64,
    pub model: NeuralRuntimeModel,
    /// Target drawn from the member population.
    pub member_target: InferenceRun,
    /// Target drawn from the nonmember population.
    pub nonmember_target: InferenceRun,
}

fn decision_name(d: Decision) -> &'static str {
    match d {
        Decision::Member => "member",
        Decision::Nonmember => "nonmember",
    }
}

pub fn infer(cfg: &RunConfig) -> Result<InferResult> {
    let p = &cfg.infer;
    let det = detector(cfg)?;
    let family = MembershipFamily::default();
    let draw = |count: usize, heavy: f64, name: &str| -> Result<Vec<Raster>> {
        Ok(family
            .generate(&det, count, heavy, stream(cfg, name))?
            .into_iter()
            .map(|s| s.raster)
            .collect())
    };
    let member = draw(p.members, p.member_heavy_fraction, "scenes.member")?;
    let nonmember = draw(p.nonmembers, p.nonmember_heavy_fraction, "scenes.nonmember")?;
    let target_m = draw(p.targets, p.member_heavy_fraction, "scenes.target_member")?;
    let target_n = draw(p.targets, p.nonmember_heavy_fraction, "scenes.target_nonmember")?;

    let reference = nonmember
        .iter()
        .take(200)
        .map(|img| amplify(img, p.k, false, 1.0))
        .collect::<nmsleak_core::Result<Vec<Raster>>>()?;
    let sigma = noise_sigma(cfg, mean_nms_time(&det, &reference)?);
    let mut local = LocalDetector::new(&det, clock_spec(cfg, sigma, stream(cfg, "clock.infer")))?;
    let model = calibrate_neural_model(&mut local, &default_calibration_sizes())?;
    let member_target = end_to_end_inference(&mut local, &model, &member, &nonmember, &target_m, p.tau, p.k)?;
    let tau = Some(member_target.verdict.tau);
    let nonmember_target = end_to_end_inference(&mut local, &model, &member, &nonmember, &target_n, tau, p.k)?;
    Ok(InferResult {
        sigma,
        model,
        member_target,
        nonmember_target,
    })
}

impl InferResult {
    pub fn outcome(&self) -> Outcome {
        let mut out = Outcome::default();
        let tau = self.member_target.verdict.tau;
        let mut samples = Table::new("samples", &["set", "runtime", "indicator"]);
        let [m, nm, tm] = &self.member_target.sets;
        let tn = &self.nonmember_target.sets[2];
        for (name, set) in [
            ("member", m),
            ("nonmember", nm),
            ("target_from_members", tm),
            ("target_from_nonmembers", tn),
        ] {
            for s in &set.samples {
                samples.push(vec![name.into(), num(*s), u8::from(*s >= tau).to_string()]);
            }
        }
        let mut verdicts = Table::new(
            "verdicts",
            &[
                "target",
                "decision",
                "tau",
                "mu_hat_m",
                "mu_hat_nonm",
                "mu_hat_target",
                "h",
                "fp_bound_raw",
                "fp_bound",
            ],
        );
        let opt = |x: Option<f64>| x.map(num).unwrap_or_default();
        for (name, run) in [
            ("from_members", &self.member_target),
            ("from_nonmembers", &self.nonmember_target),
        ] {
            let v = &run.verdict;
            verdicts.push(vec![
                name.into(),
                decision_name(v.decision).into(),
                num(v.tau),
                num(v.mu_hat_m),
                num(v.mu_hat_nonm),
                num(v.mu_hat_target),
                num(v.h),
                opt(v.fp_bound_raw),
                opt(v.fp_bound),
            ]);
            out.line(format!(
                "target {name}: decided {} (mu_hat m {:.4}, nonm {:.4}, target {:.4}, tau {:.4e} s)",
                decision_name(v.decision),
                v.mu_hat_m,
                v.mu_hat_nonm,
                v.mu_hat_target,
                v.tau
            ));
            out.metric(&format!("verdict_{name}"), v);
        }
        out.tables = vec![samples, verdicts];
        out.metric("sigma", self.sigma);
        out.metric("tau", tau);
        out.checks.push(Check::new(
            "member_target_detected",
            self.member_target.verdict.decision == Decision::Member,
            decision_name(self.member_target.verdict.decision),
        ));
        out.checks.push(Check::new(
            "nonmember_target_rejected",
            self.nonmember_target.verdict.decision == Decision::Nonmember,
            decision_name(self.nonmember_target.verdict.decision),
        ));
        out
    }
}

#[derive(Debug, Clone)]
pub struct FpBoundResult {
    /// `(|T|, false-positive bound, false-negative bound)`.
    pub curve: Vec<(usize, UnionBound, UnionBound)>,
    pub monte_carlo: MonteCarloReport,
}

pub fn fp_bound_curve(cfg: &RunConfig) -> Result<FpBoundResult> {
    let p = &cfg.fp_bound;
    let curve = (p.target_min..=p.target_max)
        .step_by(p.target_step)
        .map(|n_t| {
            Ok((
                n_t,
                fp_rate_bound(p.n_member, p.n_nonmember, n_t, p.mu_m, p.mu_nonm)?,
                fn_rate_bound(p.n_member, p.n_nonmember, n_t, p.mu_m, p.mu_nonm)?,
            ))
        })
        .collect::<nmsleak_core::Result<Vec<_>>>()?;
    let monte_carlo = validate_theorem_monte_carlo(
        p.mu_m,
        p.mu_nonm,
        p.n_member,
        p.n_nonmember,
        p.mc_target,
        p.mc_trials,
        stream(cfg, "inference.monte_carlo"),
    )?;
    Ok(FpBoundResult { curve, monte_carlo })
}

impl FpBoundResult {
    pub fn strictly_decreasing(&self) -> bool {
        self.curve.windows(2).all(|w| w[1].1.raw < w[0].1.raw)
    }

    pub fn outcome(&self) -> Outcome {
        let mut out = Outcome::default();
        let mut t = Table::new(
            "fp_bound",
            &[
                "n_target",
                "term_member",
                "term_nonmember",
                "term_target",
                "fp_bound_raw",
                "fp_bound",
                "fn_bound_raw",
                "fn_bound",
            ],
        );
        for (n, fp, fnb) in &self.curve {
            t.push(vec![
                n.to_string(),
                num(fp.terms[0]),
                num(fp.terms[1]),
                num(fp.terms[2]),
                num(fp.raw),
                num(fp.clamped()),
                num(fnb.raw),
                num(fnb.clamped()),
            ]);
        }
        let mc = &self.monte_carlo;
        let mut m = Table::new(
            "monte_carlo",
            &[
                "trials",
                "false_positives",
                "empirical_fp",
                "bound_raw",
                "event_free_trials",
                "implication_violations",
            ],
        );
        m.push(vec![
            mc.trials.to_string(),
            mc.false_positives.to_string(),
            num(mc.empirical_fp),
            num(mc.bound.raw),
            mc.event_free_trials.to_string(),
            mc.implication_violations.to_string(),
        ]);
        out.tables = vec![t, m];
        out.metric("monte_carlo", mc);
        if let (Some(first), Some(last)) = (self.curve.first(), self.curve.last()) {
            out.line(format!(
                "fp bound falls from {:.4} at |T|={} to {:.4} at |T|={}",
                first.1.raw, first.0, last.1.raw, last.0
            ));
        }
        out.line(format!(
            "Monte Carlo: empirical fp {:.4} vs bound {:.4}; {} of {} trials event-free, {} violations",
            mc.empirical_fp, mc.bound.raw, mc.event_free_trials, mc.trials, mc.implication_violations
        ));
        out.checks.push(Check::new(
            "bound_strictly_decreasing",
            self.strictly_decreasing(),
            "in |T|",
        ));
        out.checks.push(Check::new(
            "empirical_within_bound",
            mc.empirical_fp <= mc.bound.raw,
            format!("{:.4} <= {:.4}", mc.empirical_fp, mc.bound.raw),
        ));
        out.checks.push(Check::new(
            "theorem_implication",
            mc.implication_violations == 0,
            format!("{} violations", mc.implication_violations),
        ));
        out
    }
}
