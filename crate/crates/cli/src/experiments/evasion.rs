//! Timing-guided evasion, the decision-only baseline and the λ and
//! amplification sweeps.

use std::collections::BTreeMap;

use nmsleak_core::detector::{amplify, SyntheticDetector};
use nmsleak_core::evasion::{run_decision_baseline, run_timing_attack, EvasionConfig, EvasionTrace};
use nmsleak_core::measurement::LocalDetector;
use nmsleak_core::scenes::{Scene, SceneFamily};
use nmsleak_core::{seed, stats, Raster};
use serde::Serialize;

use super::{clock_spec, detector, mean_nms_time, noise_sigma, stream, Result};
use crate::config::RunConfig;
use crate::output::{num, Check, Outcome, Table};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Timing,
    Baseline,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Timing => "timing",
            Method::Baseline => "baseline",
        }
    }
}

#[derive(Debug, Clone)]
pub struct GadgetRun {
    pub gadget: usize,
    pub method: Method,
    pub n_boxes: usize,
    pub target_score: f64,
    /// Copies detected in the attack's initial amplified gadget.
    pub initial_copies: usize,
    pub trace: EvasionTrace,
}

impl GadgetRun {
    pub fn budget(&self) -> f64 {
        self.trace.budget()
    }
}

/// Gadgets shared by every evasion experiment of a run, with the noise
/// sigma derived from their mean amplified NMS time.
pub struct Setup {
    pub detector: SyntheticDetector,
    pub gadgets: Vec<Scene>,
    pub sigma: f64,
}

pub fn setup(cfg: &RunConfig) -> Result<Setup> {
    setup_with(cfg, SceneFamily::gadget())
}

fn setup_with(cfg: &RunConfig, family: SceneFamily) -> Result<Setup> {
    let det = detector(cfg)?;
    let gadgets = family.generate(&det, cfg.evade.gadgets, stream(cfg, "scenes.gadgets"))?;
    let k = cfg.evade.attack.amplification_k;
    let amplified = gadgets
        .iter()
        .map(|g| amplify(&g.raster, k, false, 1.0))
        .collect::<nmsleak_core::Result<Vec<Raster>>>()?;
    let sigma = noise_sigma(cfg, mean_nms_time(&det, &amplified)?);
    Ok(Setup {
        detector: det,
        gadgets,
        sigma,
    })
}

/// One attack on gadget `index`. Both methods on the same gadget share the
/// clock and population seeds.
pub fn attack(
    cfg: &RunConfig,
    setup: &Setup,
    index: usize,
    method: Method,
    attack: &EvasionConfig,
) -> Result<GadgetRun> {
    let g = &setup.gadgets[index];
    let clock = clock_spec(cfg, setup.sigma, seed::indexed(cfg.seed, "clock.evasion", index as u64));
    let mut local = LocalDetector::new(&setup.detector, clock)?;
    let attack = EvasionConfig {
        rng_seed: seed::indexed(cfg.seed, "evasion.population", index as u64),
        ..*attack
    };
    let trace = match method {
        Method::Timing => run_timing_attack(&mut local, &g.raster, &attack)?.1,
        Method::Baseline => {
            let equal_budget = EvasionConfig {
                query_budget: Some(
                    attack
                        .query_budget
                        .unwrap_or(attack.timing_queries(attack.max_iterations)),
                ),
                max_iterations: usize::MAX,
                ..attack
            };
            run_decision_baseline(&mut local, &g.raster, &equal_budget)?.1
        }
    };
    let k = match method {
        Method::Timing => attack.amplification_k,
        Method::Baseline => 1,
    };
    let initial = amplify(&g.raster, k, attack.resize_back, attack.degradation)?;
    Ok(GadgetRun {
        gadget: index,
        method,
        n_boxes: g.n_boxes,
        target_score: g.target_score,
        initial_copies: setup.detector.decide(&initial)?.len(),
        trace,
    })
}

fn runs_table(name: &str, runs: &[(String, &GadgetRun)]) -> Table {
    let mut t = Table::new(
        name,
        &[
            "group",
            "gadget",
            "method",
            "n_boxes",
            "target_score",
            "initial_copies",
            "evaded",
            "iterations",
            "queries",
            "l2",
            "l_inf",
            "mse",
            "budget",
        ],
    );
    for (group, r) in runs {
        let p = &r.trace.perturbation;
        t.push(vec![
            group.clone(),
            r.gadget.to_string(),
            r.method.name().into(),
            r.n_boxes.to_string(),
            num(r.target_score),
            r.initial_copies.to_string(),
            r.trace.evaded().to_string(),
            r.trace.iterations.len().to_string(),
            r.trace.query_count.to_string(),
            num(p.l2),
            num(p.l_inf),
            num(p.mse),
            num(r.budget()),
        ]);
    }
    t
}

/// Percent of gadgets evaded within each observed budget.
fn budget_curve(name: &str, groups: &BTreeMap<String, Vec<f64>>) -> Table {
    let mut t = Table::new(name, &["group", "budget", "percent_evaded"]);
    for (group, budgets) in groups {
        let mut finite: Vec<f64> = budgets.iter().copied().filter(|b| b.is_finite()).collect();
        finite.sort_by(f64::total_cmp);
        for (i, b) in finite.iter().enumerate() {
            t.push(vec![
                group.clone(),
                num(*b),
                num(100.0 * (i + 1) as f64 / budgets.len() as f64),
            ]);
        }
    }
    t
}

fn trace_table(runs: &[&GadgetRun]) -> Table {
    let mut t = Table::new(
        "trace",
        &[
            "gadget",
            "method",
            "iteration",
            "gadget_id",
            "query",
            "member",
            "time",
            "detected",
        ],
    );
    for r in runs {
        for it in &r.trace.iterations {
            let mut row = |query: &str, member: String, time: Option<f64>, detected: Option<bool>| {
                t.push(vec![
                    r.gadget.to_string(),
                    r.method.name().into(),
                    it.iteration.to_string(),
                    it.gadget_id.clone(),
                    query.into(),
                    member,
                    time.map(num).unwrap_or_default(),
                    detected.map(|d| d.to_string()).unwrap_or_default(),
                ]);
            };
            if let Some(time) = it.gadget_time {
                row("gadget", String::new(), Some(time), None);
            }
            for (m, detected) in it.member_detected.iter().enumerate() {
                row(
                    "member",
                    m.to_string(),
                    it.member_times.get(m).copied(),
                    Some(*detected),
                );
            }
        }
    }
    t
}

#[derive(Debug, Clone)]
pub struct EvadeResult {
    pub sigma: f64,
    pub timing: Vec<GadgetRun>,
    pub baseline: Vec<GadgetRun>,
    pub trace: bool,
}

pub fn evade(cfg: &RunConfig, timing: bool) -> Result<EvadeResult> {
    let s = setup(cfg)?;
    let mut result = EvadeResult {
        sigma: s.sigma,
        timing: Vec::new(),
        baseline: Vec::new(),
        trace: cfg.evade.trace,
    };
    for i in 0..s.gadgets.len() {
        if timing {
            result
                .timing
                .push(attack(cfg, &s, i, Method::Timing, &cfg.evade.attack)?);
        }
        result
            .baseline
            .push(attack(cfg, &s, i, Method::Baseline, &cfg.evade.attack)?);
    }
    Ok(result)
}

pub fn success_rate(runs: &[GadgetRun]) -> f64 {
    runs.iter().filter(|r| r.trace.evaded()).count() as f64 / runs.len() as f64
}

pub fn median_budget(runs: &[GadgetRun]) -> f64 {
    let b: Vec<f64> = runs.iter().map(GadgetRun::budget).collect();
    stats::median(&b).unwrap_or(f64::NAN)
}

impl EvadeResult {
    pub fn outcome(&self) -> Outcome {
        let mut out = Outcome::default();
        let all: Vec<&GadgetRun> = self.timing.iter().chain(&self.baseline).collect();
        let named: Vec<(String, &GadgetRun)> = all.iter().map(|r| (r.method.name().to_owned(), *r)).collect();
        let mut groups = BTreeMap::new();
        for (name, runs) in [("timing", &self.timing), ("baseline", &self.baseline)] {
            if runs.is_empty() {
                continue;
            }
            groups.insert(name.to_owned(), runs.iter().map(GadgetRun::budget).collect());
            let (rate, median) = (success_rate(runs), median_budget(runs));
            out.metric(&format!("{name}_success_rate"), rate);
            out.metric(&format!("{name}_median_budget"), num(median));
            out.line(format!(
                "{name}: {:.0}% evaded, median L2 budget {}",
                100.0 * rate,
                num(median)
            ));
        }
        out.tables = vec![runs_table("evasion", &named), budget_curve("budget_curve", &groups)];
        if self.trace {
            out.tables.push(trace_table(&all));
        }
        out.metric("sigma", self.sigma);
        if !self.timing.is_empty() && !self.baseline.is_empty() {
            let t: Vec<f64> = self.timing.iter().map(GadgetRun::budget).collect();
            let b: Vec<f64> = self.baseline.iter().map(GadgetRun::budget).collect();
            let (mt, mb) = (median_budget(&self.timing), median_budget(&self.baseline));
            out.checks.push(Check::new(
                "timing_median_smaller",
                mt < mb,
                format!("{} < {}", num(mt), num(mb)),
            ));
            match stats::wilcoxon_signed_rank(&t, &b) {
                Ok(w) => {
                    out.metric("wilcoxon_p", w.p_value);
                    out.checks.push(Check::new(
                        "wilcoxon",
                        w.p_value < 0.05,
                        format!("p = {:.3e} < 0.05 over {} informative pairs", w.p_value, w.n),
                    ));
                }
                Err(e) => out.checks.push(Check::new("wilcoxon", false, e.to_string())),
            }
            let (rt, rb) = (success_rate(&self.timing), success_rate(&self.baseline));
            out.checks.push(Check::new(
                "timing_success_at_least_baseline",
                rt >= rb,
                format!("{rt:.3} >= {rb:.3}"),
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct LambdaSweepResult {
    pub sigma: f64,
    pub sweeps: Vec<(f64, Vec<GadgetRun>)>,
}

pub fn lambda_sweep(cfg: &RunConfig) -> Result<LambdaSweepResult> {
    let s = setup(cfg)?;
    let mut sweeps = Vec::new();
    for &lambda in &cfg.lambda_sweep.lambdas {
        let attack_cfg = EvasionConfig {
            lambda,
            ..cfg.evade.attack
        };
        let runs = (0..s.gadgets.len())
            .map(|i| attack(cfg, &s, i, Method::Timing, &attack_cfg))
            .collect::<Result<Vec<_>>>()?;
        sweeps.push((lambda, runs));
    }
    Ok(LambdaSweepResult { sigma: s.sigma, sweeps })
}

impl LambdaSweepResult {
    pub fn medians(&self) -> Vec<(f64, f64)> {
        self.sweeps.iter().map(|(l, runs)| (*l, median_budget(runs))).collect()
    }

    pub fn outcome(&self) -> Outcome {
        let mut out = Outcome::default();
        let named: Vec<(String, &GadgetRun)> = self
            .sweeps
            .iter()
            .flat_map(|(l, runs)| runs.iter().map(move |r| (num(*l), r)))
            .collect();
        let groups: BTreeMap<String, Vec<f64>> = self
            .sweeps
            .iter()
            .map(|(l, runs)| (num(*l), runs.iter().map(GadgetRun::budget).collect()))
            .collect();
        let mut summary = Table::new("lambda_summary", &["lambda", "median_budget", "success_rate"]);
        for (l, runs) in &self.sweeps {
            let median = median_budget(runs);
            summary.push(vec![num(*l), num(median), num(success_rate(runs))]);
            out.line(format!(
                "lambda {l}: median L2 budget {}, {:.0}% evaded",
                num(median),
                100.0 * success_rate(runs)
            ));
        }
        out.tables = vec![
            runs_table("lambda_sweep", &named),
            summary,
            budget_curve("budget_curve", &groups),
        ];
        let medians = self.medians();
        out.metric("sigma", self.sigma);
        out.metric(
            "median_budgets",
            medians.iter().map(|(l, m)| (num(*l), num(*m))).collect::<Vec<_>>(),
        );
        let ordered = medians.windows(2).filter(|w| w[1].1 >= w[0].1).count();
        let pairs = medians.len().saturating_sub(1);
        out.checks.push(Check::new(
            "median_budget_non_decreasing",
            ordered == pairs,
            format!("{ordered} of {pairs} adjacent pairs ordered"),
        ));
        out
    }
}

#[derive(Debug, Clone)]
pub struct AmplifySweepResult {
    pub sigma: f64,
    pub sweeps: Vec<(f64, Vec<GadgetRun>)>,
}

pub fn amplify_sweep(cfg: &RunConfig) -> Result<AmplifySweepResult> {
    let mut family = SceneFamily::gadget();
    if cfg.amplify_sweep.fixed_score {
        family.min_score = cfg.amplify_sweep.gadget_score;
        family.max_score = cfg.amplify_sweep.gadget_score;
    }
    let s = setup_with(cfg, family)?;
    let mut sweeps = Vec::new();
    for &degradation in &cfg.amplify_sweep.degradations {
        let attack_cfg = EvasionConfig {
            resize_back: true,
            degradation,
            ..cfg.evade.attack
        };
        let runs = (0..s.gadgets.len())
            .map(|i| attack(cfg, &s, i, Method::Timing, &attack_cfg))
            .collect::<Result<Vec<_>>>()?;
        sweeps.push((degradation, runs));
    }
    Ok(AmplifySweepResult { sigma: s.sigma, sweeps })
}

impl AmplifySweepResult {
    /// `(initial copies, runs, mean budget, successes)`, ascending in copies.
    pub fn by_copies(&self) -> Vec<(usize, usize, f64, usize)> {
        let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
        for r in self.sweeps.iter().flat_map(|(_, runs)| runs) {
            groups.entry(r.initial_copies).or_default().push(r.budget());
        }
        groups
            .into_iter()
            .map(|(c, b)| (c, b.len(), stats::mean(&b), b.iter().filter(|x| x.is_finite()).count()))
            .collect()
    }

    /// Over gadget/degradation pairs where the same gadget ends with more
    /// initial copies, the fraction whose budget did not grow.
    pub fn within_gadget_drop_fraction(&self) -> Option<f64> {
        let mut pairs = 0usize;
        let mut drops = 0usize;
        for (i, (_, a)) in self.sweeps.iter().enumerate() {
            for (_, b) in &self.sweeps[i + 1..] {
                for (x, y) in a.iter().zip(b) {
                    let (few, many) = match x.initial_copies.cmp(&y.initial_copies) {
                        std::cmp::Ordering::Less => (x, y),
                        std::cmp::Ordering::Greater => (y, x),
                        std::cmp::Ordering::Equal => continue,
                    };
                    pairs += 1;
                    drops += usize::from(many.budget() <= few.budget());
                }
            }
        }
        (pairs > 0).then(|| drops as f64 / pairs as f64)
    }

    pub fn outcome(&self) -> Outcome {
        let mut out = Outcome::default();
        let named: Vec<(String, &GadgetRun)> = self
            .sweeps
            .iter()
            .flat_map(|(d, runs)| runs.iter().map(move |r| (num(*d), r)))
            .collect();
        let mut summary = Table::new(
            "amplification_summary",
            &["initial_copies", "runs", "mean_budget", "successes"],
        );
        let groups = self.by_copies();
        for (c, n, mean, ok) in &groups {
            summary.push(vec![c.to_string(), n.to_string(), num(*mean), ok.to_string()]);
            out.line(format!("{c} initial copies: {n} runs, mean L2 budget {}", num(*mean)));
        }
        out.tables = vec![runs_table("amplification", &named), summary];
        out.metric("sigma", self.sigma);
        out.metric(
            "mean_budget_by_copies",
            groups.iter().map(|(c, _, m, _)| (*c, num(*m))).collect::<Vec<_>>(),
        );
        if let Some(f) = self.within_gadget_drop_fraction() {
            out.metric("within_gadget_drop_fraction", f);
            out.line(format!(
                "same gadget, more copies: budget did not grow in {:.1}% of pairs",
                100.0 * f
            ));
        }
        let ordered = groups.windows(2).all(|w| w[1].2 <= w[0].2);
        out.checks.push(Check::new(
            "mean_budget_non_increasing_in_copies",
            ordered,
            groups.iter().map(|g| num(g.2)).collect::<Vec<_>>().join(" >= "),
        ));
        out
    }
}
