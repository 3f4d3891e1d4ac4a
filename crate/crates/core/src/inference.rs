//! Timing-only dataset inference: indicator statistics over estimated NMS
//! runtimes, the nearest-mean decision and its Chernoff/union-bound
//! false-positive analysis.

use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::detector::amplify;
use crate::measurement::{estimate_nms_time, DetectorHandle, NeuralRuntimeModel};
use crate::raster::Raster;
use crate::seed;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SetLabel {
    Member,
    Nonmember,
    Target,
}

impl std::fmt::Display for SetLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SetLabel::Member => "member",
            SetLabel::Nonmember => "nonmember",
            SetLabel::Target => "target",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuntimeSampleSet {
    pub label: SetLabel,
    /// Estimated NMS runtimes in seconds.
    pub samples: Vec<f64>,
    pub source: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IndicatorSummary {
    pub tau: f64,
    /// Fraction of samples with runtime `>= tau`.
    pub mu_hat: f64,
    pub n: usize,
    pub count: usize,
}

pub fn summarize(set: &RuntimeSampleSet, tau: f64) -> Result<IndicatorSummary> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::param("tau", "must be positive"));
    }
    if set.samples.is_empty() {
        return Err(Error::Degenerate(format!("{} sample set is empty", set.label)));
    }
    let count = set.samples.iter().filter(|s| **s >= tau).count();
    Ok(IndicatorSummary {
        tau,
        mu_hat: count as f64 / set.samples.len() as f64,
        n: set.samples.len(),
        count,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Member,
    Nonmember,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InferenceVerdict {
    pub decision: Decision,
    pub tau: f64,
    pub mu_hat_m: f64,
    pub mu_hat_nonm: f64,
    pub mu_hat_target: f64,
    /// Quarter of the gap between the reference indicator means.
    pub h: f64,
    /// Union bound evaluated at the reference estimates, unclamped; `None`
    /// when the estimates fall outside the bound's validity range.
    pub fp_bound_raw: Option<f64>,
    /// The same, clamped to `[0, 1]` for display.
    pub fp_bound: Option<f64>,
}

/// Nearest-mean rule; an exact tie goes to nonmember.
pub fn nearest_mean(mu_m: f64, mu_nonm: f64, mu_target: f64) -> Decision {
    if (mu_target - mu_m).abs() < (mu_target - mu_nonm).abs() {
        Decision::Member
    } else {
        Decision::Nonmember
    }
}

pub fn decide(
    member: &IndicatorSummary,
    nonmember: &IndicatorSummary,
    target: &IndicatorSummary,
) -> Result<InferenceVerdict> {
    if member.tau != nonmember.tau || member.tau != target.tau {
        return Err(Error::param("tau", "summaries were computed with different thresholds"));
    }
    let bound = fp_rate_bound(member.n, nonmember.n, target.n, member.mu_hat, nonmember.mu_hat).ok();
    Ok(InferenceVerdict {
        decision: nearest_mean(member.mu_hat, nonmember.mu_hat, target.mu_hat),
        tau: member.tau,
        mu_hat_m: member.mu_hat,
        mu_hat_nonm: nonmember.mu_hat,
        mu_hat_target: target.mu_hat,
        h: (member.mu_hat - nonmember.mu_hat).abs() / 4.0,
        fp_bound_raw: bound.map(|b| b.raw),
        fp_bound: bound.map(|b| b.clamped()),
    })
}

/// Two-sided multiplicative Chernoff bound `2·exp(−μδ²/3)` on
/// `P(|X − μ| ≥ δμ)` for a sum of independent indicators with mean `μ`,
/// stated for `0 ≤ δ ≤ 1`.
pub fn chernoff_two_sided(mu: f64, delta: f64) -> Result<f64> {
    if !(mu > 0.0 && mu.is_finite()) {
        return Err(Error::param("mu", "must be positive"));
    }
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::param("delta", format!("{delta} outside [0, 1]")));
    }
    Ok(2.0 * (-mu * delta * delta / 3.0).exp())
}

/// Bound on `P(|μ̂ − μ| > h)` for the mean of `n` indicators with mean `mu`.
/// A point mass (`mu` of 0 or 1) never deviates, so its term is 0.
fn deviation_term(n: usize, mu: f64, h: f64) -> Result<f64> {
    if mu == 0.0 || mu == 1.0 {
        return Ok(0.0);
    }
    chernoff_two_sided(n as f64 * mu, h / mu)
}

/// The three union-bound terms and their sum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnionBound {
    pub h: f64,
    /// Member estimate, nonmember estimate, target estimate.
    pub terms: [f64; 3],
    pub raw: f64,
}

impl UnionBound {
    pub fn clamped(&self) -> f64 {
        self.raw.min(1.0)
    }
}

/// False-positive bound for a target drawn from the nonmember population:
/// the sum of Chernoff bounds on the events `|μ̂_m − μ_m| > h`,
/// `|μ̂_m̃ − μ_m̃| > h` and `|μ̂_T − μ_m̃| > h` with `h = |μ_m − μ_m̃| / 4`.
pub fn fp_rate_bound(
    n_member: usize,
    n_nonmember: usize,
    n_target: usize,
    mu_m: f64,
    mu_nonm: f64,
) -> Result<UnionBound> {
    if n_member == 0 || n_nonmember == 0 || n_target == 0 {
        return Err(Error::param("n", "all sample counts must be at least 1"));
    }
    for (name, mu) in [("mu_m", mu_m), ("mu_nonm", mu_nonm)] {
        if !(0.0..=1.0).contains(&mu) {
            return Err(Error::param(name, format!("{mu} outside [0, 1]")));
        }
    }
    if mu_m == mu_nonm {
        return Err(Error::param("mu_m", "member and nonmember means must differ"));
    }
    let h = (mu_m - mu_nonm).abs() / 4.0;
    let terms = [
        deviation_term(n_member, mu_m, h)?,
        deviation_term(n_nonmember, mu_nonm, h)?,
        deviation_term(n_target, mu_nonm, h)?,
    ];
    Ok(UnionBound {
        h,
        terms,
        raw: terms.iter().sum(),
    })
}

/// False-negative bound: the same argument with the roles swapped.
pub fn fn_rate_bound(
    n_member: usize,
    n_nonmember: usize,
    n_target: usize,
    mu_m: f64,
    mu_nonm: f64,
) -> Result<UnionBound> {
    fp_rate_bound(n_nonmember, n_member, n_target, mu_nonm, mu_m)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub trials: usize,
    pub false_positives: usize,
    pub empirical_fp: f64,
    pub bound: UnionBound,
    /// Trials on which none of the three deviation events occurred.
    pub event_free_trials: usize,
    /// Event-free trials on which the nearest-mean rule still chose member.
    pub implication_violations: usize,
}

/// Simulates indicator sample sets with the target drawn from the
/// nonmember population and compares the empirical false-positive rate with
/// [`fp_rate_bound`].
pub fn validate_theorem_monte_carlo(
    mu_m: f64,
    mu_nonm: f64,
    n_member: usize,
    n_nonmember: usize,
    n_target: usize,
    trials: usize,
    master_seed: u64,
) -> Result<MonteCarloReport> {
    let bound = fp_rate_bound(n_member, n_nonmember, n_target, mu_m, mu_nonm)?;
    if trials == 0 {
        return Err(Error::param("trials", "must be positive"));
    }
    let binomial = |n: usize, p: f64| Binomial::new(n as u64, p).map_err(|e| Error::param("mu", e.to_string()));
    let (bm, bn, bt) = (
        binomial(n_member, mu_m)?,
        binomial(n_nonmember, mu_nonm)?,
        binomial(n_target, mu_nonm)?,
    );
    let mut rng = seed::stream_rng(master_seed, "inference.monte_carlo");
    let h = bound.h;
    let (mut fps, mut free, mut violations) = (0, 0, 0);
    for _ in 0..trials {
        let m = bm.sample(&mut rng) as f64 / n_member as f64;
        let nm = bn.sample(&mut rng) as f64 / n_nonmember as f64;
        let t = bt.sample(&mut rng) as f64 / n_target as f64;
        let member = nearest_mean(m, nm, t) == Decision::Member;
        fps += member as usize;
        if (m - mu_m).abs() <= h && (nm - mu_nonm).abs() <= h && (t - mu_nonm).abs() <= h {
            free += 1;
            if (t - nm).abs() > (t - m).abs() || member {
                violations += 1;
            }
        }
    }
    Ok(MonteCarloReport {
        trials,
        false_positives: fps,
        empirical_fp: fps as f64 / trials as f64,
        bound,
        event_free_trials: free,
        implication_violations: violations,
    })
}

/// Threshold at the deepest valley of the pooled-sample histogram. The
/// histogram is smoothed over three bins; the valley between two local maxima
/// with the lowest floor relative to the smaller maximum wins, and the
/// threshold is the centre of its widest run of floor bins.
pub fn histogram_valley_tau(samples: &[f64], bins: usize) -> Result<f64> {
    if bins < 3 {
        return Err(Error::param("bins", "need at least 3 bins"));
    }
    let finite: Vec<f64> = samples.iter().copied().filter(|s| s.is_finite()).collect();
    if finite.len() < 2 {
        return Err(Error::Degenerate("too few samples for a histogram".into()));
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return Err(Error::Degenerate("all samples are equal".into()));
    }
    let width = (hi - lo) / bins as f64;
    let mut raw = vec![0usize; bins];
    for s in &finite {
        raw[(((s - lo) / width) as usize).min(bins - 1)] += 1;
    }
    // Integer three-bin sums keep plateaus exact.
    let counts: Vec<usize> = (0..bins)
        .map(|i| raw[i.saturating_sub(1)..(i + 2).min(bins)].iter().sum())
        .collect();
    // Local maxima, plateaus represented by their first bin.
    let peaks: Vec<usize> = (0..bins)
        .filter(|&i| {
            let left = if i == 0 { 0 } else { counts[i - 1] };
            let right = counts[i + 1..].iter().find(|c| **c != counts[i]).copied().unwrap_or(0);
            counts[i] > left && counts[i] > right
        })
        .collect();
    // Valleys are ranked by relative depth (floor over the lower peak), then
    // by the width of the floor run.
    let mut best: Option<(f64, (usize, usize))> = None;
    for (i, &a) in peaks.iter().enumerate() {
        for &b in &peaks[i + 1..] {
            let floor = counts[a..=b].iter().copied().min().expect("non-empty range");
            let ratio = floor as f64 / counts[a].min(counts[b]) as f64;
            if ratio >= 1.0 {
                continue;
            }
            let run = widest_run(&counts[a..=b], floor);
            let run = (a + run.0, a + run.1);
            let better = match best {
                None => true,
                Some((r, w)) => ratio < r || (ratio == r && run.1 - run.0 > w.1 - w.0),
            };
            if better {
                best = Some((ratio, run));
            }
        }
    }
    let Some((_, widest)) = best else {
        return Err(Error::Degenerate("histogram has a single mode".into()));
    };
    let centre = (widest.0 as f64 + widest.1 as f64 + 1.0) / 2.0;
    Ok(lo + centre * width)
}

/// Inclusive bounds of the longest run of `value` in `counts`.
fn widest_run(counts: &[usize], value: usize) -> (usize, usize) {
    let (mut best, mut start) = (None::<(usize, usize)>, None);
    for (i, c) in counts.iter().enumerate() {
        if *c != value {
            start = None;
            continue;
        }
        let s = *start.get_or_insert(i);
        if best.is_none_or(|(b0, b1)| i - s > b1 - b0) {
            best = Some((s, i));
        }
    }
    best.expect("value occurs in counts")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceRun {
    pub verdict: InferenceVerdict,
    pub sets: [RuntimeSampleSet; 3],
}

/// Amplifies every image `k × k`, times it through `handle`, estimates its
/// NMS runtime with `model` and applies the nearest-mean rule. `tau`
/// defaults to the histogram valley of the pooled member and nonmember
/// estimates.
pub fn end_to_end_inference<H: DetectorHandle + ?Sized>(
    handle: &mut H,
    model: &NeuralRuntimeModel,
    member: &[Raster],
    nonmember: &[Raster],
    target: &[Raster],
    tau: Option<f64>,
    k: usize,
) -> Result<InferenceRun> {
    let mut measure = |label: SetLabel, images: &[Raster]| -> Result<RuntimeSampleSet> {
        let mut samples = Vec::with_capacity(images.len());
        for img in images {
            let big = amplify(img, k, false, 1.0)?;
            let obs = handle.query(&big)?;
            samples.push(estimate_nms_time(model, obs.total_time, big.pixel_count()));
        }
        Ok(RuntimeSampleSet {
            label,
            samples,
            source: format!("{} images amplified {k}x{k}", images.len()),
        })
    };
    let m = measure(SetLabel::Member, member)?;
    let nm = measure(SetLabel::Nonmember, nonmember)?;
    let t = measure(SetLabel::Target, target)?;
    let tau = match tau {
        Some(tau) => tau,
        None => {
            let pooled: Vec<f64> = m.samples.iter().chain(&nm.samples).copied().collect();
            histogram_valley_tau(&pooled, 40)?
        }
    };
    let verdict = decide(&summarize(&m, tau)?, &summarize(&nm, tau)?, &summarize(&t, tau)?)?;
    Ok(InferenceRun {
        verdict,
        sets: [m, nm, t],
    })
}
