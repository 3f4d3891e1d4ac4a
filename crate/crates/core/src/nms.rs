//! Greedy non-maximum suppression with comparison-count instrumentation, and
//! the constant-time and random-delay countermeasure variants.
//!
//! The greedy loop follows the textbook formulation exactly: each outer
//! iteration moves the highest-scoring remaining detection to the output and
//! compares it against *every* remaining detection, discarding those whose
//! IoU reaches the threshold. Its cost is therefore `Θ(o·B)` IoU evaluations
//! for `o` kept objects out of `B` input boxes, which is the quantity that
//! leaks through timing.

use serde::{Deserialize, Serialize};

use crate::geometry::Detection;
use crate::noise::NoiseSpec;
use crate::seed;
use crate::{Error, Result};

/// Detections entering NMS together with the suppression threshold `N_t`.
#[derive(Debug, Clone, Copy)]
pub struct NmsInput<'a> {
    detections: &'a [Detection],
    threshold: f64,
}

impl<'a> NmsInput<'a> {
    pub fn new(detections: &'a [Detection], nms_threshold: f64) -> Result<Self> {
        if !(nms_threshold > 0.0 && nms_threshold < 1.0) {
            return Err(Error::param("nms_threshold", format!("{nms_threshold} not in (0, 1)")));
        }
        Ok(Self {
            detections,
            threshold: nms_threshold,
        })
    }

    pub fn detections(&self) -> &'a [Detection] {
        self.detections
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NmsOutcome {
    /// Surviving detections in selection order (descending score).
    pub kept: Vec<Detection>,
    /// Input positions of `kept`.
    pub kept_indices: Vec<usize>,
    /// IoU evaluations performed.
    pub comparison_count: u64,
    pub outer_iterations: u64,
    /// True for the constant-time (padded) variant.
    pub padded: bool,
}

impl NmsOutcome {
    pub fn empty() -> Self {
        Self {
            kept: Vec::new(),
            kept_indices: Vec::new(),
            comparison_count: 0,
            outer_iterations: 0,
            padded: false,
        }
    }
}

/// Greedy NMS. Score ties in the argmax go to the lowest input index.
pub fn greedy_nms(input: NmsInput<'_>) -> NmsOutcome {
    let dets = input.detections;
    let mut remaining: Vec<usize> = (0..dets.len()).collect();
    let mut outcome = NmsOutcome::empty();

    while !remaining.is_empty() {
        let mut best = 0;
        for (pos, &idx) in remaining.iter().enumerate().skip(1) {
            if dets[idx].score() > dets[remaining[best]].score() {
                best = pos;
            }
        }
        let m = remaining.remove(best);
        let chosen = dets[m].bbox;
        outcome.kept.push(dets[m]);
        outcome.kept_indices.push(m);
        outcome.outer_iterations += 1;

        let mut comparisons = 0u64;
        remaining.retain(|&i| {
            comparisons += 1;
            chosen.iou(&dets[i].bbox) < input.threshold
        });
        outcome.comparison_count += comparisons;
    }
    outcome
}

/// Number of IoU evaluations the constant-time variant performs at `capacity`.
pub fn constant_time_comparisons(capacity: usize) -> u64 {
    let c = capacity as u64;
    c * c.saturating_sub(1) / 2
}

#[inline]
fn mask(bit: bool) -> u64 {
    (bit as u64).wrapping_neg()
}

#[inline]
fn select_f64(m: u64, a: f64, b: f64) -> f64 {
    f64::from_bits((a.to_bits() & m) | (b.to_bits() & !m))
}

#[inline]
fn select_u64(m: u64, a: u64, b: u64) -> u64 {
    (a & m) | (b & !m)
}

#[derive(Clone, Copy)]
struct Slot {
    corners: [f64; 4],
    score: f64,
    index: u64,
    active: u64,
}

impl Slot {
    fn sentinel(index: u64) -> Self {
        Slot {
            corners: [0.0, 0.0, 1.0, 1.0],
            score: -1.0,
            index,
            active: 0,
        }
    }

    /// Orders by descending score, then ascending index.
    fn precedes(&self, other: &Slot) -> bool {
        self.score > other.score || (self.score == other.score && self.index < other.index)
    }

    fn select(m: u64, a: &Slot, b: &Slot) -> Slot {
        let mut corners = [0.0; 4];
        for (k, c) in corners.iter_mut().enumerate() {
            *c = select_f64(m, a.corners[k], b.corners[k]);
        }
        Slot {
            corners,
            score: select_f64(m, a.score, b.score),
            index: select_u64(m, a.index, b.index),
            active: select_u64(m, a.active, b.active),
        }
    }
}

fn corner_iou(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = w * h;
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    inter / union
}

/// Constant-time NMS: pads the input to `capacity` sentinel slots, orders the
/// slots with a fixed odd-even transposition network, then runs the full
/// triangular comparison schedule with masked (branch-free) suppression.
/// The comparison count is `capacity·(capacity−1)/2` for every input and the
/// kept set equals [`greedy_nms`]'s.
pub fn constant_time_nms(input: NmsInput<'_>, capacity: usize) -> Result<NmsOutcome> {
    let dets = input.detections;
    if capacity == 0 {
        return Err(Error::param("capacity", "must be positive"));
    }
    if dets.len() > capacity {
        return Err(Error::CapacityExceeded {
            capacity,
            count: dets.len(),
        });
    }

    let mut slots: Vec<Slot> = (0..capacity as u64).map(Slot::sentinel).collect();
    for (i, d) in dets.iter().enumerate() {
        slots[i] = Slot {
            corners: d.bbox.corners(),
            score: d.score(),
            index: i as u64,
            active: u64::MAX,
        };
    }

    for round in 0..capacity {
        let mut i = round % 2;
        while i + 1 < capacity {
            let (a, b) = (slots[i], slots[i + 1]);
            let keep = mask(a.precedes(&b));
            slots[i] = Slot::select(keep, &a, &b);
            slots[i + 1] = Slot::select(keep, &b, &a);
            i += 2;
        }
    }

    let mut suppressed = vec![0u64; capacity];
    let mut comparisons = 0u64;
    for i in 0..capacity {
        let alive = slots[i].active & !suppressed[i];
        for j in i + 1..capacity {
            let hit = mask(corner_iou(&slots[i].corners, &slots[j].corners) >= input.threshold);
            comparisons += 1;
            suppressed[j] |= alive & hit & slots[j].active;
        }
    }

    let mut outcome = NmsOutcome::empty();
    for (slot, sup) in slots.iter().zip(&suppressed) {
        if slot.active & !sup != 0 {
            let idx = slot.index as usize;
            outcome.kept.push(dets[idx]);
            outcome.kept_indices.push(idx);
        }
    }
    outcome.comparison_count = comparisons;
    outcome.outer_iterations = capacity as u64;
    outcome.padded = true;
    Ok(outcome)
}

/// Greedy NMS followed by a random extra delay drawn from `delay`.
pub fn random_delay_nms(input: NmsInput<'_>, delay: &NoiseSpec, rng_seed: u64) -> Result<(NmsOutcome, f64)> {
    delay.validate()?;
    let outcome = greedy_nms(input);
    let mut rng = seed::rng(rng_seed);
    Ok((outcome, delay.sample(&mut rng)))
}

/// Converts NMS counters into modeled seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NmsCostModel {
    pub cost_per_comparison: f64,
    pub cost_per_iteration: f64,
    pub fixed_cost: f64,
}

impl Default for NmsCostModel {
    fn default() -> Self {
        Self {
            cost_per_comparison: 2.0e-6,
            cost_per_iteration: 5.0e-6,
            fixed_cost: 4.0e-5,
        }
    }
}

impl NmsCostModel {
    pub fn new(cost_per_comparison: f64, cost_per_iteration: f64, fixed_cost: f64) -> Result<Self> {
        let model = Self {
            cost_per_comparison,
            cost_per_iteration,
            fixed_cost,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let all_finite = [self.cost_per_comparison, self.cost_per_iteration, self.fixed_cost]
            .iter()
            .all(|c| c.is_finite());
        if !all_finite || self.cost_per_iteration < 0.0 || self.fixed_cost < 0.0 {
            return Err(Error::param("nms_cost", "costs must be finite and non-negative"));
        }
        if self.cost_per_comparison <= 0.0 {
            return Err(Error::param("nms_cost.cost_per_comparison", "must be positive"));
        }
        Ok(())
    }
}

pub fn modeled_nms_time(outcome: &NmsOutcome, model: &NmsCostModel) -> f64 {
    model.fixed_cost
        + outcome.outer_iterations as f64 * model.cost_per_iteration
        + outcome.comparison_count as f64 * model.cost_per_comparison
}

/// Which NMS implementation a detector runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NmsVariant {
    #[default]
    Greedy,
    ConstantTime {
        capacity: usize,
    },
    RandomDelay {
        delay: NoiseSpec,
    },
}

impl NmsVariant {
    pub fn validate(&self) -> Result<()> {
        match self {
            NmsVariant::Greedy => Ok(()),
            NmsVariant::ConstantTime { capacity } if *capacity == 0 => {
                Err(Error::param("nms.capacity", "must be positive"))
            }
            NmsVariant::ConstantTime { .. } => Ok(()),
            NmsVariant::RandomDelay { delay } => delay.validate(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::BoundingBox;
    use crate::seed::SimRng;
    use proptest::prelude::*;
    use rand::Rng;

    fn det(x0: f64, y0: f64, x1: f64, y1: f64, score: f64) -> Detection {
        Detection::new(BoundingBox::new(x0, y0, x1, y1).unwrap(), 0, score).unwrap()
    }

    /// Independent reference: sort by (score desc, index asc) and keep a box
    /// unless an already-kept box overlaps it. Also recounts the comparisons
    /// of the greedy loop as the sum of remaining-set sizes.
    fn reference(dets: &[Detection], thr: f64) -> (Vec<usize>, u64) {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| dets[b].score().partial_cmp(&dets[a].score()).unwrap().then(a.cmp(&b)));
        let mut kept: Vec<usize> = Vec::new();
        let mut alive = vec![true; dets.len()];
        let mut count = 0u64;
        for &i in &order {
            if !alive[i] {
                continue;
            }
            kept.push(i);
            alive[i] = false;
            let remaining: Vec<usize> = (0..dets.len()).filter(|&j| alive[j]).collect();
            count += remaining.len() as u64;
            for j in remaining {
                if dets[i].bbox.iou(&dets[j].bbox) >= thr {
                    alive[j] = false;
                }
            }
        }
        (kept, count)
    }

    fn random_dets(rng: &mut SimRng, n: usize) -> Vec<Detection> {
        (0..n)
            .map(|_| {
                let x = rng.random_range(0.0..100.0);
                let y = rng.random_range(0.0..100.0);
                let w = rng.random_range(2.0..30.0);
                let h = rng.random_range(2.0..30.0);
                // Coarse scores so ties occur.
                let s = (rng.random_range(0..20) as f64) / 20.0;
                det(x, y, x + w, y + h, s)
            })
            .collect()
    }

    #[test]
    fn single_detection_is_kept_without_comparisons() {
        let d = [det(0., 0., 10., 10., 0.7)];
        for thr in [0.1, 0.5, 0.9] {
            let out = greedy_nms(NmsInput::new(&d, thr).unwrap());
            assert_eq!(out.kept, d.to_vec());
            assert_eq!(out.comparison_count, 0);
        }
    }

    #[test]
    fn coincident_boxes_keep_the_higher_score() {
        let d = [det(0., 0., 10., 10., 0.9), det(0., 0., 10., 10., 0.8)];
        let out = greedy_nms(NmsInput::new(&d, 0.5).unwrap());
        assert_eq!(out.kept_indices, vec![0]);
        assert_eq!(out.comparison_count, 1);
        assert_eq!(out.outer_iterations, 1);
    }

    #[test]
    fn disjoint_boxes_are_both_kept() {
        let d = [det(0., 0., 10., 10., 0.9), det(20., 20., 30., 30., 0.8)];
        let out = greedy_nms(NmsInput::new(&d, 0.5).unwrap());
        assert_eq!(out.kept_indices, vec![0, 1]);
        assert_eq!(out.comparison_count, 1);
        assert_eq!(out.outer_iterations, 2);
    }

    #[test]
    fn empty_input() {
        let out = greedy_nms(NmsInput::new(&[], 0.5).unwrap());
        assert!(out.kept.is_empty());
        assert_eq!(out.comparison_count, 0);
        assert_eq!(out.outer_iterations, 0);
    }

    #[test]
    fn threshold_must_be_open_unit_interval() {
        assert!(NmsInput::new(&[], 0.0).is_err());
        assert!(NmsInput::new(&[], 1.0).is_err());
        assert!(NmsInput::new(&[], f64::NAN).is_err());
    }

    #[test]
    fn ties_break_to_lowest_index() {
        let d = [det(0., 0., 10., 10., 0.5), det(1., 0., 11., 10., 0.5)];
        let out = greedy_nms(NmsInput::new(&d, 0.5).unwrap());
        assert_eq!(out.kept_indices, vec![0]);
    }

    #[test]
    fn greedy_matches_reference_with_exact_recount() {
        let mut rng = seed::rng(11);
        for case in 0..300 {
            let n = rng.random_range(0..=120);
            let dets = random_dets(&mut rng, n);
            let thr = [0.3, 0.5, 0.7][case % 3];
            let out = greedy_nms(NmsInput::new(&dets, thr).unwrap());
            let (kept, count) = reference(&dets, thr);
            assert_eq!(out.kept_indices, kept, "case {case}");
            assert_eq!(out.comparison_count, count, "case {case}");
            assert_eq!(out.outer_iterations as usize, out.kept.len());
            assert!(out.comparison_count <= out.outer_iterations * n as u64);
        }
    }

    #[test]
    fn suppression_soundness_and_kept_compatibility() {
        let mut rng = seed::rng(12);
        for _ in 0..100 {
            let dets = random_dets(&mut rng, 80);
            let thr = 0.4;
            let out = greedy_nms(NmsInput::new(&dets, thr).unwrap());
            for (a, &ia) in out.kept_indices.iter().enumerate() {
                for &ib in &out.kept_indices[a + 1..] {
                    assert!(dets[ia].bbox.iou(&dets[ib].bbox) < thr);
                }
            }
            for i in (0..dets.len()).filter(|i| !out.kept_indices.contains(i)) {
                assert!(out
                    .kept_indices
                    .iter()
                    .any(|&k| { dets[k].score() >= dets[i].score() && dets[k].bbox.iou(&dets[i].bbox) >= thr }));
            }
        }
    }

    #[test]
    fn adding_lower_scored_boxes_never_reduces_comparisons() {
        let mut rng = seed::rng(13);
        for _ in 0..100 {
            let mut dets = random_dets(&mut rng, 60);
            dets.sort_by(|a, b| b.score().total_cmp(&a.score()));
            let mut prev = 0;
            for n in 0..=dets.len() {
                let c = greedy_nms(NmsInput::new(&dets[..n], 0.5).unwrap()).comparison_count;
                assert!(c >= prev);
                prev = c;
            }
        }
    }

    #[test]
    fn adding_a_disjoint_object_never_reduces_comparisons() {
        let mut rng = seed::rng(14);
        for _ in 0..100 {
            let base = random_dets(&mut rng, 40);
            let shifted: Vec<Detection> = random_dets(&mut rng, 30)
                .into_iter()
                .map(|d| {
                    let [x0, y0, x1, y1] = d.bbox.corners();
                    det(x0 + 1000.0, y0, x1 + 1000.0, y1, d.score())
                })
                .collect();
            let alone = greedy_nms(NmsInput::new(&base, 0.5).unwrap()).comparison_count;
            let mut both = base.clone();
            both.extend(shifted);
            let together = greedy_nms(NmsInput::new(&both, 0.5).unwrap()).comparison_count;
            assert!(together >= alone);
        }
    }

    #[test]
    fn a_new_top_box_can_reduce_comparisons() {
        // Six disjoint unit boxes need 5+4+3+2+1 comparisons. A wider,
        // higher-scoring box suppressing two of them replaces that with
        // 6 + (3+2+1).
        let singles: Vec<Detection> = (0..6)
            .map(|i| det(3.0 * i as f64, 0.0, 3.0 * i as f64 + 1.0, 1.0, 0.5))
            .collect();
        let before = greedy_nms(NmsInput::new(&singles, 0.2).unwrap()).comparison_count;
        let mut more = singles.clone();
        more.push(det(0.0, 0.0, 4.0, 1.0, 0.9));
        let after = greedy_nms(NmsInput::new(&more, 0.2).unwrap()).comparison_count;
        assert_eq!((before, after), (15, 12));
    }

    #[test]
    fn constant_time_examples() {
        let empty = constant_time_nms(NmsInput::new(&[], 0.5).unwrap(), 64).unwrap();
        assert!(empty.kept.is_empty());
        assert_eq!(empty.comparison_count, constant_time_comparisons(64));
        assert!(empty.padded);

        let d = [det(0., 0., 10., 10., 0.9), det(0., 0., 10., 10., 0.8)];
        let ct = constant_time_nms(NmsInput::new(&d, 0.5).unwrap(), 64).unwrap();
        let greedy = greedy_nms(NmsInput::new(&d, 0.5).unwrap());
        assert_eq!(ct.kept, greedy.kept);
        assert_eq!(ct.comparison_count, empty.comparison_count);
    }

    #[test]
    fn constant_time_count_is_single_valued_over_random_inputs() {
        let mut rng = seed::rng(14);
        let mut counts = std::collections::BTreeSet::new();
        for _ in 0..100 {
            let n = rng.random_range(0..=64);
            let dets = random_dets(&mut rng, n);
            let ct = constant_time_nms(NmsInput::new(&dets, 0.5).unwrap(), 64).unwrap();
            counts.insert(ct.comparison_count);
            let greedy = greedy_nms(NmsInput::new(&dets, 0.5).unwrap());
            assert_eq!(ct.kept_indices, greedy.kept_indices);
        }
        assert_eq!(counts.len(), 1);
    }

    #[test]
    fn constant_time_rejects_overflow() {
        let d = vec![det(0., 0., 1., 1., 0.5); 5];
        match constant_time_nms(NmsInput::new(&d, 0.5).unwrap(), 4) {
            Err(Error::CapacityExceeded { capacity: 4, count: 5 }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn random_delay_examples() {
        let d = [det(0., 0., 10., 10., 0.9), det(0., 0., 10., 10., 0.8)];
        let input = NmsInput::new(&d, 0.5).unwrap();
        let (out, delay) = random_delay_nms(input, &NoiseSpec::gaussian(0.0), 1).unwrap();
        assert_eq!(out, greedy_nms(input));
        assert_eq!(delay, 0.0);
        let (_, delay) = random_delay_nms(input, &NoiseSpec::Constant { value: 0.005 }, 1).unwrap();
        assert_eq!(delay, 0.005);
        let uniform = NoiseSpec::Uniform { low: 0.0, high: 0.010 };
        let (_, a) = random_delay_nms(input, &uniform, 99).unwrap();
        let (_, b) = random_delay_nms(input, &uniform, 99).unwrap();
        assert_eq!(a, b);
        assert!((0.0..0.010).contains(&a));
    }

    #[test]
    fn modeled_time_examples() {
        let model = NmsCostModel::new(1e-6, 5e-6, 100e-6).unwrap();
        assert_eq!(modeled_nms_time(&NmsOutcome::empty(), &model), 100e-6);
        let out = NmsOutcome {
            comparison_count: 10,
            outer_iterations: 2,
            ..NmsOutcome::empty()
        };
        assert!((modeled_nms_time(&out, &model) - 120e-6).abs() < 1e-15);
        let linear = NmsCostModel::new(1e-6, 0.0, 0.0).unwrap();
        let single = NmsOutcome {
            comparison_count: 10,
            ..NmsOutcome::empty()
        };
        let doubled = NmsOutcome {
            comparison_count: 20,
            ..NmsOutcome::empty()
        };
        assert_eq!(
            modeled_nms_time(&doubled, &linear),
            2.0 * modeled_nms_time(&single, &linear)
        );
        assert!(NmsCostModel::new(0.0, 0.0, 0.0).is_err());
        assert!(NmsCostModel::new(1e-6, -1.0, 0.0).is_err());
    }

    proptest! {
        #[test]
        fn constant_time_count_depends_only_on_capacity(
            seed_value in any::<u64>(),
            n in 0usize..=32,
            thr in 0.05f64..0.95,
        ) {
            let mut rng = seed::rng(seed_value);
            let dets = random_dets(&mut rng, n);
            let ct = constant_time_nms(NmsInput::new(&dets, thr).unwrap(), 32).unwrap();
            prop_assert_eq!(ct.comparison_count, constant_time_comparisons(32));
            prop_assert_eq!(ct.outer_iterations, 32);
            let greedy = greedy_nms(NmsInput::new(&dets, thr).unwrap());
            prop_assert_eq!(ct.kept_indices, greedy.kept_indices);
        }
    }
}
