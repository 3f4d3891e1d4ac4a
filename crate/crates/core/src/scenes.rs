//! Seeded synthetic scene sets: single-object profile scenes, evasion
//! gadgets and member/nonmember sets for dataset inference.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::SyntheticDetector;
use crate::geometry::BoundingBox;
use crate::raster::Raster;
use crate::seed::{self, SimRng};
use crate::{Error, Result};

/// A planted single-object scene with its generating parameters.
#[derive(Debug, Clone)]
pub struct Scene {
    pub id: usize,
    pub raster: Raster,
    pub region: BoundingBox,
    pub n_boxes: usize,
    pub target_score: f64,
}

/// Parameters of a family of single-object scenes on a textured gray
/// background.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneFamily {
    /// Square scene side in pixels.
    pub size: usize,
    /// Square object region side in pixels.
    pub region_side: usize,
    /// Minimum distance between the region and the scene border.
    pub margin: usize,
    pub min_boxes: usize,
    pub max_boxes: usize,
    pub min_score: f64,
    pub max_score: f64,
    /// Background values are uniform in `0.5 ± texture`.
    pub texture: f64,
}

impl SceneFamily {
    /// 64×64 scenes for leakage profiling.
    pub fn profile() -> Self {
        Self {
            size: 64,
            region_side: 40,
            margin: 4,
            min_boxes: 1,
            max_boxes: 40,
            min_score: 0.65,
            max_score: 0.95,
            texture: 0.05,
        }
    }

    /// 32×32 gadgets for evasion.
    pub fn gadget() -> Self {
        Self {
            size: 32,
            region_side: 24,
            margin: 4,
            min_boxes: 2,
            max_boxes: 9,
            min_score: 0.65,
            max_score: 0.95,
            texture: 0.05,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.size == 0 || !self.size.is_multiple_of(crate::raster::DIM_MULTIPLE) {
            return Err(Error::param("scenes.size", "must be a positive multiple of 32"));
        }
        if self.region_side + 2 * self.margin > self.size {
            return Err(Error::param(
                "scenes.region_side",
                "region and margins exceed the scene",
            ));
        }
        if self.min_boxes == 0 || self.min_boxes > self.max_boxes {
            return Err(Error::param("scenes.min_boxes", "need 1 <= min_boxes <= max_boxes"));
        }
        if !(self.min_score <= self.max_score && self.max_score < 1.0) {
            return Err(Error::param("scenes.min_score", "need min_score <= max_score < 1"));
        }
        if !(0.0..=0.5).contains(&self.texture) {
            return Err(Error::param("scenes.texture", "must lie in [0, 0.5]"));
        }
        Ok(())
    }

    fn background(&self, rng: &mut SimRng) -> Result<Raster> {
        let n = self.size * self.size * crate::raster::CHANNELS;
        let data = (0..n)
            .map(|_| {
                if self.texture == 0.0 {
                    0.5
                } else {
                    0.5 + rng.random_range(-self.texture..self.texture) as f32
                }
            })
            .collect();
        Raster::new(self.size, self.size, data)
    }

    /// One scene with explicit object parameters; the region position is
    /// drawn from `rng`.
    pub fn scene_with(
        &self,
        det: &SyntheticDetector,
        rng: &mut SimRng,
        id: usize,
        n_boxes: usize,
        target_score: f64,
    ) -> Result<Scene> {
        self.validate()?;
        let slack = self.size - self.region_side - 2 * self.margin;
        let x0 = (self.margin + rng.random_range(0..=slack)) as f64;
        let y0 = (self.margin + rng.random_range(0..=slack)) as f64;
        let side = self.region_side as f64;
        let region = BoundingBox::new(x0, y0, x0 + side, y0 + side)?;
        let raster = det.plant_object(&self.background(rng)?, &region, target_score, n_boxes)?;
        Ok(Scene {
            id,
            raster,
            region,
            n_boxes,
            target_score,
        })
    }

    /// `count` scenes with box counts and confidences drawn uniformly from
    /// the family's ranges. Scene `i` depends only on `(master, i)`.
    pub fn generate(&self, det: &SyntheticDetector, count: usize, master: u64) -> Result<Vec<Scene>> {
        (0..count)
            .map(|i| {
                let mut rng = seed::rng(seed::indexed(master, "scene", i as u64));
                let n_boxes = rng.random_range(self.min_boxes..=self.max_boxes);
                let score = if self.min_score == self.max_score {
                    self.min_score
                } else {
                    rng.random_range(self.min_score..self.max_score)
                };
                self.scene_with(det, &mut rng, i, n_boxes, score)
            })
            .collect()
    }
}

/// Member/nonmember scene sets for dataset inference. A scene is "heavy"
/// (many candidate boxes, long NMS time) with the set's heavy fraction and
/// "light" otherwise, standing in for the confidence gap between training
/// and unseen data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MembershipFamily {
    pub light: SceneFamily,
    pub heavy: SceneFamily,
}

impl Default for MembershipFamily {
    fn default() -> Self {
        let light = SceneFamily {
            size: 32,
            region_side: 24,
            margin: 4,
            min_boxes: 1,
            max_boxes: 6,
            min_score: 0.65,
            max_score: 0.8,
            texture: 0.05,
        };
        Self {
            light,
            heavy: SceneFamily {
                min_boxes: 16,
                max_boxes: 25,
                min_score: 0.85,
                max_score: 0.95,
                ..light
            },
        }
    }
}

impl MembershipFamily {
    /// `count` scenes, each heavy with probability `heavy_fraction`.
    pub fn generate(
        &self,
        det: &SyntheticDetector,
        count: usize,
        heavy_fraction: f64,
        master: u64,
    ) -> Result<Vec<Scene>> {
        if !(0.0..=1.0).contains(&heavy_fraction) {
            return Err(Error::param("heavy_fraction", "must lie in [0, 1]"));
        }
        (0..count)
            .map(|i| {
                let mut rng = seed::rng(seed::indexed(master, "membership", i as u64));
                let family = if rng.random_bool(heavy_fraction) {
                    &self.heavy
                } else {
                    &self.light
                };
                let n_boxes = rng.random_range(family.min_boxes..=family.max_boxes);
                let score = rng.random_range(family.min_score..=family.max_score);
                family.scene_with(det, &mut rng, i, n_boxes, score)
            })
            .collect()
    }
}
