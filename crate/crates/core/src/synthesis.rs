//! Analysis-by-synthesis goals: sample placements of the subject, score each
//! with the detector, keep the best.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::Scorer;
use crate::error::{Error, Result};
use crate::langparse;
use crate::rng;
use crate::world::{relation_holds, ObjectInstance, Scene, SpatialFeatures, TABLE_D, TABLE_W};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisConfig {
    /// Candidate placements drawn per goal.
    pub samples: usize,
    pub seed: u64,
    /// Half-size (cm) of the square around the object that candidates are drawn from.
    pub window: f64,
}

impl Default for SynthesisConfig {
    fn default() -> Self {
        Self { samples: 256, seed: 0, window: 15.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GoalConfiguration {
    /// Target subject center, cm.
    pub cx: f64,
    pub cy: f64,
    pub score: f64,
    /// Whether the ground-truth predicate holds at the goal; diagnostic only.
    pub satisfies_oracle: bool,
}

impl GoalConfiguration {
    pub fn center(&self) -> (f64, f64) {
        (self.cx, self.cy)
    }
}

/// Goal for `utterance` in `scene`, drawing candidates from the stream named
/// by `config.seed`.
pub fn synthesize_goal<S: Scorer + ?Sized>(
    scorer: &S,
    utterance: &str,
    scene: &Scene,
    config: &SynthesisConfig,
) -> Result<GoalConfiguration> {
    synthesize_goal_with(scorer, utterance, scene, config, &mut rng::stream(config.seed, "synthesis"))
}

/// As [`synthesize_goal`] with an explicit random source. Implausible
/// candidates are discarded; ties keep the first sampled candidate.
pub fn synthesize_goal_with<S: Scorer + ?Sized, R: Rng + ?Sized>(
    scorer: &S,
    utterance: &str,
    scene: &Scene,
    config: &SynthesisConfig,
    rng: &mut R,
) -> Result<GoalConfiguration> {
    if config.samples == 0 {
        return Err(Error::InvalidConfig("synthesis needs at least one sample".into()));
    }
    let parsed = langparse::parse_text(utterance)?;
    let find = |c: &str| scene.find_category(c).ok_or_else(|| Error::UnknownCategory(c.to_owned()));
    let subject = find(&parsed.subject)?;
    let object = find(&parsed.object)?;
    if subject.id == object.id {
        return Err(Error::SelfRelation(subject.id));
    }
    let (w, h) = (subject.w, subject.h);
    let xlo = (object.cx - config.window).max(w / 2.0);
    let xhi = (object.cx + config.window).min(TABLE_W - w / 2.0);
    let ylo = (object.cy - config.window).max(h / 2.0);
    let yhi = (object.cy + config.window).min(TABLE_D - h / 2.0);
    let mut candidates = Vec::with_capacity(config.samples);
    for _ in 0..config.samples {
        let cx = if xhi > xlo { rng.random_range(xlo..=xhi) } else { xlo };
        let cy = if yhi > ylo { rng.random_range(ylo..=yhi) } else { ylo };
        if scene.placement_is_plausible(cx, cy, w, h, &[subject.id]) {
            candidates.push(ObjectInstance { cx, cy, ..subject.clone() });
        }
    }
    if candidates.is_empty() {
        return Err(Error::NoPlausiblePlacement(config.samples));
    }
    let fo = SpatialFeatures::of(object);
    let pairs: Vec<_> = candidates.iter().map(|c| (SpatialFeatures::of(c), fo)).collect();
    let scores = scorer.scores(utterance, &pairs)?;
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let goal = &candidates[best];
    Ok(GoalConfiguration {
        cx: goal.cx,
        cy: goal.cy,
        score: scores[best],
        satisfies_oracle: relation_holds(goal, object, parsed.relation),
    })
}

/// Euclidean distance (cm) from the subject's current center to the goal.
pub fn shaping_reward(current: (f64, f64), goal: (f64, f64)) -> f64 {
    (current.0 - goal.0).hypot(current.1 - goal.1)
}
