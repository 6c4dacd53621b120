//! 2D metric tabletop: boxes, ground-truth spatial predicates, normalized
//! features, rasterization and pick-and-place dynamics.
//!
//! Coordinates are centimetres; x grows to the right and y grows away from the
//! viewer, so "behind" means larger y.

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::langparse::Relation;

pub const TABLE_W: f64 = 60.0;
pub const TABLE_D: f64 = 60.0;
/// Clearance required by the directional predicates.
pub const MARGIN: f64 = 0.5;
pub const STEP_CM: f64 = 5.0;
pub const RASTER_RES: usize = 72;
/// Gain of [`SpatialFeatures::network_input`]: one input unit is 6 cm of table.
pub const INPUT_SCALE: f64 = 10.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectInstance {
    pub id: u32,
    pub category: String,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    #[serde(rename = "container")]
    pub is_container: bool,
    pub color: [f64; 3],
    /// Sampled yaw in degrees; recorded only, boxes stay axis-aligned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orientation: Option<f64>,
}

impl ObjectInstance {
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.cx, self.cy)
    }

    fn overlaps(&self, other: &ObjectInstance) -> bool {
        (self.cx - other.cx).abs() < (self.w + other.w) / 2.0 && (self.cy - other.cy).abs() < (self.h + other.h) / 2.0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub objects: Vec<ObjectInstance>,
    pub held: Option<u32>,
}

/// `(cx/W, cy/D, w/W, h/D)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialFeatures(pub [f64; 4]);

impl SpatialFeatures {
    pub fn of(o: &ObjectInstance) -> Self {
        SpatialFeatures([o.cx / TABLE_W, o.cy / TABLE_D, o.w / TABLE_W, o.h / TABLE_D])
    }

    /// Back to centimetres: (cx, cy, w, h).
    pub fn denormalize(&self) -> [f64; 4] {
        let [x, y, w, h] = self.0;
        [x * TABLE_W, y * TABLE_D, w * TABLE_W, h * TABLE_D]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// Encoding fed to networks: centres relative to the table middle, then
    /// everything multiplied by [`INPUT_SCALE`].
    pub fn network_input(&self) -> [f64; 4] {
        let [x, y, w, h] = self.0;
        [(x - 0.5) * INPUT_SCALE, (y - 0.5) * INPUT_SCALE, w * INPUT_SCALE, h * INPUT_SCALE]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Forward,
    Backward,
    Right,
    Left,
}

impl Action {
    pub const ALL: [Action; 4] = [Action::Forward, Action::Backward, Action::Right, Action::Left];

    pub fn from_index(i: usize) -> Action {
        Action::ALL[i]
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn delta(self) -> (f64, f64) {
        match self {
            Action::Forward => (0.0, 1.0),
            Action::Backward => (0.0, -1.0),
            Action::Right => (1.0, 0.0),
            Action::Left => (-1.0, 0.0),
        }
    }
}

/// Signed clearance of the predicate: `>= 0` exactly when it holds.
///
/// For `In` the size condition is a hard gate (`-inf` when the subject does
/// not fit or the object is not a container).
pub fn relation_slack(s: &ObjectInstance, o: &ObjectInstance, relation: Relation) -> f64 {
    match relation {
        Relation::LeftOf => (o.cx - o.w / 2.0) - (s.cx + s.w / 2.0 + MARGIN),
        Relation::RightOf => (s.cx - s.w / 2.0) - (o.cx + o.w / 2.0 + MARGIN),
        Relation::Behind => (s.cy - s.h / 2.0) - (o.cy + o.h / 2.0 + MARGIN),
        Relation::In => {
            if !o.is_container || s.w > o.w || s.h > o.h {
                f64::NEG_INFINITY
            } else {
                (o.w / 2.0 - (s.cx - o.cx).abs()).min(o.h / 2.0 - (s.cy - o.cy).abs())
            }
        }
    }
}

/// Ground-truth predicate on two boxes.
pub fn relation_holds(s: &ObjectInstance, o: &ObjectInstance, relation: Relation) -> bool {
    match relation {
        Relation::LeftOf => s.cx + s.w / 2.0 + MARGIN <= o.cx - o.w / 2.0,
        Relation::RightOf => s.cx - s.w / 2.0 >= o.cx + o.w / 2.0 + MARGIN,
        Relation::Behind => s.cy - s.h / 2.0 >= o.cy + o.h / 2.0 + MARGIN,
        Relation::In => {
            o.is_container
                && (s.cx - o.cx).abs() <= o.w / 2.0
                && (s.cy - o.cy).abs() <= o.h / 2.0
                && s.w <= o.w
                && s.h <= o.h
        }
    }
}

impl Scene {
    pub fn get(&self, id: u32) -> Result<&ObjectInstance> {
        self.objects.iter().find(|o| o.id == id).ok_or(Error::UnknownId(id))
    }

    fn get_mut(&mut self, id: u32) -> Result<&mut ObjectInstance> {
        self.objects.iter_mut().find(|o| o.id == id).ok_or(Error::UnknownId(id))
    }

    /// Largest object of `category` (lowest id on equal area).
    pub fn find_category(&self, category: &str) -> Option<&ObjectInstance> {
        self.objects
            .iter()
            .filter(|o| o.category == category)
            .fold(None, |best: Option<&ObjectInstance>, o| match best {
                Some(b) if b.area() >= o.area() => Some(b),
                _ => Some(o),
            })
    }

    pub fn next_id(&self) -> u32 {
        self.objects.iter().map(|o| o.id + 1).max().unwrap_or(0)
    }

    pub fn predicate_holds(&self, subject_id: u32, object_id: u32, relation: Relation) -> Result<bool> {
        if subject_id == object_id {
            return Err(Error::SelfRelation(subject_id));
        }
        Ok(relation_holds(self.get(subject_id)?, self.get(object_id)?, relation))
    }

    pub fn normalized_features(&self, id: u32) -> Result<SpatialFeatures> {
        Ok(SpatialFeatures::of(self.get(id)?))
    }

    pub fn held_object(&self) -> Result<&ObjectInstance> {
        self.get(self.held.ok_or(Error::NothingHeld)?)
    }

    /// Move the held object one step, keeping its whole box on the table.
    pub fn apply_action(&self, action: Action, step: f64) -> Result<Scene> {
        let id = self.held.ok_or(Error::NothingHeld)?;
        let mut next = self.clone();
        let o = next.get_mut(id)?;
        let (dx, dy) = action.delta();
        o.cx = (o.cx + dx * step).clamp(o.w / 2.0, TABLE_W - o.w / 2.0);
        o.cy = (o.cy + dy * step).clamp(o.h / 2.0, TABLE_D - o.h / 2.0);
        Ok(next)
    }

    pub fn release_object(&self) -> Result<Scene> {
        if self.held.is_none() {
            return Err(Error::NothingHeld);
        }
        Ok(Scene { held: None, ..self.clone() })
    }

    /// Reflect about the table's vertical midline.
    pub fn mirror(&self) -> Scene {
        let mut m = self.clone();
        for o in &mut m.objects {
            o.cx = TABLE_W - o.cx;
        }
        m
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Scene {
        let mut m = self.clone();
        for o in &mut m.objects {
            o.cx += dx;
            o.cy += dy;
        }
        m
    }

    /// Top-down 3 x res x res raster; row 0 is the far edge of the table.
    /// Objects are painted in list order with the held object last.
    pub fn rasterize(&self, res: usize) -> Array3<f64> {
        let mut img = Array3::zeros((3, res, res));
        let px_w = TABLE_W / res as f64;
        let px_d = TABLE_D / res as f64;
        let order = self
            .objects
            .iter()
            .filter(|o| Some(o.id) != self.held)
            .chain(self.objects.iter().filter(|o| Some(o.id) == self.held));
        for o in order {
            let (x0, x1) = (o.cx - o.w / 2.0, o.cx + o.w / 2.0);
            let (y0, y1) = (o.cy - o.h / 2.0, o.cy + o.h / 2.0);
            for row in 0..res {
                let y = TABLE_D - (row as f64 + 0.5) * px_d;
                if y < y0 || y > y1 {
                    continue;
                }
                for col in 0..res {
                    let x = (col as f64 + 0.5) * px_w;
                    if x >= x0 && x <= x1 {
                        for c in 0..3 {
                            img[[c, row, col]] = o.color[c];
                        }
                    }
                }
            }
        }
        img
    }

    /// Pixel (row, col) containing a table point.
    pub fn pixel_of(x: f64, y: f64, res: usize) -> (usize, usize) {
        let col = ((x / TABLE_W) * res as f64).floor().clamp(0.0, res as f64 - 1.0) as usize;
        let row = (((TABLE_D - y) / TABLE_D) * res as f64).floor().clamp(0.0, res as f64 - 1.0) as usize;
        (row, col)
    }

    /// True if a box at (cx, cy) of size (w, h) overlaps no object other than
    /// containers and the ones listed in `ignore`.
    pub fn placement_is_plausible(&self, cx: f64, cy: f64, w: f64, h: f64, ignore: &[u32]) -> bool {
        if cx - w / 2.0 < 0.0 || cx + w / 2.0 > TABLE_W || cy - h / 2.0 < 0.0 || cy + h / 2.0 > TABLE_D {
            return false;
        }
        let probe = ObjectInstance {
            id: u32::MAX,
            category: String::new(),
            cx,
            cy,
            w,
            h,
            is_container: false,
            color: [0.0; 3],
            orientation: None,
        };
        self.objects
            .iter()
            .filter(|o| !ignore.contains(&o.id) && !o.is_container)
            .all(|o| !probe.overlaps(o))
    }

    /// True if the box overlaps nothing at all (containers included).
    pub fn is_free(&self, cx: f64, cy: f64, w: f64, h: f64, ignore: &[u32]) -> bool {
        let probe = ObjectInstance {
            id: u32::MAX,
            category: String::new(),
            cx,
            cy,
            w,
            h,
            is_container: false,
            color: [0.0; 3],
            orientation: None,
        };
        cx - w / 2.0 >= 0.0
            && cx + w / 2.0 <= TABLE_W
            && cy - h / 2.0 >= 0.0
            && cy + h / 2.0 <= TABLE_D
            && self.objects.iter().filter(|o| !ignore.contains(&o.id)).all(|o| !probe.overlaps(o))
    }
}

/// Noise model of the stand-in object detector.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectionNoise {
    /// Gaussian jitter on the box center, cm.
    pub jitter_sigma: f64,
    pub p_miss: f64,
}

impl DetectionNoise {
    pub fn validate(&self) -> Result<()> {
        if !(self.jitter_sigma >= 0.0) || !(0.0..1.0).contains(&self.p_miss) {
            return Err(Error::InvalidNoise(format!("sigma={} p_miss={}", self.jitter_sigma, self.p_miss)));
        }
        Ok(())
    }
}

/// Detect the largest object of `category`; `Ok(None)` is a missed detection.
pub fn oracle_detect<R: Rng + ?Sized>(
    scene: &Scene,
    category: &str,
    noise: &DetectionNoise,
    rng: &mut R,
) -> Result<Option<SpatialFeatures>> {
    noise.validate()?;
    let obj = scene.find_category(category).ok_or_else(|| Error::UnknownCategory(category.to_owned()))?;
    if noise.p_miss > 0.0 && rng.random::<f64>() < noise.p_miss {
        return Ok(None);
    }
    let mut o = obj.clone();
    if noise.jitter_sigma > 0.0 {
        let n = Normal::new(0.0, noise.jitter_sigma).expect("valid sigma");
        o.cx = (o.cx + n.sample(rng)).clamp(0.0, TABLE_W);
        o.cy = (o.cy + n.sample(rng)).clamp(0.0, TABLE_D);
    }
    Ok(Some(SpatialFeatures::of(&o)))
}

/// One entry of the object library.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategorySpec {
    pub name: String,
    pub container: bool,
    /// Side lengths are drawn independently from this range (cm).
    pub size: (f64, f64),
    pub color: [f64; 3],
    pub seen: bool,
}

impl CategorySpec {
    fn new(name: &str, container: bool, size: (f64, f64), color: [f64; 3], seen: bool) -> Self {
        Self { name: name.into(), container, size, color, seen }
    }

    /// Instantiate with a random size.
    pub fn instantiate<R: Rng + ?Sized>(&self, id: u32, cx: f64, cy: f64, rng: &mut R) -> ObjectInstance {
        let (lo, hi) = self.size;
        let mut draw = || if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let w = draw();
        let h = draw();
        ObjectInstance {
            id,
            category: self.name.clone(),
            cx,
            cy,
            w,
            h,
            is_container: self.container,
            color: self.color,
            orientation: None,
        }
    }
}

/// Graspable subjects and reference objects, with a seen/unseen split. Unseen
/// categories have colors and sizes outside the seen ones.
pub fn default_library() -> Vec<CategorySpec> {
    vec![
        CategorySpec::new("orange", false, (3.0, 4.5), [1.0, 0.55, 0.0], true),
        CategorySpec::new("apple", false, (3.0, 4.5), [0.85, 0.1, 0.1], true),
        CategorySpec::new("mug", false, (3.0, 4.5), [0.2, 0.4, 0.9], true),
        CategorySpec::new("cup", false, (3.0, 4.5), [0.9, 0.9, 0.9], true),
        CategorySpec::new("lemon", false, (3.0, 4.5), [1.0, 0.95, 0.2], true),
        CategorySpec::new("coke can", false, (3.0, 4.5), [0.6, 0.0, 0.1], true),
        CategorySpec::new("block", false, (3.0, 4.5), [0.55, 0.35, 0.15], true),
        CategorySpec::new("bowl", true, (5.0, 5.5), [0.7, 0.7, 0.75], true),
        CategorySpec::new("box", true, (5.0, 5.5), [0.45, 0.3, 0.2], true),
        CategorySpec::new("basket", true, (5.0, 5.5), [0.85, 0.7, 0.4], true),
        CategorySpec::new("plate", false, (5.0, 8.0), [0.95, 0.95, 0.85], true),
        CategorySpec::new("book", false, (6.0, 9.0), [0.3, 0.3, 0.6], true),
        CategorySpec::new("pear", false, (2.0, 2.8), [0.6, 0.9, 0.2], false),
        CategorySpec::new("eraser", false, (2.0, 2.8), [1.0, 0.4, 0.7], false),
        CategorySpec::new("tennis ball", false, (2.0, 2.8), [0.8, 1.0, 0.3], false),
        CategorySpec::new("bucket", true, (5.5, 6.5), [0.2, 0.8, 0.8], false),
        CategorySpec::new("pot", true, (5.5, 6.5), [0.4, 0.2, 0.55], false),
    ]
}

/// Subjects are the small graspable categories.
pub fn is_subject_category(c: &CategorySpec) -> bool {
    !c.container && c.size.1 <= 4.5
}

/// Sample a subject center relative to `object` such that the predicate
/// verdict equals `want` and, if given, the slack lies in `slack_range`.
/// Candidates are drawn in a square window of half-size `window` around the
/// object and must keep the subject box on the table.
#[allow(clippy::too_many_arguments)]
pub fn sample_subject_center<R: Rng + ?Sized>(
    rng: &mut R,
    relation: Relation,
    object: &ObjectInstance,
    subject_size: (f64, f64),
    want: bool,
    slack_range: Option<(f64, f64)>,
    window: f64,
    attempts: usize,
) -> Option<(f64, f64)> {
    let (w, h) = subject_size;
    let mut probe = ObjectInstance {
        id: u32::MAX,
        category: String::new(),
        cx: 0.0,
        cy: 0.0,
        w,
        h,
        is_container: false,
        color: [0.0; 3],
        orientation: None,
    };
    let xlo = (object.cx - window).max(w / 2.0);
    let xhi = (object.cx + window).min(TABLE_W - w / 2.0);
    let ylo = (object.cy - window).max(h / 2.0);
    let yhi = (object.cy + window).min(TABLE_D - h / 2.0);
    if xlo >= xhi || ylo >= yhi {
        return None;
    }
    for _ in 0..attempts {
        probe.cx = rng.random_range(xlo..=xhi);
        probe.cy = rng.random_range(ylo..=yhi);
        if relation_holds(&probe, object, relation) != want {
            continue;
        }
        if let Some((lo, hi)) = slack_range {
            let s = relation_slack(&probe, object, relation);
            if !(s >= lo && s < hi) {
                continue;
            }
        }
        return Some((probe.cx, probe.cy));
    }
    None
}
