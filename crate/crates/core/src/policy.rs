//! DQN pick-and-place policies on the tabletop.
//!
//! The agent holds the subject of an instruction and has `T` moves of a fixed
//! step before the gripper opens. Two state encodings are supported: the
//! ordered pair of subject/object boxes, and a top-down raster. Rewards come
//! from the ground-truth predicate, from the learned detector, or (binary-only)
//! from the predicate without shaping.

use std::collections::VecDeque;
use std::fmt::Write as _;

use ndarray::{Array1, Array2, Array3, ArrayViewD, ArrayViewMutD};
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::detector::Scorer;
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::langparse::Relation;
use crate::narrate::{relation_phrases, render, TEMPLATES};
use crate::nn::{huber, huber_grad, prefixed, relu, relu_backward, Adam, AdamConfig, Conv2d, ConvCache, Mlp, MlpCache, Parameters};
use crate::rng;
use crate::synthesis::{shaping_reward, synthesize_goal_with, SynthesisConfig};
use crate::world::{
    default_library, is_subject_category, relation_holds, Action, CategorySpec, ObjectInstance, Scene,
    MARGIN, RASTER_RES, TABLE_D, TABLE_W,
};

pub const OBJECT_LAYERS: [usize; 4] = [8, 512, 512, 4];
/// (out channels, kernel, stride) of the raster network's convolutions.
pub const RASTER_CONVS: [(usize, usize, usize); 5] = [(32, 5, 2), (32, 5, 2), (32, 3, 1), (16, 5, 2), (16, 3, 1)];
pub const RASTER_HEAD: [usize; 4] = [16 * 9 * 9, 256, 64, 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpisodeConfig {
    /// Moves per episode before release.
    pub horizon: usize,
    /// Distance of one move (cm).
    pub step: f64,
    /// Container center ranges (cm).
    pub region_x: (f64, f64),
    pub region_y: (f64, f64),
    pub distractors: (usize, usize),
    pub library: Vec<CategorySpec>,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            horizon: 5,
            step: 5.0,
            region_x: (10.0, 50.0),
            region_y: (20.0, 35.0),
            distractors: (1, 2),
            library: default_library(),
        }
    }
}

impl EpisodeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.horizon == 0 {
            return bad("horizon must be at least 1");
        }
        if !(self.step > 0.0) {
            return bad("step must be positive");
        }
        let (x0, x1) = self.region_x;
        let (y0, y1) = self.region_y;
        if !(0.0 <= x0 && x0 <= x1 && x1 <= TABLE_W && 0.0 <= y0 && y0 <= y1 && y1 <= TABLE_D) {
            return bad("container region must lie on the table");
        }
        if self.distractors.0 > self.distractors.1 {
            return bad("distractor range is reversed");
        }
        Ok(())
    }

    /// Half-size of the start box around the container (Chebyshev radius).
    pub fn reach(&self) -> f64 {
        self.horizon as f64 * self.step
    }
}

/// Which categories an episode draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectSet {
    Seen,
    Unseen,
}

/// One instruction to carry out: the scene at grasp time plus the roles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub scene: Scene,
    pub subject: u32,
    pub object: u32,
    pub relation: Relation,
    pub utterance: String,
}

impl Task {
    pub fn state(&self) -> PolicyState {
        PolicyState { scene: self.scene.clone(), subject: self.subject, object: self.object }
    }
}

/// What a Q-network looks at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub scene: Scene,
    pub subject: u32,
    pub object: u32,
}

impl PolicyState {
    /// Subject features first, then object features.
    pub fn object_input(&self) -> Result<[f64; 8]> {
        let s = self.scene.normalized_features(self.subject)?.network_input();
        let o = self.scene.normalized_features(self.object)?.network_input();
        Ok([s[0], s[1], s[2], s[3], o[0], o[1], o[2], o[3]])
    }

    pub fn raster(&self) -> Array3<f64> {
        self.scene.rasterize(RASTER_RES)
    }

    pub fn subject_center(&self) -> Result<(f64, f64)> {
        Ok(self.scene.get(self.subject)?.center())
    }

    fn moved(&self, action: Action, step: f64) -> Result<PolicyState> {
        Ok(PolicyState { scene: self.scene.apply_action(action, step)?, ..self.clone() })
    }
}

fn categories(lib: &[CategorySpec], set: ObjectSet) -> (Vec<&CategorySpec>, Vec<&CategorySpec>) {
    let seen = set == ObjectSet::Seen;
    let subjects = lib.iter().filter(|c| c.seen == seen && is_subject_category(c)).collect();
    let containers = lib.iter().filter(|c| c.seen == seen && c.container).collect();
    (subjects, containers)
}

/// Sample an "put the subject in the container" task whose start violates the
/// relation and can be solved in exactly `horizon` moves.
pub fn sample_task<R: Rng + ?Sized>(env: &EpisodeConfig, set: ObjectSet, rng: &mut R) -> Result<Task> {
    env.validate()?;
    let (subjects, containers) = categories(&env.library, set);
    if subjects.is_empty() || containers.is_empty() {
        return Err(Error::GenerationFailure(format!("library has no {set:?} subject or container")));
    }
    let reach = env.reach();
    for _ in 0..1000 {
        let s_spec = subjects.choose(rng).expect("non-empty");
        let o_spec = containers.choose(rng).expect("non-empty");
        let draw = |rng: &mut R, (lo, hi): (f64, f64)| if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let (ox, oy) = (draw(rng, env.region_x), draw(rng, env.region_y));
        let object = o_spec.instantiate(0, ox, oy, rng);
        let proto = s_spec.instantiate(1, 0.0, 0.0, rng);
        if proto.w > object.w || proto.h > object.h {
            continue;
        }
        let xr = ((ox - reach).max(proto.w / 2.0), (ox + reach).min(TABLE_W - proto.w / 2.0));
        let yr = ((oy - reach).max(proto.h / 2.0), (oy + reach).min(TABLE_D - proto.h / 2.0));
        let subject = ObjectInstance { cx: draw(rng, xr), cy: draw(rng, yr), ..proto };
        if relation_holds(&subject, &object, Relation::In) {
            continue;
        }
        let mut scene = Scene { objects: vec![object, subject], held: Some(1) };
        if oracle_plan(&scene, 1, 0, Relation::In, env.horizon, env.step).is_none() {
            continue;
        }
        add_distractors(&mut scene, env, rng);
        let template = TEMPLATES.choose(rng).expect("non-empty");
        let utterance = render(template, &s_spec.name, relation_phrases(Relation::In)[0], &o_spec.name);
        return Ok(Task { scene, subject: 1, object: 0, relation: Relation::In, utterance });
    }
    Err(Error::GenerationFailure("no reachable start in 1000 attempts".into()))
}

/// Free-standing scene with one object of every category in `set`:
/// containers inside the container region, everything else anywhere on the
/// table without overlaps. Nothing is held.
pub fn workspace_scene<R: Rng + ?Sized>(env: &EpisodeConfig, set: ObjectSet, rng: &mut R) -> Result<Scene> {
    env.validate()?;
    let seen = set == ObjectSet::Seen;
    let mut specs: Vec<&CategorySpec> = env.library.iter().filter(|c| c.seen == seen).collect();
    // Containers first, so they get the constrained region while it is empty.
    specs.sort_by_key(|c| !c.container);
    let mut scene = Scene::default();
    for spec in specs {
        let mut placed = false;
        for _ in 0..2000 {
            let (xr, yr) = if spec.container { (env.region_x, env.region_y) } else { ((3.0, TABLE_W - 3.0), (3.0, TABLE_D - 3.0)) };
            let cx = if xr.1 > xr.0 { rng.random_range(xr.0..=xr.1) } else { xr.0 };
            let cy = if yr.1 > yr.0 { rng.random_range(yr.0..=yr.1) } else { yr.0 };
            let o = spec.instantiate(scene.next_id(), cx, cy, rng);
            // Keep a one-centimetre gap so every object stays separately visible.
            if scene.is_free(o.cx, o.cy, o.w + 2.0, o.h + 2.0, &[]) && scene.is_free(o.cx, o.cy, o.w, o.h, &[]) {
                scene.objects.push(o);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::GenerationFailure(format!("no free spot for {}", spec.name)));
        }
    }
    Ok(scene)
}

fn add_distractors<R: Rng + ?Sized>(scene: &mut Scene, env: &EpisodeConfig, rng: &mut R) {
    let n = rng.random_range(env.distractors.0..=env.distractors.1);
    let pool: Vec<&CategorySpec> = env
        .library
        .iter()
        .filter(|c| !c.container && scene.objects.iter().all(|o| o.category != c.name))
        .collect();
    let mut placed = 0;
    for _ in 0..200 {
        if placed == n || pool.is_empty() {
            break;
        }
        let spec = pool.choose(rng).expect("non-empty");
        if scene.objects.iter().any(|o| o.category == spec.name) {
            continue;
        }
        let d = spec.instantiate(scene.next_id(), rng.random_range(3.0..TABLE_W - 3.0), rng.random_range(3.0..TABLE_D - 3.0), rng);
        if scene.is_free(d.cx, d.cy, d.w, d.h, &[]) {
            scene.objects.push(d);
            placed += 1;
        }
    }
}

/// Shortest move plan that ends with the relation satisfied after exactly
/// `horizon` moves (padded with out-and-back pairs), or `None`.
pub fn oracle_plan(scene: &Scene, subject: u32, object: u32, relation: Relation, horizon: usize, step: f64) -> Option<Vec<Action>> {
    let s = scene.get(subject).ok()?;
    let o = scene.get(object).ok()?;
    let t = horizon as i64;
    let mut best: Option<(i64, i64)> = None;
    for kx in -t..=t {
        for ky in -t..=t {
            let used = kx.abs() + ky.abs();
            if used > t || (t - used) % 2 != 0 {
                continue;
            }
            if best.is_some_and(|(bx, by)| bx.abs() + by.abs() <= used) {
                continue;
            }
            let end = ObjectInstance { cx: s.cx + kx as f64 * step, cy: s.cy + ky as f64 * step, ..s.clone() };
            let on_table = end.cx >= end.w / 2.0
                && end.cx <= TABLE_W - end.w / 2.0
                && end.cy >= end.h / 2.0
                && end.cy <= TABLE_D - end.h / 2.0;
            if on_table && relation_holds(&end, o, relation) {
                best = Some((kx, ky));
            }
        }
    }
    let (kx, ky) = best?;
    let mut plan = Vec::with_capacity(horizon);
    let hx = if kx >= 0 { Action::Right } else { Action::Left };
    let hy = if ky >= 0 { Action::Forward } else { Action::Backward };
    plan.extend(std::iter::repeat_n(hx, kx.unsigned_abs() as usize));
    plan.extend(std::iter::repeat_n(hy, ky.unsigned_abs() as usize));
    // Pad at the end with a pair that stays on the table.
    let end_y = s.cy + ky as f64 * step;
    let pair = if end_y + step <= TABLE_D - s.h / 2.0 {
        [Action::Forward, Action::Backward]
    } else {
        [Action::Backward, Action::Forward]
    };
    while plan.len() < horizon {
        plan.extend(pair);
    }
    Some(plan)
}

/// Nearest subject center at which the relation holds (cm). For `In` this is
/// the current center clamped into the container footprint.
pub fn oracle_goal(task: &Task) -> Result<(f64, f64)> {
    let s = task.scene.get(task.subject)?;
    let o = task.scene.get(task.object)?;
    let (hw, hh) = ((o.w + s.w) / 2.0 + MARGIN, (o.h + s.h) / 2.0 + MARGIN);
    Ok(match task.relation {
        Relation::In => (s.cx.clamp(o.cx - o.w / 2.0, o.cx + o.w / 2.0), s.cy.clamp(o.cy - o.h / 2.0, o.cy + o.h / 2.0)),
        Relation::LeftOf => (s.cx.min(o.cx - hw), s.cy),
        Relation::RightOf => (s.cx.max(o.cx + hw), s.cy),
        Relation::Behind => (s.cx, s.cy.max(o.cy + hh)),
    })
}

/// Source of the terminal binary reward (and whether shaping is used).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSource {
    /// Ground-truth predicate with shaping toward the nearest satisfying placement.
    Oracle,
    /// Detector binary reward with shaping toward a synthesized goal.
    Detector,
    /// Ground-truth predicate only, no shaping.
    BinaryOnly,
}

impl RewardSource {
    pub fn shaped(self) -> bool {
        self != RewardSource::BinaryOnly
    }
}

/// Per-step reward computation for one episode.
#[derive(Clone, Copy)]
pub struct RewardRule<'a> {
    pub source: RewardSource,
    pub goal: Option<(f64, f64)>,
    pub detector: Option<&'a dyn Scorer>,
    /// Reward per cm of progress toward the goal.
    pub shaping_scale: f64,
    pub bonus: f64,
    /// Use `-scale * d_t` instead of the distance difference.
    pub raw_distance: bool,
}

impl<'a> RewardRule<'a> {
    pub fn new(source: RewardSource, goal: Option<(f64, f64)>, detector: Option<&'a dyn Scorer>) -> Self {
        Self { source, goal, detector, shaping_scale: 0.1, bonus: 1.0, raw_distance: false }
    }

    fn distance(&self, state: &PolicyState) -> Result<Option<f64>> {
        if !self.source.shaped() {
            return Ok(None);
        }
        let goal = self.goal.ok_or(Error::NoGoal)?;
        Ok(Some(shaping_reward(state.subject_center()?, goal)))
    }

    /// Reward for arriving in `state`; `prev_distance` is the goal distance
    /// before the move. At the terminal step the binary reward is judged on
    /// the released scene.
    pub fn reward(&self, task: &Task, state: &PolicyState, prev_distance: Option<f64>, terminal: bool) -> Result<f64> {
        let mut r = 0.0;
        if let Some(d) = self.distance(state)? {
            r += if self.raw_distance {
                -self.shaping_scale * d
            } else {
                self.shaping_scale * (prev_distance.ok_or(Error::NoGoal)? - d)
            };
        }
        if terminal && self.binary(task, state)? {
            r += self.bonus;
        }
        Ok(r)
    }

    fn binary(&self, task: &Task, state: &PolicyState) -> Result<bool> {
        match self.source {
            RewardSource::Oracle | RewardSource::BinaryOnly => {
                state.scene.predicate_holds(state.subject, state.object, task.relation)
            }
            RewardSource::Detector => {
                let det = self.detector.ok_or(Error::MissingDetector)?;
                let pair = (state.scene.normalized_features(state.subject)?, state.scene.normalized_features(state.object)?);
                Ok(det.rewards(&task.utterance, &[pair])?[0])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: PolicyState,
    pub action: Action,
    pub reward: f64,
    pub next_state: PolicyState,
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub transitions: Vec<Transition>,
    /// Ground-truth verdict after release.
    pub success: bool,
    /// Scene after release.
    pub final_scene: Scene,
}

/// Play exactly `horizon` moves chosen by `choose(state, t)`, then release.
/// Without a reward rule every reward is zero.
pub fn run_episode<F>(task: &Task, env: &EpisodeConfig, rule: Option<&RewardRule<'_>>, mut choose: F) -> Result<Episode>
where
    F: FnMut(&PolicyState, usize) -> Result<Action>,
{
    env.validate()?;
    let mut state = task.state();
    let mut dist = match rule {
        Some(r) => r.distance(&state)?,
        None => None,
    };
    let mut transitions = Vec::with_capacity(env.horizon);
    for t in 0..env.horizon {
        let action = choose(&state, t)?;
        let next = state.moved(action, env.step)?;
        let terminal = t + 1 == env.horizon;
        let reward = match rule {
            Some(r) => {
                let judged = if terminal {
                    PolicyState { scene: next.scene.release_object()?, ..next.clone() }
                } else {
                    next.clone()
                };
                let rew = r.reward(task, &judged, dist, terminal)?;
                dist = r.distance(&next)?;
                rew
            }
            None => 0.0,
        };
        transitions.push(Transition { state, action, reward, next_state: next.clone(), terminal });
        state = next;
    }
    let final_scene = state.scene.release_object()?;
    let success = final_scene.predicate_holds(task.subject, task.object, task.relation)?;
    Ok(Episode { transitions, success, final_scene })
}

/// Uniform action with probability `epsilon`, otherwise the first argmax.
pub fn select_action<R: Rng + ?Sized>(q: &[f64; 4], epsilon: f64, rng: &mut R) -> Action {
    if epsilon > 0.0 && rng.random::<f64>() < epsilon {
        return Action::from_index(rng.random_range(0..4));
    }
    Action::from_index(argmax(q))
}

fn argmax(q: &[f64; 4]) -> usize {
    let mut best = 0;
    for i in 1..4 {
        if q[i] > q[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Object,
    Raster,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Object => "object",
            Variant::Raster => "raster",
        }
    }
}

/// Convolution stack plus dense head over a rendered frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterNet {
    pub convs: Vec<Conv2d>,
    pub head: Mlp,
}

struct RasterCache {
    convs: Vec<ConvCache>,
    /// Post-ReLU activation of every convolution.
    acts: Vec<Array3<f64>>,
}

impl RasterNet {
    pub fn new<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut in_ch = 3;
        let convs = RASTER_CONVS
            .iter()
            .map(|&(out, k, stride)| {
                let c = Conv2d::new(in_ch, out, k, stride, rng);
                in_ch = out;
                c
            })
            .collect();
        Self { convs, head: Mlp::new(&RASTER_HEAD, rng) }
    }

    fn features(&self, img: &Array3<f64>) -> Result<(Array1<f64>, RasterCache)> {
        let expected = (3, RASTER_RES, RASTER_RES);
        if img.dim() != expected {
            return Err(Error::ShapeMismatch(format!("raster input must be {expected:?}, got {:?}", img.dim())));
        }
        let mut caches = Vec::with_capacity(self.convs.len());
        let mut acts = Vec::with_capacity(self.convs.len());
        let mut x = img.clone();
        for conv in &self.convs {
            let (mut out, cache) = conv.forward(x.view())?;
            out.mapv_inplace(relu);
            caches.push(cache);
            acts.push(out.clone());
            x = out;
        }
        let flat = Array1::from_iter(x.iter().copied());
        Ok((flat, RasterCache { convs: caches, acts }))
    }

    fn conv_backward(&self, cache: &RasterCache, dflat: ndarray::ArrayView1<'_, f64>) -> Vec<Conv2d> {
        let last = cache.acts.last().expect("non-empty");
        let mut d = dflat.to_owned().into_shape_with_order(last.dim()).expect("flattened conv output");
        let mut grads = Vec::with_capacity(self.convs.len());
        for i in (0..self.convs.len()).rev() {
            d.zip_mut_with(&cache.acts[i], |g, &out| *g = relu_backward(out, *g));
            let (g, dx) = self.convs[i].backward(&cache.convs[i], d.view());
            grads.push(g);
            d = dx;
        }
        grads.reverse();
        grads
    }
}

impl Parameters for RasterNet {
    fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out: Vec<_> =
            self.convs.iter().enumerate().flat_map(|(i, c)| prefixed(&format!("c{i}"), c.named_tensors())).collect();
        out.extend(prefixed("head", self.head.named_tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out: Vec<_> = self.convs.iter_mut().flat_map(|c| c.tensors_mut()).collect();
        out.extend(self.head.tensors_mut());
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum QNetwork {
    Object(Mlp),
    Raster(RasterNet),
}

/// Encoded network inputs of a batch.
pub enum BatchInput {
    Object(Array2<f64>),
    Raster(Vec<Array3<f64>>),
}

impl BatchInput {
    pub fn len(&self) -> usize {
        match self {
            BatchInput::Object(x) => x.nrows(),
            BatchInput::Raster(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl QNetwork {
    pub fn new<R: Rng + ?Sized>(variant: Variant, rng: &mut R) -> Self {
        match variant {
            Variant::Object => QNetwork::Object(Mlp::new(&OBJECT_LAYERS, rng)),
            Variant::Raster => QNetwork::Raster(RasterNet::new(rng)),
        }
    }

    pub fn variant(&self) -> Variant {
        match self {
            QNetwork::Object(_) => Variant::Object,
            QNetwork::Raster(_) => Variant::Raster,
        }
    }

    pub fn zero_output_layer(&mut self) {
        match self {
            QNetwork::Object(m) => m.zero_output_layer(),
            QNetwork::Raster(r) => r.head.zero_output_layer(),
        }
    }

    pub fn encode(&self, states: &[&PolicyState]) -> Result<BatchInput> {
        Ok(match self {
            QNetwork::Object(_) => {
                let mut x = Array2::zeros((states.len(), 8));
                for (mut row, s) in x.outer_iter_mut().zip(states) {
                    row.assign(&Array1::from(s.object_input()?.to_vec()));
                }
                BatchInput::Object(x)
            }
            QNetwork::Raster(_) => BatchInput::Raster(states.iter().map(|s| s.raster()).collect()),
        })
    }

    /// Q-values, one row per input.
    pub fn predict(&self, input: &BatchInput, exec: Execution) -> Result<Array2<f64>> {
        match (self, input) {
            (QNetwork::Object(m), BatchInput::Object(x)) => m.predict(x.view()),
            (QNetwork::Raster(r), BatchInput::Raster(imgs)) => {
                let feats = raster_features(r, imgs, exec)?;
                r.head.predict(feats.view())
            }
            _ => Err(Error::ShapeMismatch("input encoding does not match the network variant".into())),
        }
    }

    pub fn q_values(&self, state: &PolicyState) -> Result<[f64; 4]> {
        let q = self.predict(&self.encode(&[state])?, Execution::Sequential)?;
        Ok([q[[0, 0]], q[[0, 1]], q[[0, 2]], q[[0, 3]]])
    }

    /// Mean Huber loss of `Q(s_i, a_i) - y_i` and its gradient.
    pub fn td_loss(&self, input: &BatchInput, actions: &[Action], targets: &[f64], exec: Execution) -> Result<(f64, QNetwork)> {
        let n = input.len();
        if n == 0 || actions.len() != n || targets.len() != n {
            return Err(Error::ShapeMismatch(format!("{n} inputs, {} actions, {} targets", actions.len(), targets.len())));
        }
        let huber_head = |q: &Array2<f64>| {
            let mut dq = Array2::zeros(q.dim());
            let mut loss = 0.0;
            for i in 0..n {
                let a = actions[i].index();
                let e = q[[i, a]] - targets[i];
                loss += huber(e) / n as f64;
                dq[[i, a]] = huber_grad(e) / n as f64;
            }
            (loss, dq)
        };
        match (self, input) {
            (QNetwork::Object(m), BatchInput::Object(x)) => {
                let (q, cache) = m.forward(x.view())?;
                let (loss, dq) = huber_head(&q);
                Ok((loss, QNetwork::Object(m.backward(&cache, dq.view()).0)))
            }
            (QNetwork::Raster(r), BatchInput::Raster(imgs)) => {
                let per: Vec<(Array1<f64>, RasterCache)> =
                    exec::map_slice(exec, imgs, |img| r.features(img)).into_iter().collect::<Result<_>>()?;
                let mut feats = Array2::zeros((n, RASTER_HEAD[0]));
                for (mut row, (f, _)) in feats.outer_iter_mut().zip(&per) {
                    row.assign(f);
                }
                let (q, head_cache): (Array2<f64>, MlpCache) = r.head.forward(feats.view())?;
                let (loss, dq) = huber_head(&q);
                let (head_grad, dfeats) = r.head.backward(&head_cache, dq.view());
                let conv_grads = exec::map_range(exec, n, |i| r.conv_backward(&per[i].1, dfeats.row(i)));
                let convs = sum_conv_grads(conv_grads).expect("non-empty batch");
                Ok((loss, QNetwork::Raster(RasterNet { convs, head: head_grad })))
            }
            _ => Err(Error::ShapeMismatch("input encoding does not match the network variant".into())),
        }
    }
}

fn raster_features(r: &RasterNet, imgs: &[Array3<f64>], exec: Execution) -> Result<Array2<f64>> {
    let per: Vec<Array1<f64>> =
        exec::map_slice(exec, imgs, |img| r.features(img).map(|(f, _)| f)).into_iter().collect::<Result<_>>()?;
    let mut feats = Array2::zeros((imgs.len(), RASTER_HEAD[0]));
    for (mut row, f) in feats.outer_iter_mut().zip(&per) {
        row.assign(f);
    }
    Ok(feats)
}

/// Layer-wise sum of per-sample convolution gradients, in sample order.
fn sum_conv_grads(per_sample: Vec<Vec<Conv2d>>) -> Option<Vec<Conv2d>> {
    let mut it = per_sample.into_iter();
    let mut acc = it.next()?;
    for g in it {
        for (a, b) in acc.iter_mut().zip(&g) {
            a.add_scaled(b, 1.0);
        }
    }
    Some(acc)
}

impl Parameters for QNetwork {
    fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        match self {
            QNetwork::Object(m) => m.named_tensors(),
            QNetwork::Raster(r) => r.named_tensors(),
        }
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        match self {
            QNetwork::Object(m) => m.tensors_mut(),
            QNetwork::Raster(r) => r.tensors_mut(),
        }
    }
}

/// Something that picks moves during an episode.
pub trait Controller: Sync {
    fn act(&self, task: &Task, state: &PolicyState, t: usize, env: &EpisodeConfig, rng: &mut rng::Rng) -> Result<Action>;
}

impl Controller for QNetwork {
    fn act(&self, _: &Task, state: &PolicyState, _: usize, _: &EpisodeConfig, _: &mut rng::Rng) -> Result<Action> {
        Ok(Action::from_index(argmax(&self.q_values(state)?)))
    }
}

/// Follows [`oracle_plan`] from the current state.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePolicy;

impl Controller for OraclePolicy {
    fn act(&self, task: &Task, state: &PolicyState, t: usize, env: &EpisodeConfig, _: &mut rng::Rng) -> Result<Action> {
        let plan = oracle_plan(&state.scene, state.subject, state.object, task.relation, env.horizon - t, env.step);
        Ok(plan.map_or(Action::Forward, |p| p[0]))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPolicy;

impl Controller for RandomPolicy {
    fn act(&self, _: &Task, _: &PolicyState, _: usize, _: &EpisodeConfig, rng: &mut rng::Rng) -> Result<Action> {
        Ok(Action::from_index(rng.random_range(0..4)))
    }
}

/// Fraction of `n` fresh tasks from `set` that end with the predicate true.
/// Task `i` comes from stream `(seed, "policy.eval", i)`, so the result does
/// not depend on `exec`.
pub fn evaluate_policy<C: Controller + ?Sized>(
    controller: &C,
    env: &EpisodeConfig,
    n: usize,
    set: ObjectSet,
    seed: u64,
    exec: Execution,
) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidConfig("evaluation needs at least one episode".into()));
    }
    let outcomes = exec::map_range(exec, n, |i| -> Result<bool> {
        let mut rng = rng::indexed(seed, "policy.eval", i as u64);
        let task = sample_task(env, set, &mut rng)?;
        let ep = run_episode(&task, env, None, |s, t| controller.act(&task, s, t, env, &mut rng))?;
        Ok(ep.success)
    });
    let wins = outcomes.into_iter().collect::<Result<Vec<_>>>()?.into_iter().filter(|&w| w).count();
    Ok(wins as f64 / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DqnConfig {
    pub lr: f64,
    pub batch: usize,
    pub epsilon_start: f64,
    /// Subtracted every `epsilon_interval` action selections.
    pub epsilon_decay: f64,
    pub epsilon_interval: usize,
    pub epsilon_floor: f64,
    /// Action selections per gradient step.
    pub update_every: usize,
    pub discount: f64,
    pub replay_capacity: usize,
    pub warmup: usize,
    pub use_target: bool,
    /// Gradient steps between target-network syncs.
    pub target_sync: usize,
    pub episodes: usize,
    pub eval_every: usize,
    pub eval_episodes: usize,
    pub shaping_scale: f64,
    pub bonus: f64,
    pub raw_distance: bool,
    pub synthesis_samples: usize,
    pub seed: u64,
}

impl Default for DqnConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            batch: 128,
            epsilon_start: 0.8,
            epsilon_decay: 0.1,
            epsilon_interval: 1000,
            epsilon_floor: 0.05,
            update_every: 5,
            discount: 0.95,
            replay_capacity: 50_000,
            warmup: 1000,
            use_target: true,
            target_sync: 500,
            episodes: 8000,
            eval_every: 250,
            eval_episodes: 100,
            shaping_scale: 0.1,
            bonus: 1.0,
            raw_distance: false,
            synthesis_samples: 256,
            seed: 0,
        }
    }
}

impl DqnConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if self.batch == 0 || self.update_every == 0 || self.epsilon_interval == 0 || self.eval_every == 0 {
            return bad("batch, update_every, epsilon_interval and eval_every must be at least 1");
        }
        if self.eval_episodes == 0 || self.synthesis_samples == 0 {
            return bad("eval_episodes and synthesis_samples must be at least 1");
        }
        if self.use_target && self.target_sync == 0 {
            return bad("target_sync must be at least 1");
        }
        for (name, v) in [("epsilon_start", self.epsilon_start), ("epsilon_floor", self.epsilon_floor)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.discount) || self.epsilon_decay < 0.0 {
            return bad("discount must lie in [0, 1] and epsilon_decay must be non-negative");
        }
        if self.replay_capacity < self.batch {
            return bad("replay capacity is smaller than the batch");
        }
        Ok(())
    }

    /// Exploration rate after `selections` action selections.
    pub fn epsilon(&self, selections: usize) -> f64 {
        let steps = (selections / self.epsilon_interval) as f64;
        (self.epsilon_start - self.epsilon_decay * steps).max(self.epsilon_floor).clamp(0.0, 1.0)
    }
}

/// FIFO experience replay.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Transition>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { capacity, items: VecDeque::with_capacity(capacity.min(1 << 16)) }
    }

    pub fn push(&mut self, t: Transition) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(t);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        self.items.iter()
    }

    /// `n` uniform draws with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        (0..n).map(|_| &self.items[rng.random_range(0..self.items.len())]).collect()
    }
}

/// `y = r` at terminals, otherwise `r + discount * max_a Q_target(s', a)`.
pub fn td_targets(target: &QNetwork, batch: &[&Transition], discount: f64, exec: Execution) -> Result<Vec<f64>> {
    let next: Vec<&PolicyState> = batch.iter().map(|t| &t.next_state).collect();
    let q = target.predict(&target.encode(&next)?, exec)?;
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.terminal {
                t.reward
            } else {
                t.reward + discount * q.row(i).fold(f64::NEG_INFINITY, |m, &v| m.max(v))
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: usize,
    pub success_rate: f64,
    pub epsilon: f64,
    pub mean_td_loss: f64,
}

pub const CURVE_HEADER: &str = "episode,success_rate,epsilon,mean_td_loss";

pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut out = String::from(CURVE_HEADER);
    out.push('\n');
    for p in curve {
        writeln!(out, "{},{},{},{}", p.episode, p.success_rate, p.epsilon, p.mean_td_loss).expect("write to string");
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainedPolicy {
    pub net: QNetwork,
    pub curve: Vec<CurvePoint>,
}

/// Deep Q-learning on seen-object tasks. Collection is a single thread; the
/// minibatch gradient (raster variant) and evaluation go through `exec`.
pub fn train_dqn(
    env: &EpisodeConfig,
    cfg: &DqnConfig,
    source: RewardSource,
    variant: Variant,
    detector: Option<&dyn Scorer>,
    exec: Execution,
) -> Result<TrainedPolicy> {
    env.validate()?;
    cfg.validate()?;
    if source == RewardSource::Detector && detector.is_none() {
        return Err(Error::MissingDetector);
    }
    let mut net = QNetwork::new(variant, &mut rng::stream(cfg.seed, "policy.init"));
    let mut target = net.clone();
    let mut adam = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() });
    let mut rng = rng::stream(cfg.seed, "policy.collect");
    let mut replay = ReplayBuffer::new(cfg.replay_capacity);
    let synth = SynthesisConfig { samples: cfg.synthesis_samples, ..Default::default() };
    let eval_seed = rng::child_seed(cfg.seed, "policy.eval");
    let (mut selections, mut updates) = (0usize, 0usize);
    let (mut loss_sum, mut loss_n) = (0.0, 0usize);
    let mut curve = Vec::new();

    for episode in 1..=cfg.episodes {
        let task = sample_task(env, ObjectSet::Seen, &mut rng)?;
        let goal = match source {
            RewardSource::Oracle => Some(oracle_goal(&task)?),
            RewardSource::Detector => {
                let det = detector.expect("checked above");
                Some(synthesize_goal_with(det, &task.utterance, &task.scene, &synth, &mut rng)?.center())
            }
            RewardSource::BinaryOnly => None,
        };
        let rule = RewardRule {
            shaping_scale: cfg.shaping_scale,
            bonus: cfg.bonus,
            raw_distance: cfg.raw_distance,
            ..RewardRule::new(source, goal, detector)
        };
        let ep = run_episode(&task, env, Some(&rule), |state, _| {
            let eps = cfg.epsilon(selections);
            selections += 1;
            let q = net.q_values(state)?;
            Ok(select_action(&q, eps, &mut rng))
        })?;
        for (k, t) in ep.transitions.into_iter().enumerate() {
            replay.push(t);
            // Selection count at the time this transition was collected.
            let count = selections - env.horizon + k + 1;
            if count.is_multiple_of(cfg.update_every) && replay.len() >= cfg.warmup.max(cfg.batch) {
                let batch = replay.sample(cfg.batch, &mut rng);
                let reference = if cfg.use_target { &target } else { &net };
                let targets = td_targets(reference, &batch, cfg.discount, exec)?;
                let states: Vec<&PolicyState> = batch.iter().map(|t| &t.state).collect();
                let actions: Vec<Action> = batch.iter().map(|t| t.action).collect();
                let (loss, grad) = net.td_loss(&net.encode(&states)?, &actions, &targets, exec)?;
                adam.step(&mut net, &grad)?;
                updates += 1;
                loss_sum += loss;
                loss_n += 1;
                if cfg.use_target && updates % cfg.target_sync == 0 {
                    target = net.clone();
                }
            }
        }
        if episode % cfg.eval_every == 0 || episode == cfg.episodes {
            let success_rate = evaluate_policy(&net, env, cfg.eval_episodes, ObjectSet::Seen, eval_seed, exec)?;
            let mean_td_loss = if loss_n > 0 { loss_sum / loss_n as f64 } else { 0.0 };
            curve.push(CurvePoint { episode, success_rate, epsilon: cfg.epsilon(selections), mean_td_loss });
            log::info!("episode {episode}: success {success_rate:.3}, td loss {mean_td_loss:.4}");
            (loss_sum, loss_n) = (0.0, 0);
        }
    }
    Ok(TrainedPolicy { net, curve })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::ConstantScorer;
    use crate::nn::{grad_check, GradCheck};
    use rand::SeedableRng;

    fn env() -> EpisodeConfig {
        EpisodeConfig::default()
    }

    fn task(seed: u64) -> Task {
        sample_task(&env(), ObjectSet::Seen, &mut rng::stream(seed, "t")).unwrap()
    }

    #[test]
    fn sampled_tasks_are_reachable_violating_and_in_region() {
        let e = env();
        for set in [ObjectSet::Seen, ObjectSet::Unseen] {
            for i in 0..200 {
                let t = sample_task(&e, set, &mut rng::indexed(3, "t", i)).unwrap();
                let s = t.scene.get(t.subject).unwrap();
                let o = t.scene.get(t.object).unwrap();
                assert!(!relation_holds(s, o, Relation::In));
                assert!((10.0..=50.0).contains(&o.cx) && (20.0..=35.0).contains(&o.cy));
                assert!((s.cx - o.cx).abs() <= 25.0 && (s.cy - o.cy).abs() <= 25.0);
                assert_eq!(t.scene.held, Some(t.subject));
                let lib = default_library();
                let spec = |name: &str| lib.iter().find(|c| c.name == name).unwrap().seen;
                assert_eq!(spec(&s.category), set == ObjectSet::Seen);
                assert_eq!(spec(&o.category), set == ObjectSet::Seen);
                assert!(oracle_plan(&t.scene, 1, 0, Relation::In, 5, 5.0).is_some());
            }
        }
    }

    #[test]
    fn workspace_holds_every_category_once_without_overlap() {
        let e = env();
        for seed in 0..20 {
            let sc = workspace_scene(&e, ObjectSet::Seen, &mut rng::stream(seed, "w")).unwrap();
            let seen: Vec<_> = e.library.iter().filter(|c| c.seen).collect();
            assert_eq!(sc.objects.len(), seen.len());
            for c in seen {
                let o = sc.find_category(&c.name).unwrap();
                assert!(sc.is_free(o.cx, o.cy, o.w, o.h, &[o.id]));
            }
            assert_eq!(sc.held, None);
        }
    }

    #[test]
    fn episodes_have_exactly_horizon_transitions_and_release() {
        let t = task(1);
        let ep = run_episode(&t, &env(), None, |_, _| Ok(Action::Left)).unwrap();
        assert_eq!(ep.transitions.len(), 5);
        assert!(ep.transitions.iter().enumerate().all(|(i, tr)| tr.terminal == (i == 4)));
        assert_eq!(ep.final_scene.held, None);
    }

    #[test]
    fn cancelling_moves_inside_the_container_succeed() {
        let mut t = task(2);
        let (ox, oy) = t.scene.get(0).unwrap().center();
        for o in t.scene.objects.iter_mut().filter(|o| o.id == 1) {
            o.cx = ox;
            o.cy = oy;
        }
        // An odd horizon cannot cancel exactly, so use four moves.
        let e = EpisodeConfig { horizon: 4, ..env() };
        let seq = [Action::Left, Action::Right, Action::Forward, Action::Backward];
        let ep = run_episode(&t, &e, None, |_, k| Ok(seq[k])).unwrap();
        assert!(ep.success);
    }

    #[test]
    fn oracle_policy_always_succeeds_and_random_rarely() {
        let e = env();
        for set in [ObjectSet::Seen, ObjectSet::Unseen] {
            assert_eq!(evaluate_policy(&OraclePolicy, &e, 300, set, 9, Execution::Sequential).unwrap(), 1.0);
        }
        let r = evaluate_policy(&RandomPolicy, &e, 1000, ObjectSet::Seen, 9, Execution::Sequential).unwrap();
        assert!(r < 0.2, "random success {r}");
    }

    #[test]
    fn evaluation_matches_across_execution_modes() {
        let net = QNetwork::new(Variant::Object, &mut rng::stream(0, "n"));
        let e = env();
        let a = evaluate_policy(&net, &e, 64, ObjectSet::Seen, 4, Execution::Sequential).unwrap();
        let b = evaluate_policy(&net, &e, 64, ObjectSet::Seen, 4, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn select_action_argmax_and_uniform() {
        let mut r = rng::stream(0, "sel");
        assert_eq!(select_action(&[1.0, 3.0, 2.0, 0.0], 0.0, &mut r), Action::Backward);
        assert_eq!(select_action(&[2.0, 2.0, 2.0, 2.0], 0.0, &mut r), Action::Forward);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            counts[select_action(&[0.0, 9.0, 0.0, 0.0], 1.0, &mut r).index()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 0.25).abs() <= 0.02, "{counts:?}");
        }
    }

    #[test]
    fn epsilon_schedule() {
        let c = DqnConfig::default();
        assert_eq!(c.epsilon(0), 0.8);
        assert!((c.epsilon(2500) - 0.6).abs() < 1e-12);
        assert_eq!(c.epsilon(1_000_000), 0.05);
        for n in (0..20_000).step_by(37) {
            let expected = (0.8 - 0.1 * (n / 1000) as f64).max(0.05);
            assert!((c.epsilon(n) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn shaping_example_and_bonus() {
        let t = task(5);
        let mut st = t.state();
        let (sx, sy) = st.subject_center().unwrap();
        let goal = (sx + 20.0, sy);
        let rule = RewardRule::new(RewardSource::Oracle, Some(goal), None);
        let d0 = rule.distance(&st).unwrap();
        st = st.moved(Action::Right, 5.0).unwrap();
        let r = rule.reward(&t, &st, d0, false).unwrap();
        assert!((r - 0.5).abs() < 1e-12);

        let mut inside = t.state();
        let (ox, oy) = inside.scene.get(0).unwrap().center();
        for o in inside.scene.objects.iter_mut().filter(|o| o.id == 1) {
            o.cx = ox;
            o.cy = oy;
        }
        let rule = RewardRule::new(RewardSource::Oracle, Some((ox, oy)), None);
        assert!((rule.reward(&t, &inside, Some(0.0), true).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn binary_only_has_zero_nonterminal_rewards() {
        let t = task(6);
        let rule = RewardRule::new(RewardSource::BinaryOnly, None, None);
        let ep = run_episode(&t, &env(), Some(&rule), |s, _| OraclePolicy.act(&t, s, 0, &env(), &mut rng::stream(0, "x"))).unwrap();
        for tr in &ep.transitions[..4] {
            assert_eq!(tr.reward, 0.0);
        }
    }

    #[test]
    fn shaping_requires_a_goal_and_detector_source_a_detector() {
        let t = task(7);
        let rule = RewardRule::new(RewardSource::Oracle, None, None);
        assert!(matches!(run_episode(&t, &env(), Some(&rule), |_, _| Ok(Action::Left)), Err(Error::NoGoal)));
        let rule = RewardRule::new(RewardSource::Detector, Some((0.0, 0.0)), None);
        assert!(matches!(
            run_episode(&t, &env(), Some(&rule), |_, _| Ok(Action::Left)),
            Err(Error::MissingDetector)
        ));
        let cfg = DqnConfig { episodes: 1, ..Default::default() };
        assert!(matches!(
            train_dqn(&env(), &cfg, RewardSource::Detector, Variant::Object, None, Execution::Sequential),
            Err(Error::MissingDetector)
        ));
    }

    #[test]
    fn detector_terminal_reward_follows_the_scorer() {
        let t = task(8);
        let yes = ConstantScorer { score: 1.0, threshold: 0.0 };
        let rule = RewardRule::new(RewardSource::Detector, Some((0.0, 0.0)), Some(&yes));
        let st = t.state();
        let d = rule.distance(&st).unwrap();
        assert!((rule.reward(&t, &st, d, true).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_output_layer_gives_equal_q_values() {
        for v in [Variant::Object, Variant::Raster] {
            let mut net = QNetwork::new(v, &mut rng::stream(1, "z"));
            net.zero_output_layer();
            let q = net.q_values(&task(9).state()).unwrap();
            assert!(q.iter().all(|&x| x == q[0]));
        }
    }

    #[test]
    fn raster_rejects_wrong_shape() {
        let QNetwork::Raster(r) = QNetwork::new(Variant::Raster, &mut rng::stream(1, "z")) else { unreachable!() };
        assert!(matches!(r.features(&Array3::zeros((3, 64, 64))), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn object_state_is_ordered() {
        let t = task(10);
        let st = t.state();
        let swapped = PolicyState { subject: st.object, object: st.subject, ..st.clone() };
        let a = st.object_input().unwrap();
        let b = swapped.object_input().unwrap();
        assert_eq!(&a[..4], &b[4..]);
        assert_eq!(&a[4..], &b[..4]);
        let net = QNetwork::new(Variant::Object, &mut rng::stream(2, "o"));
        assert_ne!(net.q_values(&st).unwrap(), net.q_values(&swapped).unwrap());
    }

    fn td_check(variant: Variant, probes: usize) {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let net = QNetwork::new(variant, &mut r);
        let states: Vec<PolicyState> = (0..4).map(|i| task(20 + i).state()).collect();
        let refs: Vec<&PolicyState> = states.iter().collect();
        let input = net.encode(&refs).unwrap();
        let actions: Vec<Action> = (0..4).map(|i| Action::from_index(i % 4)).collect();
        let q = net.predict(&input, Execution::Sequential).unwrap();
        // Targets on both sides of the prediction, some beyond the Huber knee.
        let targets: Vec<f64> = (0..4).map(|i| q[[i, i % 4]] + [0.4, -0.3, 2.5, -3.0][i]).collect();
        let (_, grad) = net.td_loss(&input, &actions, &targets, Execution::Sequential).unwrap();
        let theta = net.flat();
        let err = grad_check(
            |p| {
                let mut probe = net.clone();
                probe.set_flat(p).unwrap();
                probe.td_loss(&input, &actions, &targets, Execution::Sequential).unwrap().0
            },
            &theta,
            &grad.flat(),
            &GradCheck::probes(probes),
            &mut r,
        )
        .unwrap();
        assert!(err < 1e-4, "{variant:?} relative error {err}");
    }

    #[test]
    fn object_td_gradient_matches_finite_differences() {
        td_check(Variant::Object, 300);
    }

    #[test]
    fn raster_td_gradient_matches_finite_differences() {
        td_check(Variant::Raster, 60);
    }

    #[test]
    fn raster_gradient_is_the_same_in_both_modes() {
        let net = QNetwork::new(Variant::Raster, &mut rng::stream(3, "r"));
        let states: Vec<PolicyState> = (0..3).map(|i| task(30 + i).state()).collect();
        let refs: Vec<&PolicyState> = states.iter().collect();
        let input = net.encode(&refs).unwrap();
        let actions = [Action::Left, Action::Right, Action::Forward];
        let targets = [0.1, -0.2, 0.3];
        let (la, ga) = net.td_loss(&input, &actions, &targets, Execution::Sequential).unwrap();
        let (lb, gb) = net.td_loss(&input, &actions, &targets, Execution::Parallel).unwrap();
        assert_eq!(la, lb);
        assert_eq!(ga, gb);
    }

    #[test]
    fn td_targets_use_terminal_flag() {
        let net = QNetwork::new(Variant::Object, &mut rng::stream(4, "t"));
        let st = task(40).state();
        let mk = |terminal| Transition { state: st.clone(), action: Action::Left, reward: 0.3, next_state: st.clone(), terminal };
        let (a, b) = (mk(true), mk(false));
        let y = td_targets(&net, &[&a, &b], 0.95, Execution::Sequential).unwrap();
        assert_eq!(y[0], 0.3);
        let q = net.q_values(&st).unwrap();
        assert!((y[1] - (0.3 + 0.95 * q.iter().cloned().fold(f64::MIN, f64::max))).abs() < 1e-12);
    }

    #[test]
    fn replay_is_fifo_and_bounded() {
        let st = task(41).state();
        let mut buf = ReplayBuffer::new(3);
        for i in 0..5 {
            buf.push(Transition { state: st.clone(), action: Action::Left, reward: i as f64, next_state: st.clone(), terminal: false });
        }
        assert_eq!(buf.len(), 3);
        assert_eq!(buf.iter().map(|t| t.reward).collect::<Vec<_>>(), vec![2.0, 3.0, 4.0]);
        assert_eq!(buf.sample(10, &mut rng::stream(0, "s")).len(), 10);
    }

    #[test]
    fn curve_csv_layout() {
        let csv = curve_to_csv(&[CurvePoint { episode: 250, success_rate: 0.5, epsilon: 0.6, mean_td_loss: 0.01 }]);
        assert_eq!(csv, "episode,success_rate,epsilon,mean_td_loss\n250,0.5,0.6,0.01\n");
    }

    #[test]
    fn short_training_is_deterministic() {
        let cfg = DqnConfig { episodes: 300, warmup: 200, batch: 16, eval_every: 100, eval_episodes: 20, ..Default::default() };
        let a = train_dqn(&env(), &cfg, RewardSource::Oracle, Variant::Object, None, Execution::Parallel).unwrap();
        let b = train_dqn(&env(), &cfg, RewardSource::Oracle, Variant::Object, None, Execution::Sequential).unwrap();
        assert_eq!(a.curve, b.curve);
        assert_eq!(a.net, b.net);
        assert_eq!(a.curve.len(), 3);
        assert!(a.curve.iter().all(|p| p.mean_td_loss.is_finite() && p.mean_td_loss > 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(DqnConfig::default().validate().is_ok());
        assert!(DqnConfig { batch: 0, ..Default::default() }.validate().is_err());
        assert!(DqnConfig { epsilon_start: 1.5, ..Default::default() }.validate().is_err());
        assert!(EpisodeConfig { horizon: 0, ..Default::default() }.validate().is_err());
        let err = serde_json::from_str::<DqnConfig>(r#"{"lr": 0.1, "bogus": 1}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"));
    }
}
