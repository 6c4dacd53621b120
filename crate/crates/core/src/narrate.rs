//! Synthetic narrated demonstrations, utterance segmentation and
//! positive/negative frame mining.
//!
//! A video is a run of tasks. Each task moves one subject from a configuration
//! that violates the narrated relation to one that satisfies it while the
//! narration stays constant. With probability `p_reuse` the next task keeps the
//! same object pair and starts where the previous one ended, so the first
//! frames of a task are configurations of the same objects that satisfy a
//! different relation: those are the hard negatives.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::langparse::{self, ParsedExpression, Relation};
use crate::rng;
use crate::world::{self, relation_holds, CategorySpec, ObjectInstance, Scene, TABLE_D, TABLE_W};

pub const DATASET_FORMAT: &str = "nvd-synth";
pub const DATASET_VERSION: u32 = 1;

/// Narration templates; `{s}`, `{r}` and `{o}` are subject, relation phrase
/// and object. Tasks rotate through them.
pub const TEMPLATES: [&str; 4] = [
    "the {s} is {r} the {o}",
    "I am placing the {s} {r} the {o}",
    "put the {s} {r} the {o}",
    "the {s} should be {r} the {o}",
];

/// Phrasings never produced by the generator, for generalization checks.
pub const HELD_OUT_TEMPLATE: &str = "now the {s} must be {r} the {o}";

/// Relation phrases used in generated narration.
pub fn relation_phrases(relation: Relation) -> &'static [&'static str] {
    match relation {
        Relation::In => &["in", "inside"],
        Relation::Behind => &["behind"],
        Relation::LeftOf => &["left of", "to the left of"],
        Relation::RightOf => &["right of", "to the right of"],
    }
}

/// Synonyms held out of generated narration.
pub fn held_out_phrases(relation: Relation) -> &'static [&'static str] {
    match relation {
        Relation::In => &["into"],
        Relation::Behind => &["in back of"],
        Relation::LeftOf => &["to the left of"],
        Relation::RightOf => &["to the right of"],
    }
}

pub fn render(template: &str, subject: &str, phrase: &str, object: &str) -> String {
    template.replace("{s}", subject).replace("{r}", phrase).replace("{o}", object)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n_videos: usize,
    /// Inclusive range of tasks per video.
    pub tasks_per_video: (usize, usize),
    pub frames_per_task: usize,
    pub n_frames_per_side: usize,
    pub p_reuse: f64,
    /// Slack range of freshly sampled start configurations (cm, negative =
    /// violated by that much).
    pub start_slack: (f64, f64),
    /// Slack range of end configurations.
    pub end_slack: (f64, f64),
    pub frame_jitter: f64,
    /// Extra objects per scene that the narration does not mention.
    pub distractors: (usize, usize),
    pub seed: u64,
    pub library: Vec<CategorySpec>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_videos: 4,
            tasks_per_video: (14, 30),
            frames_per_task: 12,
            n_frames_per_side: 3,
            p_reuse: 0.7,
            start_slack: (-15.0, -0.5),
            end_slack: (0.0, 8.0),
            frame_jitter: 0.5,
            distractors: (1, 2),
            seed: 0,
            library: world::default_library(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.tasks_per_video;
        if !(14..=30).contains(&lo) || !(lo..=30).contains(&hi) {
            return Err(Error::InvalidConfig(format!("tasks_per_video {lo}..={hi} outside 14..=30")));
        }
        if self.n_frames_per_side == 0 || self.frames_per_task < 2 * self.n_frames_per_side {
            return Err(Error::InvalidConfig(format!(
                "frames_per_task {} < 2 * n_frames_per_side {}",
                self.frames_per_task, self.n_frames_per_side
            )));
        }
        if !(0.0..=1.0).contains(&self.p_reuse) {
            return Err(Error::InvalidConfig(format!("p_reuse {} outside [0, 1]", self.p_reuse)));
        }
        if self.n_videos == 0 {
            return Err(Error::InvalidConfig("n_videos must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Start,
    Mid,
    End,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub task_idx: usize,
    pub utterance: String,
    pub scene: Scene,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Demonstration {
    pub video_id: usize,
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub video_id: usize,
    pub utterance: String,
    pub parsed: ParsedExpression,
    /// Inclusive frame index range inside the demonstration.
    pub range: (usize, usize),
    pub x_minus: Vec<usize>,
    pub x_plus: Vec<usize>,
}

/// A frame inside a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FrameRef {
    pub video: usize,
    pub frame: usize,
    /// Segment the frame was drawn from.
    pub segment: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: GeneratorConfig,
    pub demos: Vec<Demonstration>,
}

impl Dataset {
    pub fn frame(&self, video: usize, frame: usize) -> &Frame {
        &self.demos[video].frames[frame]
    }

    pub fn total_frames(&self) -> usize {
        self.demos.iter().map(|d| d.frames.len()).sum()
    }

    /// Segments of every demonstration, in video order.
    pub fn segments(&self) -> Vec<Segment> {
        self.demos
            .iter()
            .flat_map(|d| segment_by_utterance(d, self.config.n_frames_per_side))
            .collect()
    }
}

struct Task {
    scene: Scene,
    subject: u32,
    object: u32,
    relation: Relation,
}

fn subject_categories(lib: &[CategorySpec]) -> Vec<&CategorySpec> {
    lib.iter().filter(|c| c.seen && world::is_subject_category(c)).collect()
}

fn reference_categories(lib: &[CategorySpec]) -> Vec<&CategorySpec> {
    lib.iter().filter(|c| c.seen && !world::is_subject_category(c)).collect()
}

/// Fresh scene with a subject/object pair and distractors; the subject is
/// placed so that `relation` is violated.
fn fresh_task<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R, forced: Option<Relation>) -> Result<Task> {
    let subjects = subject_categories(&cfg.library);
    let refs = reference_categories(&cfg.library);
    if subjects.is_empty() || refs.is_empty() {
        return Err(Error::GenerationFailure("object library has no seen subjects or references".into()));
    }
    for _ in 0..1000 {
        let relation = forced.unwrap_or_else(|| *Relation::ALL.choose(rng).expect("non-empty"));
        let candidates: Vec<_> = refs.iter().filter(|c| relation != Relation::In || c.container).collect();
        let Some(obj_spec) = candidates.choose(rng) else {
            return Err(Error::GenerationFailure(format!("no reference category supports {relation}")));
        };
        let subj_spec = subjects.choose(rng).expect("non-empty");
        let mut scene = Scene::default();
        let object = obj_spec.instantiate(0, rng.random_range(12.0..48.0), rng.random_range(12.0..48.0), rng);
        scene.objects.push(object.clone());
        let subject_proto = subj_spec.instantiate(1, 0.0, 0.0, rng);
        let Some((cx, cy)) = world::sample_subject_center(
            rng,
            relation,
            &object,
            (subject_proto.w, subject_proto.h),
            false,
            Some(cfg.start_slack),
            15.0,
            1000,
        ) else {
            continue;
        };
        if !scene.placement_is_plausible(cx, cy, subject_proto.w, subject_proto.h, &[]) {
            continue;
        }
        scene.objects.push(ObjectInstance { cx, cy, ..subject_proto });

        let n_distract = rng.random_range(cfg.distractors.0..=cfg.distractors.1);
        let others: Vec<&CategorySpec> = cfg
            .library
            .iter()
            .filter(|c| c.seen && c.name != obj_spec.name && c.name != subj_spec.name)
            .collect();
        let mut placed = 0;
        for _ in 0..200 {
            if placed == n_distract {
                break;
            }
            let spec = others.choose(rng).expect("library has distractor categories");
            if scene.objects.iter().any(|o| o.category == spec.name) {
                continue;
            }
            let d = spec.instantiate(scene.next_id(), rng.random_range(3.0..TABLE_W - 3.0), rng.random_range(3.0..TABLE_D - 3.0), rng);
            // Keep a corridor around the pair so the demonstration path stays clear.
            let near_pair = scene.objects[..2]
                .iter()
                .any(|o| (o.cx - d.cx).abs() < 18.0 && (o.cy - d.cy).abs() < 18.0);
            if !near_pair && scene.is_free(d.cx, d.cy, d.w, d.h, &[]) {
                scene.objects.push(d);
                placed += 1;
            }
        }
        return Ok(Task { scene, subject: 1, object: 0, relation });
    }
    Err(Error::GenerationFailure("could not sample a start configuration in 1000 attempts".into()))
}

fn end_position<R: Rng + ?Sized>(cfg: &GeneratorConfig, task: &Task, rng: &mut R) -> Result<(f64, f64)> {
    let object = task.scene.get(task.object)?;
    let subject = task.scene.get(task.subject)?;
    for _ in 0..1000 {
        if let Some((cx, cy)) = world::sample_subject_center(
            rng,
            task.relation,
            object,
            (subject.w, subject.h),
            true,
            Some(cfg.end_slack),
            15.0,
            1,
        ) {
            if task.scene.placement_is_plausible(cx, cy, subject.w, subject.h, &[task.subject]) {
                return Ok((cx, cy));
            }
        }
    }
    Err(Error::GenerationFailure(format!("no satisfying placement for {} in 1000 attempts", task.relation)))
}

/// Fraction of the start-to-end path covered at frame `k`: flat over the first
/// and last `side` frames, linear in between.
fn path_fraction(k: usize, frames: usize, side: usize) -> f64 {
    let moving = frames - 2 * side + 1;
    ((k as f64 - (side as f64 - 1.0)) / moving as f64).clamp(0.0, 1.0)
}

fn task_frames<R: Rng + ?Sized>(
    cfg: &GeneratorConfig,
    task: &Task,
    end: (f64, f64),
    task_idx: usize,
    utterance: &str,
    rng: &mut R,
) -> Result<(Vec<Frame>, Scene)> {
    let start = task.scene.get(task.subject)?.center();
    let object = task.scene.get(task.object)?.clone();
    let side = cfg.n_frames_per_side;
    let f = cfg.frames_per_task;
    let mut frames = Vec::with_capacity(f);
    for k in 0..f {
        let phase = if k < side {
            Phase::Start
        } else if k >= f - side {
            Phase::End
        } else {
            Phase::Mid
        };
        let t = path_fraction(k, f, side);
        let base = (start.0 + t * (end.0 - start.0), start.1 + t * (end.1 - start.1));
        let mut scene = task.scene.clone();
        scene.held = (phase == Phase::Mid).then_some(task.subject);
        let subject = scene.objects.iter_mut().find(|o| o.id == task.subject).expect("subject present");
        let j = cfg.frame_jitter;
        let (jx, jy) = if j > 0.0 { (rng.random_range(-j..=j), rng.random_range(-j..=j)) } else { (0.0, 0.0) };
        subject.cx = (base.0 + jx).clamp(subject.w / 2.0, TABLE_W - subject.w / 2.0);
        subject.cy = (base.1 + jy).clamp(subject.h / 2.0, TABLE_D - subject.h / 2.0);
        let want = match phase {
            Phase::Start => Some(false),
            Phase::End => Some(true),
            Phase::Mid => None,
        };
        if let Some(want) = want {
            if relation_holds(subject, &object, task.relation) != want {
                (subject.cx, subject.cy) = base;
            }
        }
        frames.push(Frame { task_idx, utterance: utterance.to_owned(), scene, phase });
    }
    let mut end_scene = task.scene.clone();
    end_scene.held = None;
    if let Some(s) = end_scene.objects.iter_mut().find(|o| o.id == task.subject) {
        (s.cx, s.cy) = end;
    }
    Ok((frames, end_scene))
}

fn generate_video(cfg: &GeneratorConfig, video_id: usize) -> Result<Demonstration> {
    let mut rng = rng::indexed(cfg.seed, "narrate.video", video_id as u64);
    let n_tasks = rng.random_range(cfg.tasks_per_video.0..=cfg.tasks_per_video.1);
    let mut frames = Vec::new();
    let mut prev: Option<(Task, String)> = None;
    for task_idx in 0..n_tasks {
        let mut task = None;
        if let Some((p, _)) = &prev {
            if rng.random::<f64>() < cfg.p_reuse {
                let subject = p.scene.get(p.subject)?;
                let object = p.scene.get(p.object)?;
                let options: Vec<Relation> = Relation::ALL
                    .into_iter()
                    .filter(|&r| r != p.relation && (r != Relation::In || object.is_container))
                    .filter(|&r| !relation_holds(subject, object, r))
                    .collect();
                if let Some(&relation) = options.choose(&mut rng) {
                    task = Some(Task { scene: p.scene.clone(), subject: p.subject, object: p.object, relation });
                }
            }
        }
        let task = match task {
            Some(t) => t,
            None => fresh_task(cfg, &mut rng, None)?,
        };
        let end = end_position(cfg, &task, &mut rng)?;
        let subject = task.scene.get(task.subject)?.category.clone();
        let object = task.scene.get(task.object)?.category.clone();
        let mut template_idx = task_idx % TEMPLATES.len();
        let phrase = *relation_phrases(task.relation).choose(&mut rng).expect("phrases");
        let mut utterance = render(TEMPLATES[template_idx], &subject, phrase, &object);
        // Consecutive tasks must differ in narration or they would merge.
        if prev.as_ref().is_some_and(|(_, u)| *u == utterance) {
            template_idx = (template_idx + 1) % TEMPLATES.len();
            utterance = render(TEMPLATES[template_idx], &subject, phrase, &object);
        }
        let (task_frames, end_scene) = task_frames(cfg, &task, end, task_idx, &utterance, &mut rng)?;
        frames.extend(task_frames);
        prev = Some((Task { scene: end_scene, ..task }, utterance));
    }
    Ok(Demonstration { video_id, frames })
}

/// Generate `config.n_videos` demonstrations; each video draws from its own
/// stream derived from `config.seed`.
pub fn generate_dataset(config: &GeneratorConfig) -> Result<Dataset> {
    config.validate()?;
    let demos = (0..config.n_videos).map(|v| generate_video(config, v)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset { config: config.clone(), demos })
}

/// A frame carries usable narration when it has exactly one utterance.
fn single_utterance(text: &str) -> bool {
    !text.trim().is_empty() && !text.contains('|')
}

/// Split a demonstration into maximal runs of identical narration.
///
/// Frames without narration or with overlapping utterances (joined by `|`)
/// are discarded and break runs. Runs shorter than `2 * side` frames and
/// runs whose narration does not parse are dropped with a warning.
pub fn segment_by_utterance(demo: &Demonstration, side: usize) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut start = 0;
    let frames = &demo.frames;
    while start < frames.len() {
        let text = &frames[start].utterance;
        if !single_utterance(text) {
            start += 1;
            continue;
        }
        let mut end = start;
        while end + 1 < frames.len() && frames[end + 1].utterance == *text {
            end += 1;
        }
        let len = end - start + 1;
        if len < 2 * side {
            log::warn!("video {}: dropping {len}-frame segment \"{text}\"", demo.video_id);
        } else {
            match langparse::parse_text(text) {
                Ok(parsed) => out.push(Segment {
                    video_id: demo.video_id,
                    utterance: text.clone(),
                    parsed,
                    range: (start, end),
                    x_minus: (start..start + side).collect(),
                    x_plus: (end + 1 - side..=end).collect(),
                }),
                Err(e) => log::warn!("video {}: skipping unparsed narration \"{text}\": {e}", demo.video_id),
            }
        }
        start = end + 1;
    }
    out
}

/// Every (positive, negative) frame pair of a segment.
pub fn mine_hard_pairs(segment: &Segment) -> Vec<(usize, usize)> {
    segment
        .x_plus
        .iter()
        .flat_map(|&p| segment.x_minus.iter().map(move |&m| (p, m)))
        .collect()
}

/// `count` frames from segments other than `query`: a source segment is
/// drawn uniformly, then a frame uniformly inside it.
pub fn sample_random_negatives<R: Rng + ?Sized>(
    segments: &[Segment],
    query: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<FrameRef>> {
    if segments.len() < 2 {
        return Err(Error::InsufficientData(format!("{} segment(s); need at least 2", segments.len())));
    }
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut s = rng.random_range(0..segments.len() - 1);
        if s >= query {
            s += 1;
        }
        let seg = &segments[s];
        let frame = rng.random_range(seg.range.0..=seg.range.1);
        out.push(FrameRef { video: seg.video_id, frame, segment: s });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    frames: usize,
    config: GeneratorConfig,
}

#[derive(Serialize, Deserialize)]
struct FrameLine {
    video_id: usize,
    task_idx: usize,
    frame_idx: usize,
    utterance: String,
    scene: Scene,
    phase: Phase,
}

/// JSONL: one header line, then one line per frame.
pub fn save_dataset(path: &Path, dataset: &Dataset) -> Result<()> {
    let mut out = BufWriter::new(std::fs::File::create(path)?);
    let header = Header {
        format: DATASET_FORMAT.into(),
        version: DATASET_VERSION,
        frames: dataset.total_frames(),
        config: dataset.config.clone(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for demo in &dataset.demos {
        for (frame_idx, f) in demo.frames.iter().enumerate() {
            let line = FrameLine {
                video_id: demo.video_id,
                task_idx: f.task_idx,
                frame_idx,
                utterance: f.utterance.clone(),
                scene: f.scene.clone(),
                phase: f.phase,
            };
            serde_json::to_writer(&mut out, &line)?;
            out.write_all(b"\n")?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let reader = BufReader::new(std::fs::File::open(path)?);
    let mut lines = reader.lines();
    let first = lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))??;
    let probe: serde_json::Value =
        serde_json::from_str(&first).map_err(|e| Error::Format(format!("bad header line: {e}")))?;
    if probe.get("format").and_then(|v| v.as_str()) != Some(DATASET_FORMAT) {
        return Err(Error::Format(format!("not a {DATASET_FORMAT} file")));
    }
    match probe.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == DATASET_VERSION as u64 => {}
        Some(v) => return Err(Error::Format(format!("unsupported dataset version {v}"))),
        None => return Err(Error::Format("header has no version".into())),
    }
    let header: Header = serde_json::from_value(probe).map_err(|e| Error::Format(format!("bad header: {e}")))?;
    let mut demos: Vec<Demonstration> = Vec::new();
    let mut count = 0;
    for (i, line) in lines.enumerate() {
        let line = line?;
        let f: FrameLine =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", i + 2)))?;
        if demos.last().is_none_or(|d| d.video_id != f.video_id) {
            demos.push(Demonstration { video_id: f.video_id, frames: Vec::new() });
        }
        let demo = demos.last_mut().expect("pushed above");
        if f.frame_idx != demo.frames.len() {
            return Err(Error::Format(format!("line {}: frame index {} out of order", i + 2, f.frame_idx)));
        }
        demo.frames.push(Frame { task_idx: f.task_idx, utterance: f.utterance, scene: f.scene, phase: f.phase });
        count += 1;
    }
    if count != header.frames {
        return Err(Error::Format(format!("truncated: header announces {} frames, found {count}", header.frames)));
    }
    Ok(Dataset { config: header.config, demos })
}
