//! Labeled benchmark scenes, classification accuracy, pool retrieval and
//! attention tables.

use std::fmt::Write as _;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DetectorModel, FeaturePair, Scorer};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::langparse::{self, Relation};
use crate::narrate::{relation_phrases, render, TEMPLATES};
use crate::rng;
use crate::world::{self, ObjectInstance, Scene};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    /// Scenes per relation, half positive.
    pub n: usize,
    /// Share of the negatives that violate the relation by less than `near_miss_band`.
    pub near_miss_fraction: f64,
    /// cm.
    pub near_miss_band: f64,
    /// Half-size (cm) of the square around the object where subjects are placed.
    pub window: f64,
    pub pool_size: usize,
    pub pool_positives: usize,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            n: 100,
            near_miss_fraction: 0.2,
            near_miss_band: 2.0 * world::MARGIN,
            window: 15.0,
            pool_size: 75,
            pool_positives: 15,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkItem {
    pub scene: Scene,
    pub subject: u32,
    pub object: u32,
    pub utterance: String,
    pub label: bool,
    #[serde(default)]
    pub near_miss: bool,
}

impl BenchmarkItem {
    pub fn features(&self) -> Result<FeaturePair> {
        Ok((self.scene.normalized_features(self.subject)?, self.scene.normalized_features(self.object)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub relation: Relation,
    pub items: Vec<BenchmarkItem>,
}

/// A retrieval pool: one object pair in many configurations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pool {
    pub relation: Relation,
    pub utterance: String,
    pub items: Vec<BenchmarkItem>,
}

fn pick_pair<R: Rng + ?Sized>(relation: Relation, rng: &mut R) -> (world::CategorySpec, world::CategorySpec) {
    let lib = world::default_library();
    let subjects: Vec<_> = lib.iter().filter(|c| c.seen && world::is_subject_category(c)).cloned().collect();
    let refs: Vec<_> = lib
        .iter()
        .filter(|c| c.seen && !world::is_subject_category(c) && (relation != Relation::In || c.container))
        .cloned()
        .collect();
    (subjects.choose(rng).expect("seen subjects").clone(), refs.choose(rng).expect("seen references").clone())
}

/// Place `subject` so that the verdict is `want` (and, for near misses, the
/// violation is within `band`).
fn place<R: Rng + ?Sized>(
    scene: &Scene,
    relation: Relation,
    object: &ObjectInstance,
    subject: &ObjectInstance,
    want: bool,
    near_miss: Option<f64>,
    window: f64,
    rng: &mut R,
) -> Result<ObjectInstance> {
    let slack = near_miss.map(|band| (-band, 0.0));
    for _ in 0..20_000 {
        if let Some((cx, cy)) =
            world::sample_subject_center(rng, relation, object, (subject.w, subject.h), want, slack, window, 1)
        {
            if scene.placement_is_plausible(cx, cy, subject.w, subject.h, &[subject.id]) {
                return Ok(ObjectInstance { cx, cy, ..subject.clone() });
            }
        }
    }
    Err(Error::GenerationFailure(format!("no {} placement for {relation} (want {want})", subject.category)))
}

fn item(
    object: &ObjectInstance,
    subject: ObjectInstance,
    utterance: String,
    relation: Relation,
    near_miss: bool,
) -> Result<BenchmarkItem> {
    let scene = Scene { objects: vec![object.clone(), subject], held: None };
    let label = scene.predicate_holds(1, 0, relation)?;
    Ok(BenchmarkItem { scene, subject: 1, object: 0, utterance, label, near_miss })
}

/// `n / 2` positive and `n / 2` negative scenes, each with its own object
/// pair; labels come from the ground-truth predicate.
pub fn gen_benchmark<R: Rng + ?Sized>(relation: Relation, config: &BenchmarkConfig, rng: &mut R) -> Result<Benchmark> {
    if !config.n.is_multiple_of(2) {
        return Err(Error::InvalidConfig(format!("benchmark size {} must be even", config.n)));
    }
    let half = config.n / 2;
    let near = (config.near_miss_fraction * half as f64).ceil() as usize;
    let mut items = Vec::with_capacity(config.n);
    for i in 0..config.n {
        let positive = i < half;
        let near_miss = !positive && i - half < near;
        let (s_spec, o_spec) = pick_pair(relation, rng);
        let object = o_spec.instantiate(0, rng.random_range(12.0..48.0), rng.random_range(12.0..48.0), rng);
        let subject = s_spec.instantiate(1, 0.0, 0.0, rng);
        let phrase = relation_phrases(relation)[0];
        let utterance = render(TEMPLATES[i % TEMPLATES.len()], &s_spec.name, phrase, &o_spec.name);
        let scene = Scene { objects: vec![object.clone()], held: None };
        let band = near_miss.then_some(config.near_miss_band);
        let subject = place(&scene, relation, &object, &subject, positive, band, config.window, rng)?;
        items.push(item(&object, subject, utterance, relation, near_miss)?);
    }
    items.shuffle(rng);
    Ok(Benchmark { relation, items })
}

/// One benchmark per relation, each from its own stream of `seed`.
pub fn gen_benchmarks(seed: u64, config: &BenchmarkConfig) -> Result<Vec<Benchmark>> {
    Relation::ALL
        .iter()
        .map(|&r| gen_benchmark(r, config, &mut rng::indexed(seed, "benchmark", r.index() as u64)))
        .collect()
}

/// `pool_size` configurations of a single object pair, `pool_positives` of
/// which satisfy the relation, in random order.
pub fn gen_pool<R: Rng + ?Sized>(relation: Relation, config: &BenchmarkConfig, rng: &mut R) -> Result<Pool> {
    if config.pool_positives > config.pool_size {
        return Err(Error::InvalidConfig("more pool positives than pool entries".into()));
    }
    let (s_spec, o_spec) = pick_pair(relation, rng);
    let object = o_spec.instantiate(0, rng.random_range(15.0..45.0), rng.random_range(15.0..45.0), rng);
    let subject = s_spec.instantiate(1, 0.0, 0.0, rng);
    let utterance = render(TEMPLATES[0], &s_spec.name, relation_phrases(relation)[0], &o_spec.name);
    let scene = Scene { objects: vec![object.clone()], held: None };
    let mut items = Vec::with_capacity(config.pool_size);
    for i in 0..config.pool_size {
        let s = place(&scene, relation, &object, &subject, i < config.pool_positives, None, config.window, rng)?;
        items.push(item(&object, s, utterance.clone(), relation, false)?);
    }
    items.shuffle(rng);
    Ok(Pool { relation, utterance, items })
}

/// Accuracy per relation in report column order.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerRelation {
    #[serde(rename = "in")]
    pub in_: f64,
    pub behind: f64,
    pub left: f64,
    pub right: f64,
}

impl PerRelation {
    pub fn get(&self, r: Relation) -> f64 {
        match r {
            Relation::In => self.in_,
            Relation::Behind => self.behind,
            Relation::LeftOf => self.left,
            Relation::RightOf => self.right,
        }
    }

    pub fn set(&mut self, r: Relation, v: f64) {
        match r {
            Relation::In => self.in_ = v,
            Relation::Behind => self.behind = v,
            Relation::LeftOf => self.left = v,
            Relation::RightOf => self.right = v,
        }
    }

    pub fn mean(&self) -> f64 {
        (self.in_ + self.behind + self.left + self.right) / 4.0
    }

    pub fn min(&self) -> f64 {
        self.in_.min(self.behind).min(self.left).min(self.right)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionTable {
    pub utterance: String,
    pub rows: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: PerRelation,
    pub average: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub precision_at_5: Option<PerRelation>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub attention: Vec<AttentionTable>,
}

impl EvalReport {
    pub fn from_accuracy(accuracy: PerRelation) -> Self {
        Self { average: accuracy.mean(), accuracy, precision_at_5: None, attention: Vec::new() }
    }

    /// Plain-text table: one row per metric, columns in, behind, left, right, avg.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<10}{:>8}{:>8}{:>8}{:>8}{:>8}", "", "in", "behind", "left", "right", "avg.");
        let mut row = |name: &str, p: &PerRelation| {
            let _ = writeln!(
                out,
                "{name:<10}{:>8.3}{:>8.3}{:>8.3}{:>8.3}{:>8.3}",
                p.in_,
                p.behind,
                p.left,
                p.right,
                p.mean()
            );
        };
        row("accuracy", &self.accuracy);
        if let Some(p) = &self.precision_at_5 {
            row("p@5", p);
        }
        for t in &self.attention {
            let _ = writeln!(out, "\n{}", t.utterance);
            for (tok, w) in &t.rows {
                let _ = writeln!(out, "  {tok:<12}{w:.3}");
            }
        }
        out
    }
}

/// Accuracy of the binary reward on each benchmark.
pub fn eval_classification<S: Scorer + ?Sized>(
    scorer: &S,
    benchmarks: &[Benchmark],
    exec: Execution,
) -> Result<EvalReport> {
    let mut acc = PerRelation::default();
    for r in Relation::ALL {
        let items: Vec<&BenchmarkItem> =
            benchmarks.iter().filter(|b| b.relation == r).flat_map(|b| &b.items).collect();
        if items.is_empty() {
            return Err(Error::InsufficientData(format!("no benchmark for relation {r}")));
        }
        let verdicts = exec::map_slice(exec, &items, |it| -> Result<bool> {
            let reward = scorer.rewards(&it.utterance, &[it.features()?])?[0];
            Ok(reward == it.label)
        });
        let correct = verdicts.into_iter().collect::<Result<Vec<_>>>()?.into_iter().filter(|&c| c).count();
        acc.set(r, correct as f64 / items.len() as f64);
    }
    Ok(EvalReport::from_accuracy(acc))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    /// Pool indices, best first.
    pub order: Vec<usize>,
    pub scores: Vec<f64>,
    pub precision_at_5: f64,
}

/// Sort the pool by unthresholded score, highest first; equal scores keep
/// pool order.
pub fn rank_pool<S: Scorer + ?Sized>(scorer: &S, utterance: &str, pool: &[BenchmarkItem]) -> Result<Ranking> {
    if pool.is_empty() {
        return Err(Error::InsufficientData("empty retrieval pool".into()));
    }
    let pairs = pool.iter().map(BenchmarkItem::features).collect::<Result<Vec<_>>>()?;
    let scores = scorer.scores(utterance, &pairs)?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let k = order.len().min(5);
    let hits = order[..k].iter().filter(|&&i| pool[i].label).count();
    Ok(Ranking { order, scores, precision_at_5: hits as f64 / k as f64 })
}

/// Attention weight of every token, per utterance.
pub fn attention_report(model: &DetectorModel, utterances: &[&str]) -> Result<Vec<AttentionTable>> {
    utterances
        .iter()
        .map(|&u| {
            let idx = model.token_indices(u)?;
            let trace = model.encoder.encode(&idx)?;
            let rows = langparse::tokenize(u).into_iter().zip(trace.weights.iter().copied()).collect();
            Ok(AttentionTable { utterance: u.to_owned(), rows })
        })
        .collect()
}
