//! Contrastive training of encoder + relation module, then the threshold phase.

use ndarray::{s, Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DetectorModel, FeaturePair};
use crate::error::{Error, Result};
use crate::narrate::{sample_random_negatives, Dataset, Segment};
use crate::nn::{bce_with_logits, bce_with_logits_grad, Adam, AdamConfig, Parameters};
use crate::rng;
use crate::encoder::RELATION_DIM;
use crate::world::{DetectionNoise, ObjectInstance, SpatialFeatures, TABLE_D, TABLE_W};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum NegativeMode {
    /// Start frames of the same segment.
    #[default]
    Hard,
    /// Frames of other segments.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    /// `max(0, margin + S_neg - S_pos)`.
    #[default]
    Margin,
    /// `max(0, S_pos - S_neg)`, which rewards scoring negatives *higher*; kept
    /// to show that it drives the detector the wrong way.
    Printed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub margin: f64,
    pub epochs: usize,
    pub lr: f64,
    pub negative_mode: NegativeMode,
    pub seed: u64,
    pub threshold_epochs: usize,
    pub threshold_lr: f64,
    /// Steepness of the threshold sigmoid.
    pub kappa: f64,
    pub freeze_encoder: bool,
    pub loss: LossVariant,
    /// Uniform jitter (cm) on box centers and sizes, redrawn every epoch.
    pub augment_jitter: f64,
    /// Translate subject and object together by a random offset that keeps
    /// both on the table. The predicates are translation invariant.
    pub augment_shift: bool,
    pub noise: DetectionNoise,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            margin: 1.0,
            epochs: 50,
            lr: 0.001,
            negative_mode: NegativeMode::Hard,
            seed: 0,
            threshold_epochs: 30,
            threshold_lr: 0.01,
            kappa: 4.0,
            freeze_encoder: false,
            loss: LossVariant::Margin,
            augment_jitter: 1.0,
            augment_shift: true,
            noise: DetectionNoise::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::InvalidConfig(format!("margin must be positive, got {}", self.margin)));
        }
        if !(self.kappa > 0.0) {
            return Err(Error::InvalidConfig(format!("kappa must be positive, got {}", self.kappa)));
        }
        if !(self.lr > 0.0) || !(self.threshold_lr > 0.0) {
            return Err(Error::InvalidConfig("learning rates must be positive".into()));
        }
        if !(self.augment_jitter >= 0.0) {
            return Err(Error::InvalidConfig("augment_jitter must be non-negative".into()));
        }
        self.noise.validate()
    }
}

/// Loss and gradient of `sum_{p, n} hinge(S_p, S_n)` for one utterance.
pub fn contrastive_loss(
    model: &DetectorModel,
    tokens: &[usize],
    positives: &[FeaturePair],
    negatives: &[FeaturePair],
    margin: f64,
    variant: LossVariant,
) -> Result<(f64, DetectorModel)> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::EmptyPairSet);
    }
    let trace = model.encoder.encode(tokens)?;
    let pairs: Vec<FeaturePair> = positives.iter().chain(negatives).copied().collect();
    let x = DetectorModel::relation_inputs(&trace.embedding, &pairs);
    let (out, cache) = model.relation.forward(x.view())?;
    let scores = out.column(0);
    let np = positives.len();
    let mut loss = 0.0;
    let mut ds = Array2::<f64>::zeros((pairs.len(), 1));
    for p in 0..np {
        for n in np..pairs.len() {
            let (sp, sn) = (scores[p], scores[n]);
            match variant {
                LossVariant::Margin => {
                    let h = margin + sn - sp;
                    if h > 0.0 {
                        loss += h;
                        ds[[p, 0]] -= 1.0;
                        ds[[n, 0]] += 1.0;
                    }
                }
                LossVariant::Printed => {
                    let h = sp - sn;
                    if h > 0.0 {
                        loss += h;
                        ds[[p, 0]] += 1.0;
                        ds[[n, 0]] -= 1.0;
                    }
                }
            }
        }
    }
    let mut grad = model.zeros_like();
    let (g_rel, dx) = model.relation.backward(&cache, ds.view());
    grad.relation = g_rel;
    let dv: Array1<f64> = dx.slice(s![.., ..RELATION_DIM]).sum_axis(Axis(0));
    model.encoder.backward(&trace, &dv, &mut grad.encoder);
    Ok((loss, grad))
}

/// Mean cross-entropy of `sigmoid(kappa (S - tau))` against the labels, with
/// the gradient for the threshold network only.
pub fn threshold_loss(
    model: &DetectorModel,
    embedding: &Array1<f64>,
    scores: &[f64],
    labels: &[bool],
    kappa: f64,
) -> Result<(f64, crate::nn::Mlp)> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let x = embedding.view().insert_axis(Axis(0));
    let (out, cache) = model.threshold.forward(x)?;
    let tau = out[[0, 0]];
    let n = scores.len() as f64;
    let mut loss = 0.0;
    let mut dtau = 0.0;
    for (&s, &y) in scores.iter().zip(labels) {
        let z = kappa * (s - tau);
        let y = if y { 1.0 } else { 0.0 };
        loss += bce_with_logits(z, y) / n;
        dtau -= kappa * bce_with_logits_grad(z, y) / n;
    }
    let (grad, _) = model.threshold.backward(&cache, Array2::from_elem((1, 1), dtau).view());
    Ok((loss, grad))
}

/// Boxes of the narrated subject and object in one frame.
#[derive(Debug, Clone)]
struct FrameBoxes {
    subject: ObjectInstance,
    object: ObjectInstance,
}

struct Prepared {
    tokens: Vec<usize>,
    positives: Vec<FrameBoxes>,
    negatives: Vec<FrameBoxes>,
}

fn frame_boxes(dataset: &Dataset, seg: &Segment, frame: usize) -> Result<FrameBoxes> {
    let scene = &dataset.frame(seg.video_id, frame).scene;
    let find = |c: &str| scene.find_category(c).cloned().ok_or_else(|| Error::UnknownCategory(c.to_owned()));
    Ok(FrameBoxes { subject: find(&seg.parsed.subject)?, object: find(&seg.parsed.object)? })
}

fn prepare(model: &DetectorModel, dataset: &Dataset, segments: &[Segment]) -> Result<Vec<Prepared>> {
    segments
        .iter()
        .map(|seg| {
            let boxes = |idx: &[usize]| idx.iter().map(|&f| frame_boxes(dataset, seg, f)).collect::<Result<Vec<_>>>();
            Ok(Prepared {
                tokens: model.token_indices(&seg.utterance)?,
                positives: boxes(&seg.x_plus)?,
                negatives: boxes(&seg.x_minus)?,
            })
        })
        .collect()
}

fn perturb<R: Rng + ?Sized>(o: &ObjectInstance, cfg: &TrainConfig, rng: &mut R) -> Option<SpatialFeatures> {
    let mut o = o.clone();
    if cfg.noise.p_miss > 0.0 && rng.random::<f64>() < cfg.noise.p_miss {
        return None;
    }
    if cfg.noise.jitter_sigma > 0.0 {
        let n = Normal::new(0.0, cfg.noise.jitter_sigma).expect("validated sigma");
        o.cx += n.sample(rng);
        o.cy += n.sample(rng);
    }
    let j = cfg.augment_jitter;
    if j > 0.0 {
        o.cx += rng.random_range(-j..=j);
        o.cy += rng.random_range(-j..=j);
        o.w = (o.w + rng.random_range(-j..=j)).max(0.5);
        o.h = (o.h + rng.random_range(-j..=j)).max(0.5);
    }
    o.cx = o.cx.clamp(0.0, TABLE_W);
    o.cy = o.cy.clamp(0.0, TABLE_D);
    Some(SpatialFeatures::of(&o))
}

fn shifted<R: Rng + ?Sized>(b: &FrameBoxes, rng: &mut R) -> FrameBoxes {
    let (s, o) = (&b.subject, &b.object);
    let xlo = -(s.cx - s.w / 2.0).min(o.cx - o.w / 2.0);
    let xhi = TABLE_W - (s.cx + s.w / 2.0).max(o.cx + o.w / 2.0);
    let ylo = -(s.cy - s.h / 2.0).min(o.cy - o.h / 2.0);
    let yhi = TABLE_D - (s.cy + s.h / 2.0).max(o.cy + o.h / 2.0);
    let dx = if xhi > xlo { rng.random_range(xlo..=xhi) } else { 0.0 };
    let dy = if yhi > ylo { rng.random_range(ylo..=yhi) } else { 0.0 };
    let mv = |o: &ObjectInstance| ObjectInstance { cx: o.cx + dx, cy: o.cy + dy, ..o.clone() };
    FrameBoxes { subject: mv(s), object: mv(o) }
}

fn features<R: Rng + ?Sized>(frames: &[&FrameBoxes], cfg: &TrainConfig, rng: &mut R) -> Vec<FeaturePair> {
    frames
        .iter()
        .filter_map(|&b| {
            let moved;
            let b = if cfg.augment_shift {
                moved = shifted(b, rng);
                &moved
            } else {
                b
            };
            Some((perturb(&b.subject, cfg, rng)?, perturb(&b.object, cfg, rng)?))
        })
        .collect()
}

/// Random frames from other segments, seen through the query's own words: the
/// boxes are those of the query's subject and object categories in the drawn
/// frame. Frames that lack either category contribute nothing.
fn random_negative_boxes<R: Rng + ?Sized>(
    dataset: &Dataset,
    segments: &[Segment],
    query: usize,
    count: usize,
    rng: &mut R,
) -> Result<Vec<FrameBoxes>> {
    let q = &segments[query];
    Ok(sample_random_negatives(segments, query, count, rng)?
        .into_iter()
        .filter_map(|r| {
            let scene = &dataset.frame(r.video, r.frame).scene;
            Some(FrameBoxes {
                subject: scene.find_category(&q.parsed.subject)?.clone(),
                object: scene.find_category(&q.parsed.object)?.clone(),
            })
        })
        .collect())
}

fn parseable_segments(dataset: &Dataset) -> Result<Vec<Segment>> {
    let segments = dataset.segments();
    if segments.is_empty() {
        return Err(Error::NoParseableSegments);
    }
    Ok(segments)
}

/// Contrastive phase on a fresh model. Returns the model and the mean
/// per-segment loss of every epoch.
pub fn train_detector(dataset: &Dataset, config: &TrainConfig) -> Result<(DetectorModel, Vec<f64>)> {
    config.validate()?;
    let segments = parseable_segments(dataset)?;
    let utterances: Vec<String> = segments.iter().map(|s| s.utterance.clone()).collect();
    let mut model = DetectorModel::for_corpus(&utterances, &mut rng::stream(config.seed, "detector.init"))?;
    let history = train_contrastive(&mut model, dataset, &segments, config)?;
    Ok((model, history))
}

fn train_contrastive(
    model: &mut DetectorModel,
    dataset: &Dataset,
    segments: &[Segment],
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    if config.negative_mode == NegativeMode::Random && segments.len() < 2 {
        return Err(Error::InsufficientData("random negatives need at least two segments".into()));
    }
    let prepared = prepare(model, dataset, segments)?;
    let mut rng = rng::stream(config.seed, "detector.train");
    let mut adam = Adam::new(AdamConfig { lr: config.lr, ..Default::default() });
    let mut order: Vec<usize> = (0..segments.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut counted = 0;
        for &si in &order {
            let p = &prepared[si];
            let pos = features(&p.positives.iter().collect::<Vec<_>>(), config, &mut rng);
            let neg = match config.negative_mode {
                NegativeMode::Hard => features(&p.negatives.iter().collect::<Vec<_>>(), config, &mut rng),
                NegativeMode::Random => {
                    let drawn = random_negative_boxes(dataset, segments, si, p.negatives.len(), &mut rng)?;
                    features(&drawn.iter().collect::<Vec<_>>(), config, &mut rng)
                }
            };
            if pos.is_empty() || neg.is_empty() {
                continue;
            }
            let (loss, mut grad) = contrastive_loss(model, &p.tokens, &pos, &neg, config.margin, config.loss)?;
            if config.freeze_encoder {
                grad.encoder.fill(0.0);
            }
            adam.step(model, &grad)?;
            total += loss;
            counted += 1;
        }
        history.push(if counted > 0 { total / counted as f64 } else { 0.0 });
    }
    Ok(history)
}

/// Threshold phase: only the threshold network moves. Labels are 1 on end
/// frames and 0 on negatives chosen by the configured mode (start frames plus
/// random frames in hard mode, random frames only in random mode). Returns
/// the mean cross-entropy of every epoch.
pub fn train_threshold(model: &mut DetectorModel, dataset: &Dataset, config: &TrainConfig) -> Result<Vec<f64>> {
    config.validate()?;
    let segments = parseable_segments(dataset)?;
    if segments.len() < 2 {
        return Err(Error::InsufficientData("threshold training needs at least two segments".into()));
    }
    let prepared = prepare(model, dataset, &segments)?;
    let embeddings: Vec<Array1<f64>> =
        prepared.iter().map(|p| model.encoder.relation_embedding(&p.tokens)).collect::<Result<_>>()?;
    let mut rng = rng::stream(config.seed, "detector.threshold");
    let mut adam = Adam::new(AdamConfig { lr: config.threshold_lr, ..Default::default() });
    let mut order: Vec<usize> = (0..segments.len()).collect();
    let mut history = Vec::with_capacity(config.threshold_epochs);
    for _ in 0..config.threshold_epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &si in &order {
            let p = &prepared[si];
            let pos = features(&p.positives.iter().collect::<Vec<_>>(), config, &mut rng);
            let drawn = random_negative_boxes(dataset, &segments, si, p.negatives.len(), &mut rng)?;
            let mut negs: Vec<&FrameBoxes> = drawn.iter().collect();
            if config.negative_mode == NegativeMode::Hard {
                negs.extend(p.negatives.iter());
            }
            let neg = features(&negs, config, &mut rng);
            let pairs: Vec<FeaturePair> = pos.iter().chain(&neg).copied().collect();
            if pairs.is_empty() {
                continue;
            }
            let labels: Vec<bool> = (0..pairs.len()).map(|i| i < pos.len()).collect();
            let scores = model.scores_for_embedding(&embeddings[si], &pairs)?;
            let (loss, grad) = threshold_loss(model, &embeddings[si], &scores, &labels, config.kappa)?;
            adam.step(&mut model.threshold, &grad)?;
            total += loss;
        }
        history.push(total / segments.len() as f64);
    }
    Ok(history)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DetectorModel,
    pub contrastive_history: Vec<f64>,
    pub threshold_history: Vec<f64>,
}

/// Both phases in order.
pub fn fit(dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    let (mut model, contrastive_history) = train_detector(dataset, config)?;
    let threshold_history = train_threshold(&mut model, dataset, config)?;
    Ok(TrainOutcome { model, contrastive_history, threshold_history })
}
