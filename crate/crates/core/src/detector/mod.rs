//! The instructable reward detector: a relation embedding of the utterance
//! and the two boxes go through a relation MLP to give a score `S`; a small
//! threshold network maps the embedding to a cutoff `tau`, and the binary
//! reward is `S > tau`.

mod bench;
mod train;

pub use bench::{
    attention_report, eval_classification, gen_benchmark, gen_benchmarks, gen_pool, rank_pool, AttentionTable,
    Benchmark, BenchmarkConfig, BenchmarkItem, EvalReport, PerRelation, Pool, Ranking,
};
pub use train::{
    contrastive_loss, fit, threshold_loss, train_detector, train_threshold, LossVariant, NegativeMode, TrainConfig,
    TrainOutcome,
};

use ndarray::{Array1, Array2, ArrayViewD, ArrayViewMutD, Axis};
use rand::Rng;

use crate::encoder::{EncoderParams, RELATION_DIM};
use crate::error::Result;
use crate::langparse::{self, Relation, Utterance, Vocabulary};
use crate::nn::{prefixed, Mlp, Parameters};
use crate::world::{relation_holds, ObjectInstance, SpatialFeatures};

pub const DETECTOR_VERSION: u32 = 1;
/// Relation MLP input: embedding followed by subject and object features.
pub const RELATION_INPUT: usize = RELATION_DIM + 8;
pub const RELATION_LAYERS: [usize; 4] = [RELATION_INPUT, 64, 64, 1];
pub const THRESHOLD_LAYERS: [usize; 3] = [RELATION_DIM, 32, 1];

pub type FeaturePair = (SpatialFeatures, SpatialFeatures);

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub vocab: Vocabulary,
    pub encoder: EncoderParams,
    pub relation: Mlp,
    pub threshold: Mlp,
}

impl DetectorModel {
    pub fn new<R: Rng + ?Sized>(vocab: Vocabulary, rng: &mut R) -> Self {
        let encoder = EncoderParams::new(vocab.len(), rng);
        Self { vocab, encoder, relation: Mlp::new(&RELATION_LAYERS, rng), threshold: Mlp::new(&THRESHOLD_LAYERS, rng) }
    }

    /// Model with a vocabulary built from `utterances`.
    pub fn for_corpus<R: Rng + ?Sized>(utterances: &[String], rng: &mut R) -> Result<Self> {
        let corpus: Vec<Utterance> = utterances.iter().map(|u| Utterance::new(u.as_str())).collect();
        Ok(Self::new(Vocabulary::build(&corpus)?, rng))
    }

    /// Token indices of an utterance that parses. Subject and object words
    /// are replaced by PAD: the relation embedding sees only how the objects
    /// are related, never which objects they are.
    pub fn token_indices(&self, utterance: &str) -> Result<Vec<usize>> {
        let tokens = langparse::tokenize(utterance);
        let parsed = langparse::parse_expression(&tokens)?;
        let mut idx = self.vocab.encode(&tokens);
        for i in parsed.subject_span.chain(parsed.object_span) {
            idx[i] = langparse::PAD;
        }
        Ok(idx)
    }

    pub fn embed(&self, utterance: &str) -> Result<Array1<f64>> {
        self.encoder.relation_embedding(&self.token_indices(utterance)?)
    }

    pub(crate) fn relation_inputs(v: &Array1<f64>, pairs: &[FeaturePair]) -> Array2<f64> {
        let mut x = Array2::zeros((pairs.len(), RELATION_INPUT));
        for (mut row, (fs, fo)) in x.outer_iter_mut().zip(pairs) {
            row.slice_mut(ndarray::s![..RELATION_DIM]).assign(v);
            let (s, o) = (fs.network_input(), fo.network_input());
            for k in 0..4 {
                row[RELATION_DIM + k] = s[k];
                row[RELATION_DIM + 4 + k] = o[k];
            }
        }
        x
    }

    /// Scores of several box pairs under one relation embedding.
    pub fn scores_for_embedding(&self, v: &Array1<f64>, pairs: &[FeaturePair]) -> Result<Vec<f64>> {
        if pairs.is_empty() {
            return Ok(Vec::new());
        }
        let out = self.relation.predict(Self::relation_inputs(v, pairs).view())?;
        Ok(out.column(0).to_vec())
    }

    pub fn threshold_for_embedding(&self, v: &Array1<f64>) -> Result<f64> {
        let x = v.view().insert_axis(Axis(0));
        Ok(self.threshold.predict(x)?[[0, 0]])
    }

    pub fn score_relation(&self, utterance: &str, fs: &SpatialFeatures, fo: &SpatialFeatures) -> Result<f64> {
        let v = self.embed(utterance)?;
        Ok(self.scores_for_embedding(&v, &[(*fs, *fo)])?[0])
    }

    pub fn binary_reward(&self, utterance: &str, fs: &SpatialFeatures, fo: &SpatialFeatures) -> Result<bool> {
        let v = self.embed(utterance)?;
        let s = self.scores_for_embedding(&v, &[(*fs, *fo)])?[0];
        Ok(s > self.threshold_for_embedding(&v)?)
    }
}

impl Parameters for DetectorModel {
    fn named_tensors(&self) -> Vec<(String, ArrayViewD<'_, f64>)> {
        let mut out = prefixed("enc", self.encoder.named_tensors());
        out.extend(prefixed("rel", self.relation.named_tensors()));
        out.extend(prefixed("thr", self.threshold.named_tensors()));
        out
    }

    fn tensors_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.relation.tensors_mut());
        out.extend(self.threshold.tensors_mut());
        out
    }
}

/// Anything that turns an utterance and box pairs into scores and a cutoff.
pub trait Scorer: Sync {
    fn scores(&self, utterance: &str, pairs: &[FeaturePair]) -> Result<Vec<f64>>;
    fn threshold(&self, utterance: &str) -> Result<f64>;

    fn rewards(&self, utterance: &str, pairs: &[FeaturePair]) -> Result<Vec<bool>> {
        let tau = self.threshold(utterance)?;
        Ok(self.scores(utterance, pairs)?.into_iter().map(|s| s > tau).collect())
    }
}

impl Scorer for DetectorModel {
    fn scores(&self, utterance: &str, pairs: &[FeaturePair]) -> Result<Vec<f64>> {
        self.scores_for_embedding(&self.embed(utterance)?, pairs)
    }

    fn threshold(&self, utterance: &str) -> Result<f64> {
        self.threshold_for_embedding(&self.embed(utterance)?)
    }

    fn rewards(&self, utterance: &str, pairs: &[FeaturePair]) -> Result<Vec<bool>> {
        let v = self.embed(utterance)?;
        let tau = self.threshold_for_embedding(&v)?;
        Ok(self.scores_for_embedding(&v, pairs)?.into_iter().map(|s| s > tau).collect())
    }
}

/// Ground-truth predicate as a score (1 or 0) with cutoff 0.5. The object of
/// an `In` expression is taken to be a container.
#[derive(Debug, Clone, Copy, Default)]
pub struct OracleScorer;

/// Rebuild a box from normalized features.
pub fn box_from_features(f: &SpatialFeatures, container: bool) -> ObjectInstance {
    let [cx, cy, w, h] = f.denormalize();
    ObjectInstance {
        id: 0,
        category: String::new(),
        cx,
        cy,
        w,
        h,
        is_container: container,
        color: [0.0; 3],
        orientation: None,
    }
}

pub fn feature_predicate(relation: Relation, fs: &SpatialFeatures, fo: &SpatialFeatures) -> bool {
    relation_holds(&box_from_features(fs, false), &box_from_features(fo, true), relation)
}

impl Scorer for OracleScorer {
    fn scores(&self, utterance: &str, pairs: &[FeaturePair]) -> Result<Vec<f64>> {
        let rel = langparse::parse_text(utterance)?.relation;
        Ok(pairs.iter().map(|(s, o)| if feature_predicate(rel, s, o) { 1.0 } else { 0.0 }).collect())
    }

    fn threshold(&self, _: &str) -> Result<f64> {
        Ok(0.5)
    }
}

/// Same score for every input.
#[derive(Debug, Clone, Copy)]
pub struct ConstantScorer {
    pub score: f64,
    pub threshold: f64,
}

impl Scorer for ConstantScorer {
    fn scores(&self, _: &str, pairs: &[FeaturePair]) -> Result<Vec<f64>> {
        Ok(vec![self.score; pairs.len()])
    }

    fn threshold(&self, _: &str) -> Result<f64> {
        Ok(self.threshold)
    }
}
