//! Bilinear matrix-factorization win predictor.
//!
//! The score of a model tier on a query is `w2 . (v_tier ⊙ (W1^T v_q + b))`;
//! the probability that the winner beats the loser is the logistic of the
//! score difference. Trained by mini-batch adaptive-moment optimization with
//! decoupled weight decay, deterministic for a fixed seed.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbedError, EmbeddingVector, QueryEmbedder};
use crate::engine::{PredictorError, WinPredictor};
use crate::math::{sigmoid, softplus};
use crate::tiering::{EmbeddedBattle, DEFAULT_TIER_COUNT};

pub const DEFAULT_MODEL_DIM: usize = 128;
pub const MF_CHECKPOINT_VERSION: u32 = 1;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MfError {
    #[error("tier index {tier} out of range for {tier_count} tiers")]
    TierOutOfRange { tier: usize, tier_count: usize },
    #[error("query embedding has dimension {actual}, model expects {expected}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("no trainable records (all battles were same-tier or the set was empty)")]
    NoValidRecords,
    #[error("training needs at least two distinct tiers, got {0}")]
    SingleTier(usize),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint was trained against {checkpoint_model:?} but the embedder is {embedder_model:?}")]
    EmbeddingModelMismatch {
        checkpoint_model: String,
        embedder_model: String,
    },
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint dimensions are inconsistent: {0}")]
    BadCheckpoint(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid checkpoint JSON in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// All trainable parameters of the bilinear scorer.
#[derive(Debug, Clone, PartialEq)]
pub struct MFParams {
    /// Model-class embeddings, `tier_count x d_m`.
    pub v_m: Array2<f64>,
    /// Query projection, `d_q x d_m`.
    pub w1: Array2<f64>,
    /// Projection bias, `d_m`.
    pub b: Array1<f64>,
    /// Regression head, `d_m`.
    pub w2: Array1<f64>,
}

impl MFParams {
    /// Uniform init in `[-1/sqrt(d), 1/sqrt(d)]` of the receiving dimension;
    /// bias starts at zero.
    pub fn init(tier_count: usize, d_q: usize, d_m: usize, rng: &mut impl Rng) -> Self {
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound))
        };
        let v_m = uniform(tier_count, d_m, d_m);
        let w1 = uniform(d_q, d_m, d_q);
        let w2 = uniform(1, d_m, d_m).row(0).to_owned();
        let b = Array1::zeros(d_m);
        Self { v_m, w1, b, w2 }
    }

    pub fn zeros(tier_count: usize, d_q: usize, d_m: usize) -> Self {
        Self {
            v_m: Array2::zeros((tier_count, d_m)),
            w1: Array2::zeros((d_q, d_m)),
            b: Array1::zeros(d_m),
            w2: Array1::zeros(d_m),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.tier_count(), self.d_q(), self.d_m())
    }

    pub fn tier_count(&self) -> usize {
        self.v_m.nrows()
    }

    pub fn d_q(&self) -> usize {
        self.w1.nrows()
    }

    pub fn d_m(&self) -> usize {
        self.v_m.ncols()
    }

    fn check_tier(&self, tier: usize) -> Result<(), MfError> {
        if tier >= self.tier_count() {
            return Err(MfError::TierOutOfRange {
                tier,
                tier_count: self.tier_count(),
            });
        }
        Ok(())
    }

    fn projected(&self, q: &EmbeddingVector) -> Result<Array1<f64>, MfError> {
        if q.dim() != self.d_q() {
            return Err(MfError::DimensionMismatch {
                expected: self.d_q(),
                actual: q.dim(),
            });
        }
        let x = Array1::from_iter(q.values().iter().map(|&v| v as f64));
        Ok(self.w1.t().dot(&x) + &self.b)
    }

    fn score_from_projection(&self, tier: usize, h: &Array1<f64>) -> f64 {
        let row = self.v_m.row(tier);
        let mut s = 0.0;
        for i in 0..h.len() {
            s += self.w2[i] * row[i] * h[i];
        }
        s
    }
}

/// Bilinear score of one tier on one query.
pub fn mf_score(params: &MFParams, tier: usize, q: &EmbeddingVector) -> Result<f64, MfError> {
    params.check_tier(tier)?;
    let h = params.projected(q)?;
    Ok(params.score_from_projection(tier, &h))
}

/// Probability that `strong_tier` beats `weak_tier` on the query:
/// the logistic of the score difference. Antisymmetric by construction:
/// swapping the tiers maps `p` to exactly `1 - p`.
pub fn mf_win_probability(
    params: &MFParams,
    strong_tier: usize,
    weak_tier: usize,
    q: &EmbeddingVector,
) -> Result<f64, MfError> {
    params.check_tier(strong_tier)?;
    params.check_tier(weak_tier)?;
    let h = params.projected(q)?;
    let diff =
        params.score_from_projection(strong_tier, &h) - params.score_from_projection(weak_tier, &h);
    Ok(sigmoid(diff))
}

/// One already-collapsed training example.
#[derive(Debug, Clone, Copy)]
pub struct MFBatchSample<'a> {
    pub winner_tier: usize,
    pub loser_tier: usize,
    pub embedding: &'a EmbeddingVector,
}

/// Mean logistic loss of a batch and exact analytic gradients for every
/// parameter.
pub fn mf_loss_and_gradients(
    params: &MFParams,
    batch: &[MFBatchSample<'_>],
) -> Result<(f64, MFParams), MfError> {
    if batch.is_empty() {
        return Err(MfError::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;

    for sample in batch {
        params.check_tier(sample.winner_tier)?;
        params.check_tier(sample.loser_tier)?;
        if sample.embedding.dim() != params.d_q() {
            return Err(MfError::DimensionMismatch {
                expected: params.d_q(),
                actual: sample.embedding.dim(),
            });
        }

        let x = Array1::from_iter(sample.embedding.values().iter().map(|&v| v as f64));
        let h = params.w1.t().dot(&x) + &params.b;
        let u = &params.w2 * &h; // d_m
        let vw = params.v_m.row(sample.winner_tier);
        let vl = params.v_m.row(sample.loser_tier);
        let diff = u.dot(&vw) - u.dot(&vl);

        loss += softplus(-diff);
        let g = (sigmoid(diff) - 1.0) / n; // d(mean loss)/d(diff)

        grads
            .v_m
            .row_mut(sample.winner_tier)
            .scaled_add(g, &u.view());
        grads
            .v_m
            .row_mut(sample.loser_tier)
            .scaled_add(-g, &u.view());

        let dv = &vw.to_owned() - &vl; // d_m
        grads.w2.scaled_add(g, &(&dv * &h).view());
        let gh = (&params.w2 * &dv) * g; // d(mean loss)/dh
        grads.b += &gh;
        for qi in 0..params.d_q() {
            grads.w1.row_mut(qi).scaled_add(x[qi], &gh.view());
        }
    }

    Ok((loss / n, grads))
}

fn default_epochs() -> usize {
    10
}
fn default_batch_size() -> usize {
    64
}
fn default_learning_rate() -> f64 {
    3e-4
}
fn default_weight_decay() -> f64 {
    1e-5
}
fn default_d_m() -> usize {
    DEFAULT_MODEL_DIM
}
fn default_tier_count() -> usize {
    DEFAULT_TIER_COUNT
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MFTrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_d_m")]
    pub d_m: usize,
    #[serde(default = "default_tier_count")]
    pub tier_count: usize,
}

impl Default for MFTrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            learning_rate: default_learning_rate(),
            weight_decay: default_weight_decay(),
            seed: 0,
            d_m: default_d_m(),
            tier_count: default_tier_count(),
        }
    }
}

impl MFTrainConfig {
    fn validate(&self) -> Result<(), MfError> {
        if self.batch_size == 0 {
            return Err(MfError::InvalidConfig("batch_size must be positive".into()));
        }
        if self.learning_rate <= 0.0 || !self.learning_rate.is_finite() {
            return Err(MfError::InvalidConfig(
                "learning_rate must be positive".into(),
            ));
        }
        if self.weight_decay < 0.0 || !self.weight_decay.is_finite() {
            return Err(MfError::InvalidConfig(
                "weight_decay must be non-negative".into(),
            ));
        }
        if self.d_m == 0 || self.tier_count == 0 {
            return Err(MfError::InvalidConfig(
                "d_m and tier_count must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub train_loss: Vec<f64>,
    /// Pairwise accuracy on the validation set per epoch; empty when no
    /// validation records were provided.
    pub val_accuracy: Vec<f64>,
    /// Epoch whose parameters were returned (highest validation accuracy,
    /// earliest on ties); `None` when training ran zero epochs.
    pub best_epoch: Option<usize>,
}

struct AdamW {
    m: MFParams,
    v: MFParams,
    t: u64,
    lr: f64,
    wd: f64,
}

impl AdamW {
    fn new(shape: &MFParams, lr: f64, wd: f64) -> Self {
        Self {
            m: shape.zeros_like(),
            v: shape.zeros_like(),
            t: 0,
            lr,
            wd,
        }
    }

    fn step(&mut self, params: &mut MFParams, grads: &MFParams) {
        self.t += 1;
        let t = self.t as f64;
        let bias1 = 1.0 - ADAM_BETA1.powf(t);
        let bias2 = 1.0 - ADAM_BETA2.powf(t);
        let (lr, wd) = (self.lr, self.wd);

        let apply1 = |p: &mut Array1<f64>, g: &Array1<f64>, m: &mut Array1<f64>, v: &mut Array1<f64>| {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let step = (*m / bias1) / ((*v / bias2).sqrt() + ADAM_EPS);
                *p -= lr * (step + wd * *p);
            });
        };
        apply1(&mut params.b, &grads.b, &mut self.m.b, &mut self.v.b);
        apply1(&mut params.w2, &grads.w2, &mut self.m.w2, &mut self.v.w2);

        let apply2 = |p: &mut Array2<f64>, g: &Array2<f64>, m: &mut Array2<f64>, v: &mut Array2<f64>| {
            Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                let step = (*m / bias1) / ((*v / bias2).sqrt() + ADAM_EPS);
                *p -= lr * (step + wd * *p);
            });
        };
        apply2(&mut params.v_m, &grads.v_m, &mut self.m.v_m, &mut self.v.v_m);
        apply2(&mut params.w1, &grads.w1, &mut self.m.w1, &mut self.v.w1);
    }
}

fn collapse_battles(battles: &[EmbeddedBattle]) -> Vec<(usize, usize, usize)> {
    battles
        .iter()
        .enumerate()
        .filter_map(|(i, b)| {
            let (w, l) = b.winner_loser();
            // same-tier battles carry no score-difference signal
            (w != l).then_some((w, l, i))
        })
        .collect()
}

fn pairwise_accuracy(
    params: &MFParams,
    samples: &[(usize, usize, usize)],
    battles: &[EmbeddedBattle],
) -> f64 {
    let mut correct = 0usize;
    for &(w, l, idx) in samples {
        let h = params
            .projected(&battles[idx].embedding)
            .expect("validated dimensions");
        if params.score_from_projection(w, &h) > params.score_from_projection(l, &h) {
            correct += 1;
        }
    }
    correct as f64 / samples.len() as f64
}

/// Train the factorization on tier battles. Ties are collapsed to weak-side
/// wins, same-tier battles are skipped, shuffling is seeded per epoch, and
/// the returned parameters come from the epoch with the highest validation
/// pairwise accuracy (the final epoch when no validation set is given).
pub fn mf_train(
    battles: &[EmbeddedBattle],
    config: &MFTrainConfig,
    validation: &[EmbeddedBattle],
) -> Result<(MFParams, TrainReport), MfError> {
    config.validate()?;

    let samples = collapse_battles(battles);
    if samples.is_empty() {
        return Err(MfError::NoValidRecords);
    }
    let mut tiers_seen = std::collections::BTreeSet::new();
    for &(w, l, _) in &samples {
        for tier in [w, l] {
            if tier >= config.tier_count {
                return Err(MfError::TierOutOfRange {
                    tier,
                    tier_count: config.tier_count,
                });
            }
            tiers_seen.insert(tier);
        }
    }
    if tiers_seen.len() < 2 {
        return Err(MfError::SingleTier(tiers_seen.len()));
    }

    let d_q = battles[samples[0].2].embedding.dim();
    for b in battles.iter().chain(validation) {
        if b.embedding.dim() != d_q {
            return Err(MfError::DimensionMismatch {
                expected: d_q,
                actual: b.embedding.dim(),
            });
        }
    }
    let val_samples = collapse_battles(validation);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = MFParams::init(config.tier_count, d_q, config.d_m, &mut rng);
    let mut report = TrainReport::default();

    if config.epochs == 0 {
        return Ok((params, report));
    }

    let mut optimizer = AdamW::new(&params, config.learning_rate, config.weight_decay);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut best: Option<(f64, usize, MFParams)> = None;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<MFBatchSample<'_>> = chunk
                .iter()
                .map(|&i| {
                    let (w, l, idx) = samples[i];
                    MFBatchSample {
                        winner_tier: w,
                        loser_tier: l,
                        embedding: &battles[idx].embedding,
                    }
                })
                .collect();
            let (loss, grads) = mf_loss_and_gradients(&params, &batch)?;
            epoch_loss += loss * batch.len() as f64;
            optimizer.step(&mut params, &grads);
        }
        report.train_loss.push(epoch_loss / samples.len() as f64);

        if !val_samples.is_empty() {
            let acc = pairwise_accuracy(&params, &val_samples, validation);
            report.val_accuracy.push(acc);
            let improved = best.as_ref().map_or(true, |(b, _, _)| acc > *b);
            if improved {
                best = Some((acc, epoch, params.clone()));
            }
        }
    }

    match best {
        Some((_, epoch, best_params)) => {
            report.best_epoch = Some(epoch);
            Ok((best_params, report))
        }
        None => {
            report.best_epoch = Some(config.epochs - 1);
            Ok((params, report))
        }
    }
}

/// Serialized model: dimensions, all matrices, and the embedding model it
/// was trained against.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MFCheckpoint {
    pub version: u32,
    pub embedding_model: String,
    pub tier_count: usize,
    pub d_q: usize,
    pub d_m: usize,
    pub v_m: Vec<Vec<f64>>,
    pub w1: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub w2: Vec<f64>,
}

impl MFCheckpoint {
    pub fn from_params(params: &MFParams, embedding_model: impl Into<String>) -> Self {
        Self {
            version: MF_CHECKPOINT_VERSION,
            embedding_model: embedding_model.into(),
            tier_count: params.tier_count(),
            d_q: params.d_q(),
            d_m: params.d_m(),
            v_m: params.v_m.rows().into_iter().map(|r| r.to_vec()).collect(),
            w1: params.w1.rows().into_iter().map(|r| r.to_vec()).collect(),
            b: params.b.to_vec(),
            w2: params.w2.to_vec(),
        }
    }

    pub fn into_params(self) -> Result<MFParams, MfError> {
        if self.version != MF_CHECKPOINT_VERSION {
            return Err(MfError::UnsupportedVersion(self.version));
        }
        let rows_to_array = |rows: Vec<Vec<f64>>, nrows: usize, ncols: usize, name: &str| {
            if rows.len() != nrows || rows.iter().any(|r| r.len() != ncols) {
                return Err(MfError::BadCheckpoint(format!(
                    "{name} is not {nrows}x{ncols}"
                )));
            }
            Ok(Array2::from_shape_vec(
                (nrows, ncols),
                rows.into_iter().flatten().collect(),
            )
            .expect("validated shape"))
        };
        let v_m = rows_to_array(self.v_m, self.tier_count, self.d_m, "v_m")?;
        let w1 = rows_to_array(self.w1, self.d_q, self.d_m, "w1")?;
        if self.b.len() != self.d_m || self.w2.len() != self.d_m {
            return Err(MfError::BadCheckpoint("b/w2 length != d_m".into()));
        }
        Ok(MFParams {
            v_m,
            w1,
            b: Array1::from_vec(self.b),
            w2: Array1::from_vec(self.w2),
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MfError> {
        let path = path.as_ref();
        let io_err = |source| MfError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        serde_json::to_writer(&mut w, self).map_err(|source| MfError::Json {
            path: path.display().to_string(),
            source,
        })?;
        w.write_all(b"\n").map_err(io_err)?;
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, MfError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| MfError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_reader(BufReader::new(file)).map_err(|source| MfError::Json {
            path: path.display().to_string(),
            source,
        })
    }
}

/// [`WinPredictor`] over trained factorization parameters.
pub struct MfPredictor {
    params: MFParams,
    embedder: Arc<dyn QueryEmbedder>,
    strong_tier: usize,
    weak_tier: usize,
}

impl MfPredictor {
    pub fn from_checkpoint(
        checkpoint: MFCheckpoint,
        embedder: Arc<dyn QueryEmbedder>,
        strong_tier: usize,
        weak_tier: usize,
    ) -> Result<Self, MfError> {
        if embedder.model_name() != checkpoint.embedding_model {
            return Err(MfError::EmbeddingModelMismatch {
                checkpoint_model: checkpoint.embedding_model.clone(),
                embedder_model: embedder.model_name().to_string(),
            });
        }
        let params = checkpoint.into_params()?;
        params.check_tier(strong_tier)?;
        params.check_tier(weak_tier)?;
        Ok(Self {
            params,
            embedder,
            strong_tier,
            weak_tier,
        })
    }

    pub fn new(
        params: MFParams,
        embedder: Arc<dyn QueryEmbedder>,
        strong_tier: usize,
        weak_tier: usize,
    ) -> Result<Self, MfError> {
        params.check_tier(strong_tier)?;
        params.check_tier(weak_tier)?;
        Ok(Self {
            params,
            embedder,
            strong_tier,
            weak_tier,
        })
    }
}

impl WinPredictor for MfPredictor {
    fn predict(&self, query: &str) -> Result<f64, PredictorError> {
        let embedding = self.embedder.embed_one(query)?;
        mf_win_probability(&self.params, self.strong_tier, self.weak_tier, &embedding)
            .map_err(|e| PredictorError::Model(e.to_string()))
    }

    fn name(&self) -> &str {
        "matrix_factorization"
    }
}
