//! Similarity-weighted Bradley–Terry ranking.
//!
//! There is no training phase: for each incoming query, every battle in the
//! corpus is weighted by the similarity of its query to the incoming one,
//! and tier coefficients are solved for at inference time. The win
//! probability for a tier pair is the logistic of the coefficient
//! difference.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbedError, EmbeddingVector, QueryEmbedder};
use crate::engine::{PredictorError, WinPredictor};
use crate::math::{sigmoid, softplus};
use crate::tiering::{EmbeddedBattle, DEFAULT_TIER_COUNT};

pub const DEFAULT_GAMMA: f64 = 10.0;
pub const DEFAULT_RIDGE_LAMBDA: f64 = 1e-4;
/// Convergence threshold on the gradient infinity norm.
pub const GRADIENT_TOLERANCE: f64 = 1e-8;
pub const MAX_SOLVER_ITERATIONS: usize = 1000;

const CORPUS_FILE_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SwRankingError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus embeddings disagree in dimension: {expected} vs {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("query embedding has dimension {actual}, corpus has {expected}")]
    QueryDimensionMismatch { expected: usize, actual: usize },
    #[error("tier index {tier} out of range for {tier_count} tiers")]
    TierOutOfRange { tier: usize, tier_count: usize },
    #[error("strong and weak tier must differ (both {0})")]
    EqualTiers(usize),
    #[error("gamma must be > 1, got {0}")]
    InvalidGamma(f64),
    #[error("got {weights} weights for {records} corpus records")]
    WeightCountMismatch { weights: usize, records: usize },
    #[error("weights must be finite, non-negative, and not all zero")]
    InvalidWeights,
    #[error("corpus was embedded with {corpus_model:?} but the embedder is {embedder_model:?}")]
    EmbeddingModelMismatch {
        corpus_model: String,
        embedder_model: String,
    },
    #[error("unsupported corpus file version {0}")]
    UnsupportedVersion(u32),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid corpus JSON in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub gamma: f64,
    pub lambda: f64,
    /// When set, only the `top_n` most similar battles enter the per-query
    /// solve; `None` uses the whole corpus.
    pub top_n: Option<usize>,
    pub tier_count: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            gamma: DEFAULT_GAMMA,
            lambda: DEFAULT_RIDGE_LAMBDA,
            top_n: None,
            tier_count: DEFAULT_TIER_COUNT,
        }
    }
}

/// Immutable battle corpus shared by concurrent queries.
#[derive(Debug, Clone)]
pub struct RankingCorpus {
    /// (winner tier, loser tier) per battle, ties already collapsed to the
    /// weaker side.
    pairs: Vec<(usize, usize)>,
    embeddings: Vec<EmbeddingVector>,
    norms: Vec<f64>,
    embedding_model: String,
    config: CorpusConfig,
}

impl RankingCorpus {
    pub fn from_battles(
        battles: &[EmbeddedBattle],
        embedding_model: impl Into<String>,
        config: CorpusConfig,
    ) -> Result<Self, SwRankingError> {
        if battles.is_empty() {
            return Err(SwRankingError::EmptyCorpus);
        }
        if config.gamma <= 1.0 {
            return Err(SwRankingError::InvalidGamma(config.gamma));
        }
        let dim = battles[0].embedding.dim();
        let mut pairs = Vec::with_capacity(battles.len());
        let mut embeddings = Vec::with_capacity(battles.len());
        let mut norms = Vec::with_capacity(battles.len());
        for b in battles {
            if b.embedding.dim() != dim {
                return Err(SwRankingError::DimensionMismatch {
                    expected: dim,
                    actual: b.embedding.dim(),
                });
            }
            for tier in [b.tier_first, b.tier_second] {
                if tier >= config.tier_count {
                    return Err(SwRankingError::TierOutOfRange {
                        tier,
                        tier_count: config.tier_count,
                    });
                }
            }
            let norm = b.embedding.norm();
            if norm == 0.0 {
                return Err(SwRankingError::Embed(EmbedError::ZeroNorm));
            }
            pairs.push(b.winner_loser());
            embeddings.push(b.embedding.clone());
            norms.push(norm);
        }
        Ok(Self {
            pairs,
            embeddings,
            norms,
            embedding_model: embedding_model.into(),
            config,
        })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn config(&self) -> &CorpusConfig {
        &self.config
    }

    pub fn embedding_model(&self) -> &str {
        &self.embedding_model
    }

    pub fn dimension(&self) -> usize {
        self.embeddings[0].dim()
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<(), SwRankingError> {
        let path = path.as_ref();
        let io_err = |source| SwRankingError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = CorpusFile {
            version: CORPUS_FILE_VERSION,
            embedding_model: self.embedding_model.clone(),
            config: self.config.clone(),
            records: self
                .pairs
                .iter()
                .zip(&self.embeddings)
                .map(|(&(winner_tier, loser_tier), e)| CorpusFileRecord {
                    winner_tier,
                    loser_tier,
                    embedding: e.values().to_vec(),
                })
                .collect(),
        };
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        serde_json::to_writer(&mut w, &file).map_err(|source| SwRankingError::Json {
            path: path.display().to_string(),
            source,
        })?;
        w.write_all(b"\n").map_err(io_err)?;
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self, SwRankingError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| SwRankingError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let parsed: CorpusFile =
            serde_json::from_reader(BufReader::new(file)).map_err(|source| SwRankingError::Json {
                path: path.display().to_string(),
                source,
            })?;
        if parsed.version != CORPUS_FILE_VERSION {
            return Err(SwRankingError::UnsupportedVersion(parsed.version));
        }
        if parsed.records.is_empty() {
            return Err(SwRankingError::EmptyCorpus);
        }
        let dim = parsed.records[0].embedding.len();
        let mut pairs = Vec::with_capacity(parsed.records.len());
        let mut embeddings = Vec::with_capacity(parsed.records.len());
        let mut norms = Vec::with_capacity(parsed.records.len());
        for r in parsed.records {
            if r.embedding.len() != dim {
                return Err(SwRankingError::DimensionMismatch {
                    expected: dim,
                    actual: r.embedding.len(),
                });
            }
            let v = EmbeddingVector::new(r.embedding).map_err(SwRankingError::Embed)?;
            let norm = v.norm();
            if norm == 0.0 {
                return Err(SwRankingError::Embed(EmbedError::ZeroNorm));
            }
            pairs.push((r.winner_tier, r.loser_tier));
            embeddings.push(v);
            norms.push(norm);
        }
        Ok(Self {
            pairs,
            embeddings,
            norms,
            embedding_model: parsed.embedding_model,
            config: parsed.config,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusFile {
    version: u32,
    embedding_model: String,
    config: CorpusConfig,
    records: Vec<CorpusFileRecord>,
}

#[derive(Serialize, Deserialize)]
struct CorpusFileRecord {
    winner_tier: usize,
    loser_tier: usize,
    embedding: Vec<f32>,
}

/// Similarity of the query to every corpus query: each cosine divided by the
/// query's maximum cosine over the corpus, so the most similar battle scores
/// exactly 1. All scores are 0 when no cosine is positive.
pub fn similarity_scores(
    query: &EmbeddingVector,
    corpus: &RankingCorpus,
) -> Result<Vec<f64>, SwRankingError> {
    if query.dim() != corpus.dimension() {
        return Err(SwRankingError::QueryDimensionMismatch {
            expected: corpus.dimension(),
            actual: query.dim(),
        });
    }
    let qn = query.norm();
    if qn == 0.0 {
        return Err(SwRankingError::Embed(EmbedError::ZeroNorm));
    }
    let mut cosines = Vec::with_capacity(corpus.len());
    let mut max_cos = f64::NEG_INFINITY;
    for (e, n) in corpus.embeddings.iter().zip(&corpus.norms) {
        let cos = query.dot(e) / (qn * n);
        if cos > max_cos {
            max_cos = cos;
        }
        cosines.push(cos);
    }
    if max_cos <= 0.0 {
        return Ok(vec![0.0; cosines.len()]);
    }
    Ok(cosines.into_iter().map(|c| c / max_cos).collect())
}

/// Exponential battle weights `gamma^(1 + s)`; strictly positive for any
/// similarity score.
pub fn battle_weights(scores: &[f64], gamma: f64) -> Vec<f64> {
    scores.iter().map(|s| gamma.powf(1.0 + s)).collect()
}

/// Tier coefficients from a weighted Bradley–Terry fit.
#[derive(Debug, Clone, PartialEq)]
pub struct BTCoefficients {
    /// One coefficient per tier; tier 0 is pinned at 0 for identifiability.
    pub xi: Vec<f64>,
    /// False when the gradient tolerance was not reached within the
    /// iteration cap; `xi` is then the best iterate found.
    pub converged: bool,
    pub iterations: usize,
}

impl BTCoefficients {
    /// Probability that `strong` beats `weak` under these coefficients.
    pub fn win_probability(&self, strong: usize, weak: usize) -> f64 {
        sigmoid(self.xi[strong] - self.xi[weak])
    }
}

/// Minimize the weight-normalized logistic loss of the Bradley–Terry win
/// probability plus an L2 ridge, with the tier-0 coefficient pinned at 0.
/// Normalizing the data term by the total weight makes the argmin invariant
/// to rescaling all weights by a constant. Full-batch gradient descent with
/// backtracking line search; deterministic.
pub fn solve_bt(corpus: &RankingCorpus, weights: &[f64]) -> Result<BTCoefficients, SwRankingError> {
    if weights.len() != corpus.len() {
        return Err(SwRankingError::WeightCountMismatch {
            weights: weights.len(),
            records: corpus.len(),
        });
    }
    validate_weights(weights)?;
    Ok(solve_weighted(
        &corpus.pairs,
        weights,
        corpus.config.tier_count,
        corpus.config.lambda,
    ))
}

fn validate_weights(weights: &[f64]) -> Result<(), SwRankingError> {
    let mut any_positive = false;
    for &w in weights {
        if !w.is_finite() || w < 0.0 {
            return Err(SwRankingError::InvalidWeights);
        }
        any_positive |= w > 0.0;
    }
    if !any_positive {
        return Err(SwRankingError::InvalidWeights);
    }
    Ok(())
}

fn solve_weighted(
    pairs: &[(usize, usize)],
    weights: &[f64],
    tier_count: usize,
    lambda: f64,
) -> BTCoefficients {
    let total_weight: f64 = weights.iter().sum();

    let loss = |xi: &[f64]| -> f64 {
        let mut total = 0.0;
        for (&(w, l), &weight) in pairs.iter().zip(weights) {
            total += weight * softplus(xi[l] - xi[w]);
        }
        total / total_weight + lambda * xi.iter().map(|x| x * x).sum::<f64>()
    };

    let gradient = |xi: &[f64], grad: &mut [f64]| {
        for (g, &x) in grad.iter_mut().zip(xi) {
            *g = 2.0 * lambda * x;
        }
        for (&(w, l), &weight) in pairs.iter().zip(weights) {
            let c = (weight / total_weight) * (sigmoid(xi[w] - xi[l]) - 1.0);
            grad[w] += c;
            grad[l] -= c;
        }
        grad[0] = 0.0; // pinned coefficient
    };

    let mut xi = vec![0.0; tier_count];
    let mut grad = vec![0.0; tier_count];
    let mut current = loss(&xi);
    let mut step = 1.0f64;
    let mut converged = false;
    let mut iterations = 0;

    for iter in 1..=MAX_SOLVER_ITERATIONS {
        iterations = iter;
        gradient(&xi, &mut grad);
        let grad_inf = grad.iter().fold(0.0f64, |m, g| m.max(g.abs()));
        if grad_inf < GRADIENT_TOLERANCE {
            converged = true;
            break;
        }
        let grad_sq: f64 = grad.iter().map(|g| g * g).sum();

        // Backtracking line search (Armijo), restarting from twice the last
        // accepted step.
        step = (step * 2.0).min(1e6);
        let mut accepted = false;
        for _ in 0..80 {
            let candidate: Vec<f64> = xi.iter().zip(&grad).map(|(x, g)| x - step * g).collect();
            let candidate_loss = loss(&candidate);
            if candidate_loss <= current - 1e-4 * step * grad_sq {
                xi = candidate;
                current = candidate_loss;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break; // step underflow, no further progress possible
        }
    }

    BTCoefficients {
        xi,
        converged,
        iterations,
    }
}

/// The full per-query pipeline: embed the query, weight every battle by
/// similarity, solve for tier coefficients, and return the probability that
/// `strong_tier` beats `weak_tier`.
pub fn sw_win_probability(
    query: &str,
    corpus: &RankingCorpus,
    embedder: &dyn QueryEmbedder,
    strong_tier: usize,
    weak_tier: usize,
) -> Result<f64, SwRankingError> {
    let tier_count = corpus.config.tier_count;
    for tier in [strong_tier, weak_tier] {
        if tier >= tier_count {
            return Err(SwRankingError::TierOutOfRange { tier, tier_count });
        }
    }
    if strong_tier == weak_tier {
        return Err(SwRankingError::EqualTiers(strong_tier));
    }

    let embedding = embedder.embed_one(query)?;
    let scores = similarity_scores(&embedding, corpus)?;

    let coefficients = match corpus.config.top_n {
        Some(n) if n < corpus.len() => {
            let mut indices: Vec<usize> = (0..corpus.len()).collect();
            indices.sort_by(|&a, &b| {
                scores[b]
                    .partial_cmp(&scores[a])
                    .expect("finite scores")
                    .then(a.cmp(&b))
            });
            indices.truncate(n);
            let sub_pairs: Vec<(usize, usize)> = indices.iter().map(|&i| corpus.pairs[i]).collect();
            let sub_scores: Vec<f64> = indices.iter().map(|&i| scores[i]).collect();
            let weights = battle_weights(&sub_scores, corpus.config.gamma);
            solve_weighted(&sub_pairs, &weights, tier_count, corpus.config.lambda)
        }
        _ => {
            let weights = battle_weights(&scores, corpus.config.gamma);
            solve_weighted(&corpus.pairs, &weights, tier_count, corpus.config.lambda)
        }
    };

    Ok(coefficients.win_probability(strong_tier, weak_tier))
}

/// [`WinPredictor`] backed by a ranking corpus; each prediction runs the
/// whole similarity-weighted solve.
pub struct SwRankingPredictor {
    corpus: RankingCorpus,
    embedder: Arc<dyn QueryEmbedder>,
    strong_tier: usize,
    weak_tier: usize,
}

impl SwRankingPredictor {
    pub fn new(
        corpus: RankingCorpus,
        embedder: Arc<dyn QueryEmbedder>,
        strong_tier: usize,
        weak_tier: usize,
    ) -> Result<Self, SwRankingError> {
        if embedder.model_name() != corpus.embedding_model() {
            return Err(SwRankingError::EmbeddingModelMismatch {
                corpus_model: corpus.embedding_model().to_string(),
                embedder_model: embedder.model_name().to_string(),
            });
        }
        let tier_count = corpus.config.tier_count;
        for tier in [strong_tier, weak_tier] {
            if tier >= tier_count {
                return Err(SwRankingError::TierOutOfRange { tier, tier_count });
            }
        }
        if strong_tier == weak_tier {
            return Err(SwRankingError::EqualTiers(strong_tier));
        }
        Ok(Self {
            corpus,
            embedder,
            strong_tier,
            weak_tier,
        })
    }
}

impl WinPredictor for SwRankingPredictor {
    fn predict(&self, query: &str) -> Result<f64, PredictorError> {
        sw_win_probability(
            query,
            &self.corpus,
            self.embedder.as_ref(),
            self.strong_tier,
            self.weak_tier,
        )
        .map_err(|e| PredictorError::Model(e.to_string()))
    }

    fn name(&self) -> &str {
        "sw_ranking"
    }
}
