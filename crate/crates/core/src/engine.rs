//! Routing engine: convert win probabilities into binary routing decisions
//! via the cost threshold alpha, and calibrate alpha against cost targets.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embedding::EmbedError;

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error(transparent)]
    Embedding(#[from] EmbedError),
    #[error("{0}")]
    Model(String),
    #[error("remote scorer: {0}")]
    Remote(String),
    #[error("win probability {0} outside [0,1]")]
    OutOfRange(f64),
}

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("alpha must be in [0,1], got {0}")]
    InvalidAlpha(f64),
    #[error("target fraction must be in [0,1], got {0}")]
    InvalidTarget(f64),
    #[error("empty probability list")]
    EmptyProbabilities,
    #[error("probability {0} outside [0,1]")]
    OutOfRangeProbability(f64),
    #[error("predictor {name} failed: {source}")]
    Predictor {
        name: String,
        #[source]
        source: PredictorError,
    },
    #[error("cannot build HTTP client: {0}")]
    Client(String),
}

/// The common contract of all routers: map a query to the probability that
/// the strong model's answer would be preferred.
pub trait WinPredictor: Send + Sync {
    fn predict(&self, query: &str) -> Result<f64, PredictorError>;
    fn name(&self) -> &str;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteTarget {
    Weak,
    Strong,
}

impl RouteTarget {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Weak => "weak",
            Self::Strong => "strong",
        }
    }
}

/// The threshold rule: weak when the win probability is below alpha, strong
/// otherwise (the boundary routes strong).
pub fn decide(win_probability: f64, alpha: f64) -> RouteTarget {
    if win_probability < alpha {
        RouteTarget::Weak
    } else {
        RouteTarget::Strong
    }
}

/// What to do when the predictor fails.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FallbackDecision {
    /// Fail toward quality.
    #[default]
    Strong,
    Weak,
    /// Propagate the failure to the caller.
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub target: RouteTarget,
    /// The predictor's output, or the fallback's effective probability
    /// (1 for strong, 0 for weak) when the predictor failed.
    pub win_probability: f64,
    pub threshold: f64,
    pub predictor_name: String,
    /// Set when the decision came from the fallback path.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback_error: Option<String>,
}

/// Route one query: query the predictor and apply the threshold rule.
///
/// Predictor failures (including out-of-range outputs) take the configured
/// fallback with the error recorded; the decision invariant
/// `target == Strong  <=>  win_probability >= alpha` holds on every path.
pub fn route(
    query: &str,
    predictor: &dyn WinPredictor,
    alpha: f64,
    fallback: FallbackDecision,
) -> Result<RoutingDecision, EngineError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(EngineError::InvalidAlpha(alpha));
    }
    let outcome = predictor.predict(query).and_then(|p| {
        if (0.0..=1.0).contains(&p) {
            Ok(p)
        } else {
            Err(PredictorError::OutOfRange(p))
        }
    });
    let (probability, error) = match outcome {
        Ok(p) => (p, None),
        Err(e) => {
            let effective = match fallback {
                FallbackDecision::Strong => 1.0,
                FallbackDecision::Weak => 0.0,
                FallbackDecision::Error => {
                    return Err(EngineError::Predictor {
                        name: predictor.name().to_string(),
                        source: e,
                    })
                }
            };
            (effective, Some(e.to_string()))
        }
    };
    Ok(RoutingDecision {
        target: decide(probability, alpha),
        win_probability: probability,
        threshold: alpha,
        predictor_name: predictor.name().to_string(),
        fallback_error: error,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub alpha: f64,
    pub achieved_fraction: f64,
    pub target_fraction: f64,
    pub sample_count: usize,
}

/// Choose the threshold meeting a strong-call budget on a reference set:
/// the smallest probability value `v` such that the fraction of
/// probabilities `>= v` does not exceed the target.
///
/// With distinct probabilities the achieved fraction is within `1/n` of the
/// target. With heavy duplicates it can be farther away (reported honestly);
/// when even the largest value overshoots the budget, alpha moves just above
/// it (clamped to 1.0, where records at exactly 1.0 still route strong).
pub fn calibrate_threshold(
    probabilities: &[f64],
    target_strong_fraction: f64,
) -> Result<CalibrationResult, EngineError> {
    if probabilities.is_empty() {
        return Err(EngineError::EmptyProbabilities);
    }
    if !(0.0..=1.0).contains(&target_strong_fraction) {
        return Err(EngineError::InvalidTarget(target_strong_fraction));
    }
    for &p in probabilities {
        if !(0.0..=1.0).contains(&p) {
            return Err(EngineError::OutOfRangeProbability(p));
        }
    }

    let n = probabilities.len();
    let achieved = |alpha: f64| -> f64 {
        probabilities.iter().filter(|&&p| p >= alpha).count() as f64 / n as f64
    };

    if target_strong_fraction >= 1.0 {
        return Ok(CalibrationResult {
            alpha: 0.0,
            achieved_fraction: achieved(0.0),
            target_fraction: target_strong_fraction,
            sample_count: n,
        });
    }

    // Largest strong-call count within budget. The tiny nudge absorbs
    // representation error in target * n (e.g. 0.3 * 10).
    let budget = ((target_strong_fraction * n as f64) + 1e-9).floor() as usize;

    let mut sorted = probabilities.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("validated finite"));

    // Walk distinct values from the top; take the smallest value whose
    // cumulative count stays within budget.
    let mut alpha = None;
    let mut count = 0;
    let mut i = 0;
    while i < n {
        let value = sorted[i];
        let mut j = i;
        while j < n && sorted[j] == value {
            j += 1;
        }
        if j > budget {
            break;
        }
        alpha = Some(value);
        count = j;
        i = j;
    }
    let _ = count;

    let alpha = alpha.unwrap_or_else(|| {
        // Even the top value group exceeds the budget: go just above it.
        let top = sorted[0];
        if top < 1.0 {
            top.next_up().min(1.0)
        } else {
            1.0
        }
    });

    Ok(CalibrationResult {
        alpha,
        achieved_fraction: achieved(alpha),
        target_fraction: target_strong_fraction,
        sample_count: n,
    })
}

/// Deterministic pseudo-random predictor: the probability is a uniform hash
/// of the query and seed. Used as the random-routing baseline.
#[derive(Debug, Clone)]
pub struct RandomPredictor {
    seed: u64,
}

impl RandomPredictor {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }
}

impl WinPredictor for RandomPredictor {
    fn predict(&self, query: &str) -> Result<f64, PredictorError> {
        let digest = Sha256::digest(query.as_bytes());
        let h = u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(h ^ self.seed);
        Ok(rng.random_range(0.0..1.0))
    }

    fn name(&self) -> &str {
        "random"
    }
}

fn default_scorer_timeout_ms() -> u64 {
    2_000
}

/// Wire endpoint for an externally-hosted win-prediction model
/// (`POST {"query": ...}` returning `{"win_probability": ...}`).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScorerConfig {
    pub url: String,
    #[serde(default = "default_scorer_timeout_ms")]
    pub timeout_ms: u64,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    query: &'a str,
}

#[derive(Deserialize)]
struct ScoreResponse {
    win_probability: f64,
}

pub struct ExternalScorer {
    cfg: ScorerConfig,
    client: reqwest::blocking::Client,
}

/// Wrap a remote scorer speaking the wire protocol as a [`WinPredictor`].
pub fn external_scorer(cfg: ScorerConfig) -> Result<ExternalScorer, EngineError> {
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_millis(cfg.timeout_ms))
        .build()
        .map_err(|e| EngineError::Client(e.to_string()))?;
    Ok(ExternalScorer { cfg, client })
}

impl WinPredictor for ExternalScorer {
    fn predict(&self, query: &str) -> Result<f64, PredictorError> {
        let resp = self
            .client
            .post(&self.cfg.url)
            .json(&ScoreRequest { query })
            .send()
            .map_err(|e| PredictorError::Remote(e.to_string()))?;
        let status = resp.status();
        if !status.is_success() {
            return Err(PredictorError::Remote(format!("HTTP {status}")));
        }
        let parsed: ScoreResponse = resp
            .json()
            .map_err(|e| PredictorError::Remote(format!("bad response body: {e}")))?;
        if !(0.0..=1.0).contains(&parsed.win_probability) {
            return Err(PredictorError::OutOfRange(parsed.win_probability));
        }
        Ok(parsed.win_probability)
    }

    fn name(&self) -> &str {
        "external"
    }
}

/// Fixed-probability predictor, mostly for tests and wiring checks.
#[derive(Debug, Clone)]
pub struct ConstantPredictor {
    pub probability: f64,
    pub label: String,
}

impl WinPredictor for ConstantPredictor {
    fn predict(&self, _query: &str) -> Result<f64, PredictorError> {
        Ok(self.probability)
    }
    fn name(&self) -> &str {
        &self.label
    }
}
