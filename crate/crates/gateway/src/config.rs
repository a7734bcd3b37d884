//! Declarative gateway configuration (TOML with `${VAR}` environment
//! interpolation) and construction of the configured predictor.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use router_core::embedding::{EmbedError, EmbedderSpec, QueryEmbedder};
use router_core::engine::{
    external_scorer, EngineError, FallbackDecision, RandomPredictor, ScorerConfig, WinPredictor,
};
use router_core::matrix_factorization::{MFCheckpoint, MfError, MfPredictor};
use router_core::sw_ranking::{
    CorpusConfig, RankingCorpus, SwRankingError, SwRankingPredictor, DEFAULT_GAMMA,
    DEFAULT_RIDGE_LAMBDA,
};
use router_core::tiering::{embed_tier_records, load_tier_records, TieringError, DEFAULT_TIER_COUNT};

/// Gateway default for SW-ranking corpus subsampling; the full-corpus solve
/// is too slow for serving latencies.
pub const GATEWAY_SW_TOP_N: usize = 2000;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("config error: {0}")]
    Config(String),
    #[error("environment variable {0} is not set")]
    MissingEnv(String),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid TOML in {path}: {source}")]
    Toml {
        path: String,
        #[source]
        source: toml::de::Error,
    },
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    MatrixFactorization(#[from] MfError),
    #[error(transparent)]
    SwRanking(#[from] SwRankingError),
    #[error(transparent)]
    Tiering(#[from] TieringError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("I/O error: {0}")]
    Serve(#[from] std::io::Error),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BackendConfig {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the backend API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiTurn {
    /// Route on the first user message of the conversation.
    #[default]
    FirstTurn,
    /// Route on all user messages concatenated.
    Concatenate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    SwRanking,
    MatrixFactorization,
    External,
    Random,
}

fn default_strong_tier() -> usize {
    0
}
fn default_weak_tier() -> usize {
    2
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MfPredictorConfig {
    pub checkpoint: PathBuf,
    #[serde(default = "default_strong_tier")]
    pub strong_tier: usize,
    #[serde(default = "default_weak_tier")]
    pub weak_tier: usize,
}

fn default_gamma() -> f64 {
    DEFAULT_GAMMA
}
fn default_lambda() -> f64 {
    DEFAULT_RIDGE_LAMBDA
}
fn default_sw_top_n() -> Option<usize> {
    Some(GATEWAY_SW_TOP_N)
}
fn default_tier_count() -> usize {
    DEFAULT_TIER_COUNT
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SwPredictorConfig {
    /// Prepared corpus file (embeddings inline), or
    #[serde(default)]
    pub corpus: Option<PathBuf>,
    /// tier-records JSONL, embedded through the configured embedder at
    /// startup (served from the cache thereafter).
    #[serde(default)]
    pub tier_records: Option<PathBuf>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_sw_top_n")]
    pub top_n: Option<usize>,
    #[serde(default = "default_tier_count")]
    pub tier_count: usize,
    #[serde(default = "default_strong_tier")]
    pub strong_tier: usize,
    #[serde(default = "default_weak_tier")]
    pub weak_tier: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RandomConfig {
    #[serde(default)]
    pub seed: u64,
}

fn default_listen() -> String {
    "127.0.0.1:8080".to_string()
}
fn default_request_timeout_ms() -> u64 {
    30_000
}
fn default_backend_retry() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GatewayConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    pub alpha: f64,
    pub predictor: PredictorKind,
    #[serde(default)]
    pub fallback: FallbackDecision,
    /// Retry the other backend once when the chosen one is unreachable.
    #[serde(default = "default_backend_retry")]
    pub backend_retry_other: bool,
    #[serde(default = "default_request_timeout_ms")]
    pub request_timeout_ms: u64,
    #[serde(default)]
    pub multi_turn: MultiTurn,
    pub strong_backend: BackendConfig,
    pub weak_backend: BackendConfig,
    #[serde(default)]
    pub embedding: EmbedderSpec,
    #[serde(default)]
    pub matrix_factorization: Option<MfPredictorConfig>,
    #[serde(default)]
    pub sw_ranking: Option<SwPredictorConfig>,
    #[serde(default)]
    pub external: Option<ScorerConfig>,
    #[serde(default)]
    pub random: RandomConfig,
}

impl GatewayConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, GatewayError> {
        let path = path.as_ref();
        let raw = std::fs::read_to_string(path).map_err(|source| GatewayError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let interpolated = interpolate_env(&raw)?;
        let config: GatewayConfig =
            toml::from_str(&interpolated).map_err(|source| GatewayError::Toml {
                path: path.display().to_string(),
                source,
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(GatewayError::Config(format!(
                "alpha must be in [0,1], got {}",
                self.alpha
            )));
        }
        for (side, backend) in [("strong", &self.strong_backend), ("weak", &self.weak_backend)] {
            if backend.base_url.trim().is_empty() || backend.model.trim().is_empty() {
                return Err(GatewayError::Config(format!(
                    "{side}_backend needs base_url and model"
                )));
            }
        }
        match self.predictor {
            PredictorKind::MatrixFactorization if self.matrix_factorization.is_none() => {
                Err(GatewayError::Config(
                    "predictor = matrix_factorization needs a [matrix_factorization] section"
                        .into(),
                ))
            }
            PredictorKind::SwRanking => {
                let sw = self.sw_ranking.as_ref().ok_or_else(|| {
                    GatewayError::Config(
                        "predictor = sw_ranking needs a [sw_ranking] section".into(),
                    )
                })?;
                if sw.corpus.is_none() && sw.tier_records.is_none() {
                    return Err(GatewayError::Config(
                        "[sw_ranking] needs either corpus or tier_records".into(),
                    ));
                }
                Ok(())
            }
            PredictorKind::External if self.external.is_none() => Err(GatewayError::Config(
                "predictor = external needs an [external] section".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Build the configured predictor. Blocking (reads artifacts, may embed
    /// a corpus); call off the async runtime.
    pub fn build_predictor(
        &self,
        embedder: Arc<dyn QueryEmbedder>,
    ) -> Result<Arc<dyn WinPredictor>, GatewayError> {
        match self.predictor {
            PredictorKind::Random => Ok(Arc::new(RandomPredictor::new(self.random.seed))),
            PredictorKind::External => {
                let cfg = self
                    .external
                    .clone()
                    .ok_or_else(|| GatewayError::Config("[external] section missing".into()))?;
                Ok(Arc::new(external_scorer(cfg)?))
            }
            PredictorKind::MatrixFactorization => {
                let cfg = self.matrix_factorization.as_ref().ok_or_else(|| {
                    GatewayError::Config("[matrix_factorization] section missing".into())
                })?;
                let checkpoint = MFCheckpoint::load(&cfg.checkpoint)?;
                Ok(Arc::new(MfPredictor::from_checkpoint(
                    checkpoint,
                    embedder,
                    cfg.strong_tier,
                    cfg.weak_tier,
                )?))
            }
            PredictorKind::SwRanking => {
                let cfg = self
                    .sw_ranking
                    .as_ref()
                    .ok_or_else(|| GatewayError::Config("[sw_ranking] section missing".into()))?;
                let corpus = match (&cfg.corpus, &cfg.tier_records) {
                    (Some(path), _) => RankingCorpus::load_json(path)?,
                    (None, Some(path)) => {
                        let (records, _errors) = load_tier_records(path)?;
                        let battles = embed_tier_records(&records, embedder.as_ref())?;
                        RankingCorpus::from_battles(
                            &battles,
                            embedder.model_name(),
                            CorpusConfig {
                                gamma: cfg.gamma,
                                lambda: cfg.lambda,
                                top_n: cfg.top_n,
                                tier_count: cfg.tier_count,
                            },
                        )?
                    }
                    (None, None) => {
                        return Err(GatewayError::Config(
                            "[sw_ranking] needs either corpus or tier_records".into(),
                        ))
                    }
                };
                Ok(Arc::new(SwRankingPredictor::new(
                    corpus,
                    embedder,
                    cfg.strong_tier,
                    cfg.weak_tier,
                )?))
            }
        }
    }
}

/// Replace every `${NAME}` in the raw config text with the value of the
/// environment variable `NAME`; a missing variable is an error.
pub fn interpolate_env(raw: &str) -> Result<String, GatewayError> {
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find('}')
            .ok_or_else(|| GatewayError::Config("unterminated ${ in config".into()))?;
        let name = &after[..end];
        let value =
            std::env::var(name).map_err(|_| GatewayError::MissingEnv(name.to_string()))?;
        out.push_str(&value);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_substitutes_and_reports_missing() {
        unsafe { std::env::set_var("GATEWAY_TEST_VALUE", "hello") };
        assert_eq!(
            interpolate_env("x = \"${GATEWAY_TEST_VALUE}\"").unwrap(),
            "x = \"hello\""
        );
        assert!(matches!(
            interpolate_env("x = \"${GATEWAY_TEST_MISSING_VALUE}\""),
            Err(GatewayError::MissingEnv(v)) if v == "GATEWAY_TEST_MISSING_VALUE"
        ));
        assert!(interpolate_env("x = ${unterminated").is_err());
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let toml = r#"
            alpha = 0.5
            predictor = "random"

            [strong_backend]
            base_url = "http://strong"
            model = "big"

            [weak_backend]
            base_url = "http://weak"
            model = "small"
        "#;
        let config: GatewayConfig = toml::from_str(toml).unwrap();
        config.validate().unwrap();
        assert_eq!(config.listen, "127.0.0.1:8080");
        assert_eq!(config.request_timeout_ms, 30_000);
        assert!(config.backend_retry_other);
        assert_eq!(config.multi_turn, MultiTurn::FirstTurn);
        assert_eq!(config.fallback, FallbackDecision::Strong);
    }

    #[test]
    fn predictor_sections_are_required() {
        let toml = r#"
            alpha = 0.5
            predictor = "matrix_factorization"

            [strong_backend]
            base_url = "http://strong"
            model = "big"

            [weak_backend]
            base_url = "http://weak"
            model = "small"
        "#;
        let config: GatewayConfig = toml::from_str(toml).unwrap();
        assert!(matches!(config.validate(), Err(GatewayError::Config(_))));
    }

    #[test]
    fn out_of_range_alpha_rejected() {
        let toml = r#"
            alpha = 1.5
            predictor = "random"

            [strong_backend]
            base_url = "http://strong"
            model = "big"

            [weak_backend]
            base_url = "http://weak"
            model = "small"
        "#;
        let config: GatewayConfig = toml::from_str(toml).unwrap();
        assert!(config.validate().is_err());
    }
}
