//! HTTP proxy that routes live chat-completion requests to a strong or weak
//! backend according to a win predictor and a cost threshold, exposing
//! routing metadata headers and overhead metrics.

mod config;
mod metrics;
mod service;

pub use config::{
    interpolate_env, BackendConfig, GatewayConfig, GatewayError, MfPredictorConfig, MultiTurn,
    PredictorKind, RandomConfig, SwPredictorConfig,
};
pub use metrics::{LatencySummary, Metrics, MetricsSnapshot, RouteLog, RouteLogEntry};
pub use service::{app, serve, GatewayState, ResolvedBackend, RuntimeOptions};
