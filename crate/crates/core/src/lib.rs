//! Core library for routing queries between a strong (expensive) and a weak
//! (cheap) LLM.
//!
//! The pipeline: ingest pairwise preference data ([`preference`]), cluster
//! models into Elo tiers ([`tiering`]), embed queries ([`embedding`]), fit a
//! win-prediction model ([`sw_ranking`] or [`matrix_factorization`]), convert
//! win probabilities into routing decisions ([`engine`]), and measure the
//! quality/cost trade-off offline ([`evaluation`]).

pub mod embedding;
pub mod engine;
pub mod evaluation;
pub mod math;
pub mod matrix_factorization;
pub mod preference;
pub mod sw_ranking;
pub mod tiering;
