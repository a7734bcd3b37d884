//! Offline evaluation: call-performance curves, performance-gap metrics
//! (PGR, APGR, CPT), random baselines with confidence intervals,
//! benchmark-dataset similarity, and cost analysis.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbedError, EmbeddingVector};
use crate::engine::{calibrate_threshold, decide, EngineError, RouteTarget, RoutingDecision};
use crate::preference::RowError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {left} records vs {right} values")]
    LengthMismatch { left: usize, right: usize },
    #[error("strong and weak reference scores are equal ({0}); the gap is undefined")]
    ZeroGap(f64),
    #[error("non-finite score in evaluation records")]
    NonFiniteScore,
    #[error("need at least 2 trials, got {0}")]
    TooFewTrials(usize),
    #[error("token counts sum to zero")]
    ZeroTokens,
    #[error("{0}")]
    InvalidInput(String),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format mismatch: {failed} of {total} rows failed to parse")]
    FormatMismatch { failed: usize, total: usize },
}

/// One benchmark query with precomputed quality scores for both sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    #[serde(rename = "prompt")]
    pub query: String,
    pub score_weak: f64,
    pub score_strong: f64,
    /// A predictor's output for this query, filled by the harness.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub win_probability: Option<f64>,
}

/// Load evaluation records from `{prompt, score_weak, score_strong}` JSON
/// lines.
pub fn load_eval_records(
    path: impl AsRef<Path>,
) -> Result<(Vec<EvalRecord>, Vec<RowError>), EvalError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut records = Vec::new();
    let mut row_errors = Vec::new();
    let mut total = 0usize;
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match serde_json::from_str::<EvalRecord>(&line) {
            Ok(r) if r.score_weak.is_finite() && r.score_strong.is_finite() => records.push(r),
            Ok(_) => row_errors.push(RowError {
                line: idx as u64 + 1,
                message: "non-finite score".into(),
            }),
            Err(e) => row_errors.push(RowError {
                line: idx as u64 + 1,
                message: e.to_string(),
            }),
        }
    }
    if row_errors.len() * 2 > total {
        return Err(EvalError::FormatMismatch {
            failed: row_errors.len(),
            total,
        });
    }
    Ok((records, row_errors))
}

/// Fraction of decisions that routed to the strong model.
pub fn strong_call_fraction(decisions: &[RoutingDecision]) -> Result<f64, EvalError> {
    if decisions.is_empty() {
        return Err(EvalError::Empty);
    }
    let strong = decisions
        .iter()
        .filter(|d| d.target == RouteTarget::Strong)
        .count();
    Ok(strong as f64 / decisions.len() as f64)
}

/// Mean response quality under the given decisions (strong score where the
/// router chose strong, weak score otherwise).
pub fn average_quality(
    records: &[EvalRecord],
    decisions: &[RoutingDecision],
) -> Result<f64, EvalError> {
    if records.len() != decisions.len() {
        return Err(EvalError::LengthMismatch {
            left: records.len(),
            right: decisions.len(),
        });
    }
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(quality_of_targets(
        records,
        decisions.iter().map(|d| d.target),
    ))
}

fn quality_of_targets(
    records: &[EvalRecord],
    targets: impl Iterator<Item = RouteTarget>,
) -> f64 {
    let mut sum = 0.0;
    for (r, target) in records.iter().zip(targets) {
        sum += match target {
            RouteTarget::Strong => r.score_strong,
            RouteTarget::Weak => r.score_weak,
        };
    }
    sum / records.len() as f64
}

/// Performance gap recovered: where the router's quality sits between the
/// weak and strong references. Unclipped — values outside [0, 1] are real
/// behavior and reported as such.
pub fn pgr(r_router: f64, r_weak: f64, r_strong: f64) -> Result<f64, EvalError> {
    let gap = r_strong - r_weak;
    if gap == 0.0 {
        return Err(EvalError::ZeroGap(r_strong));
    }
    Ok((r_router - r_weak) / gap)
}

fn reference_means(records: &[EvalRecord]) -> Result<(f64, f64), EvalError> {
    if records.is_empty() {
        return Err(EvalError::Empty);
    }
    if records
        .iter()
        .any(|r| !r.score_weak.is_finite() || !r.score_strong.is_finite())
    {
        return Err(EvalError::NonFiniteScore);
    }
    let n = records.len() as f64;
    let weak = records.iter().map(|r| r.score_weak).sum::<f64>() / n;
    let strong = records.iter().map(|r| r.score_strong).sum::<f64>() / n;
    Ok((weak, strong))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    /// The discretization target for the strong-call fraction.
    pub target_fraction: f64,
    /// The fraction actually achieved by the calibrated threshold.
    pub achieved_fraction: f64,
    pub pgr: f64,
    /// 95% confidence half-width, present for randomized baselines.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ci95: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallPerformanceCurve {
    pub predictor_name: String,
    pub points: Vec<CurvePoint>,
}

impl CallPerformanceCurve {
    /// CSV rows `strong_fraction,pgr,ci95` (ci95 empty when absent).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("strong_fraction,pgr,ci95\n");
        for p in &self.points {
            let ci = p.ci95.map(|c| c.to_string()).unwrap_or_default();
            out.push_str(&format!("{},{},{}\n", p.target_fraction, p.pgr, ci));
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), EvalError> {
        let path = path.as_ref();
        let io_err = |source| EvalError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        w.write_all(self.to_csv().as_bytes()).map_err(io_err)?;
        w.flush().map_err(io_err)
    }
}

/// The ten call-fraction targets discretizing [0%, 100%].
pub fn default_call_targets() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 10.0).collect()
}

/// Midpoint discretization of [0%, 100%], the quadrature grid for APGR
/// summaries: the mean of PGR over these ten points is the midpoint-rule
/// integral of the call-performance curve, and a random router scores
/// exactly 0.5 on it in expectation.
pub fn apgr_call_targets() -> Vec<f64> {
    (0..10).map(|i| 0.05 + i as f64 / 10.0).collect()
}

/// Sweep the threshold over the call-fraction targets: calibrate alpha per
/// target on these records, route, and report PGR per point.
pub fn sweep_curve(
    records: &[EvalRecord],
    probabilities: &[f64],
    targets: &[f64],
    predictor_name: impl Into<String>,
) -> Result<CallPerformanceCurve, EvalError> {
    if records.len() != probabilities.len() {
        return Err(EvalError::LengthMismatch {
            left: records.len(),
            right: probabilities.len(),
        });
    }
    let (r_weak, r_strong) = reference_means(records)?;
    if r_strong == r_weak {
        return Err(EvalError::ZeroGap(r_strong));
    }
    let mut points = Vec::with_capacity(targets.len());
    for &target in targets {
        let calibration = calibrate_threshold(probabilities, target)?;
        let quality = quality_of_targets(
            records,
            probabilities.iter().map(|&p| decide(p, calibration.alpha)),
        );
        points.push(CurvePoint {
            target_fraction: target,
            achieved_fraction: calibration.achieved_fraction,
            pgr: pgr(quality, r_weak, r_strong)?,
            ci95: None,
        });
    }
    Ok(CallPerformanceCurve {
        predictor_name: predictor_name.into(),
        points,
    })
}

/// Average performance gap recovered: the mean of the curve's PGR values.
pub fn apgr(curve: &CallPerformanceCurve) -> Result<f64, EvalError> {
    if curve.points.is_empty() {
        return Err(EvalError::Empty);
    }
    Ok(curve.points.iter().map(|p| p.pgr).sum::<f64>() / curve.points.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CptResult {
    /// Minimum strong-call fraction at which PGR reaches the requested
    /// level; 1.0 when unreachable.
    pub strong_fraction: f64,
    pub reachable: bool,
}

/// Call-performance threshold: the minimum strong-call fraction achieving
/// `PGR >= x`, over every operating point the threshold rule can reach
/// (exact enumeration of the sorted probabilities, finer than any grid).
pub fn cpt(records: &[EvalRecord], probabilities: &[f64], x: f64) -> Result<CptResult, EvalError> {
    if records.len() != probabilities.len() {
        return Err(EvalError::LengthMismatch {
            left: records.len(),
            right: probabilities.len(),
        });
    }
    let (r_weak, r_strong) = reference_means(records)?;
    let gap = r_strong - r_weak;
    if gap == 0.0 {
        return Err(EvalError::ZeroGap(r_strong));
    }
    let n = records.len();

    // Sort by descending probability; a threshold always routes a prefix of
    // this order (cut points only between distinct probabilities).
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        probabilities[b]
            .partial_cmp(&probabilities[a])
            .expect("finite probabilities")
            .then(a.cmp(&b))
    });

    let weak_total: f64 = records.iter().map(|r| r.score_weak).sum();
    let mut best: Option<f64> = None;
    let mut prefix_gain = 0.0; // sum of (strong - weak) over the routed prefix
    let mut j = 0;

    // j = 0 is reachable only when no probability equals 1.0 (alpha tops out
    // at 1.0 and the boundary routes strong).
    let zero_reachable = order
        .first()
        .map(|&i| probabilities[i] < 1.0)
        .unwrap_or(true);
    if zero_reachable {
        let quality = weak_total / n as f64;
        if (quality - r_weak) / gap >= x {
            best = Some(0.0);
        }
    }

    while j < n {
        // advance over one group of equal probabilities
        let p = probabilities[order[j]];
        while j < n && probabilities[order[j]] == p {
            let r = &records[order[j]];
            prefix_gain += r.score_strong - r.score_weak;
            j += 1;
        }
        let quality = (weak_total + prefix_gain) / n as f64;
        let fraction = j as f64 / n as f64;
        if (quality - r_weak) / gap >= x && best.map_or(true, |b| fraction < b) {
            best = Some(fraction);
        }
    }

    Ok(match best {
        Some(f) => CptResult {
            strong_fraction: f,
            reachable: true,
        },
        None => CptResult {
            strong_fraction: 1.0,
            reachable: false,
        },
    })
}

/// Random-routing baseline: per trial and target, each query goes strong
/// with the target probability. Points carry the mean PGR and a
/// normal-approximation 95% CI half-width across trials.
#[derive(Debug, Clone)]
pub struct RandomBaseline {
    pub curve: CallPerformanceCurve,
    /// Too few trials or records for the CI to mean much.
    pub degenerate: bool,
}

pub fn random_baseline(
    records: &[EvalRecord],
    targets: &[f64],
    trials: usize,
    seed: u64,
) -> Result<RandomBaseline, EvalError> {
    if trials < 2 {
        return Err(EvalError::TooFewTrials(trials));
    }
    let (r_weak, r_strong) = reference_means(records)?;
    if r_strong == r_weak {
        return Err(EvalError::ZeroGap(r_strong));
    }

    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let trial_seeds: Vec<u64> = (0..trials).map(|_| master.random()).collect();

    let mut per_point: Vec<Vec<f64>> = vec![Vec::with_capacity(trials); targets.len()];
    for &trial_seed in &trial_seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
        for (ti, &target) in targets.iter().enumerate() {
            let quality = quality_of_targets(
                records,
                records.iter().map(|_| {
                    if rng.random_bool(target.clamp(0.0, 1.0)) {
                        RouteTarget::Strong
                    } else {
                        RouteTarget::Weak
                    }
                }),
            );
            per_point[ti].push(pgr(quality, r_weak, r_strong)?);
        }
    }

    let points = targets
        .iter()
        .zip(per_point)
        .map(|(&target, values)| {
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / (values.len() - 1) as f64;
            let ci95 = 1.96 * (var / values.len() as f64).sqrt();
            CurvePoint {
                target_fraction: target,
                achieved_fraction: target,
                pgr: mean,
                ci95: Some(ci95),
            }
        })
        .collect();

    Ok(RandomBaseline {
        curve: CallPerformanceCurve {
            predictor_name: "random".into(),
            points,
        },
        degenerate: trials < 3 || records.len() < 2,
    })
}

/// Mean over benchmark prompts of their maximum cosine similarity to any
/// dataset prompt (exact scan).
pub fn benchmark_dataset_similarity(
    benchmark: &[EmbeddingVector],
    dataset: &[EmbeddingVector],
) -> Result<f64, EvalError> {
    if benchmark.is_empty() || dataset.is_empty() {
        return Err(EvalError::Empty);
    }
    let dim = benchmark[0].dim();
    for v in benchmark.iter().chain(dataset) {
        if v.dim() != dim {
            return Err(EvalError::Embed(EmbedError::DimensionMismatch {
                expected: dim,
                actual: v.dim(),
            }));
        }
    }
    let dataset_norms: Vec<f64> = dataset.iter().map(EmbeddingVector::norm).collect();
    if dataset_norms.iter().any(|&n| n == 0.0) {
        return Err(EvalError::Embed(EmbedError::ZeroNorm));
    }

    let mut total = 0.0;
    for b in benchmark {
        let bn = b.norm();
        if bn == 0.0 {
            return Err(EvalError::Embed(EmbedError::ZeroNorm));
        }
        let mut best = f64::NEG_INFINITY;
        for (d, dn) in dataset.iter().zip(&dataset_norms) {
            let cos = b.dot(d) / (bn * dn);
            if cos > best {
                best = cos;
            }
        }
        total += best;
    }
    Ok(total / benchmark.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CostSide {
    Strong,
    Weak,
}

/// Per-side prices (currency per 1M tokens) and the average token counts of
/// a routed request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostModel {
    pub strong_input_price: f64,
    pub strong_output_price: f64,
    pub weak_input_price: f64,
    pub weak_output_price: f64,
    pub avg_input_tokens: f64,
    pub avg_output_tokens: f64,
}

impl CostModel {
    pub fn load_json(path: impl AsRef<Path>) -> Result<Self, EvalError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| EvalError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_reader(BufReader::new(file))
            .map_err(|e| EvalError::InvalidInput(format!("{}: {e}", path.display())))
    }
}

/// Token-weighted average price per 1M tokens for one side.
///
/// Written as `in_price + out_share * (out_price - in_price)` so equal
/// input/output prices return that price exactly.
pub fn average_token_cost(model: &CostModel, side: CostSide) -> Result<f64, EvalError> {
    let (in_price, out_price) = match side {
        CostSide::Strong => (model.strong_input_price, model.strong_output_price),
        CostSide::Weak => (model.weak_input_price, model.weak_output_price),
    };
    let total = model.avg_input_tokens + model.avg_output_tokens;
    if total <= 0.0 {
        return Err(EvalError::ZeroTokens);
    }
    if in_price < 0.0 || out_price < 0.0 || model.avg_input_tokens < 0.0 || model.avg_output_tokens < 0.0
    {
        return Err(EvalError::InvalidInput("negative price or token count".into()));
    }
    let out_share = model.avg_output_tokens / total;
    Ok(in_price + out_share * (out_price - in_price))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SavingRatio {
    /// Strong-model calls of the random baseline divided by the router's;
    /// infinite when the router needs none.
    pub ratio: f64,
    pub unbounded: bool,
}

/// Cost-saving multiplier of a router over the random baseline at one
/// quality level, from their CPT values.
pub fn cost_saving_ratio(router_cpt: f64, random_cpt: f64) -> Result<SavingRatio, EvalError> {
    if router_cpt < 0.0 || random_cpt < 0.0 {
        return Err(EvalError::InvalidInput("negative CPT".into()));
    }
    if router_cpt == 0.0 {
        return Ok(SavingRatio {
            ratio: f64::INFINITY,
            unbounded: true,
        });
    }
    Ok(SavingRatio {
        ratio: random_cpt / router_cpt,
        unbounded: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::FallbackDecision;
    use proptest::prelude::*;

    fn decision(target: RouteTarget) -> RoutingDecision {
        RoutingDecision {
            target,
            win_probability: if target == RouteTarget::Strong { 1.0 } else { 0.0 },
            threshold: 0.5,
            predictor_name: "test".into(),
            fallback_error: None,
        }
    }

    fn record(weak: f64, strong: f64) -> EvalRecord {
        EvalRecord {
            query: "q".into(),
            score_weak: weak,
            score_strong: strong,
            win_probability: None,
        }
    }

    /// Oracle eval set: strong is better on `strong_better` of `n` queries
    /// and tied elsewhere. Oracle probabilities rank every strong win above
    /// every tie and are pairwise distinct, so any operating point is
    /// reachable by calibration.
    fn oracle_set(n: usize, strong_better: usize) -> (Vec<EvalRecord>, Vec<f64>) {
        let records: Vec<EvalRecord> = (0..n)
            .map(|i| {
                if i < strong_better {
                    record(0.0, 1.0)
                } else {
                    record(0.5, 0.5)
                }
            })
            .collect();
        let probs: Vec<f64> = (0..n)
            .map(|i| {
                if i < strong_better {
                    0.9 - 1e-6 * i as f64
                } else {
                    0.1 - 1e-6 * (i - strong_better) as f64
                }
            })
            .collect();
        (records, probs)
    }

    #[test]
    fn strong_fraction_counts() {
        let all_strong: Vec<_> = (0..4).map(|_| decision(RouteTarget::Strong)).collect();
        assert_eq!(strong_call_fraction(&all_strong).unwrap(), 1.0);
        let mixed: Vec<_> = (0..10)
            .map(|i| decision(if i < 3 { RouteTarget::Strong } else { RouteTarget::Weak }))
            .collect();
        assert_eq!(strong_call_fraction(&mixed).unwrap(), 0.3);
        let all_weak: Vec<_> = (0..4).map(|_| decision(RouteTarget::Weak)).collect();
        assert_eq!(strong_call_fraction(&all_weak).unwrap(), 0.0);
    }

    #[test]
    fn average_quality_follows_decisions() {
        let records = vec![record(0.0, 1.0), record(0.0, 1.0)];
        let both_strong = vec![decision(RouteTarget::Strong), decision(RouteTarget::Strong)];
        assert_eq!(average_quality(&records, &both_strong).unwrap(), 1.0);
        let split = vec![decision(RouteTarget::Strong), decision(RouteTarget::Weak)];
        assert_eq!(average_quality(&records, &split).unwrap(), 0.5);
        let short = vec![decision(RouteTarget::Weak)];
        assert!(matches!(
            average_quality(&records, &short),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn pgr_endpoints_and_formula() {
        assert_eq!(pgr(6.0, 6.0, 9.0).unwrap(), 0.0);
        assert_eq!(pgr(9.0, 6.0, 9.0).unwrap(), 1.0);
        assert!((pgr(8.0, 6.0, 9.0).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!(matches!(pgr(1.0, 2.0, 2.0), Err(EvalError::ZeroGap(_))));
    }

    #[test]
    fn pgr_affine_invariance() {
        let (a, b) = (1.7, 0.3);
        let cases = [(0.41, 0.12, 0.93), (5.5, 2.0, 9.0), (0.0, -1.0, 1.0)];
        for (router, weak, strong) in cases {
            let before = pgr(router, weak, strong).unwrap();
            let after = pgr(a * router + b, a * weak + b, a * strong + b).unwrap();
            assert!((before - after).abs() < 1e-12, "{before} vs {after}");
        }
    }

    #[test]
    fn oracle_sweep_dominates_diagonal() {
        let (records, probs) = oracle_set(200, 80);
        let targets = default_call_targets();
        let curve = sweep_curve(&records, &probs, &targets, "oracle").unwrap();
        for p in &curve.points {
            assert!(
                p.pgr >= p.target_fraction - 1e-12,
                "target {} pgr {}",
                p.target_fraction,
                p.pgr
            );
        }
        // last point routes everything strong: PGR exactly 1
        assert_eq!(curve.points.last().unwrap().pgr, 1.0);
    }

    #[test]
    fn anti_oracle_sits_below_diagonal() {
        let (records, probs) = oracle_set(200, 80);
        let inverted: Vec<f64> = probs.iter().map(|p| 1.0 - p).collect();
        let targets = default_call_targets();
        let curve = sweep_curve(&records, &inverted, &targets, "anti").unwrap();
        // interior points must fall below the diagonal
        for p in &curve.points[..curve.points.len() - 1] {
            assert!(p.pgr <= p.target_fraction + 1e-12);
        }
    }

    #[test]
    fn apgr_is_the_mean() {
        let curve = CallPerformanceCurve {
            predictor_name: "x".into(),
            points: (1..=10)
                .map(|i| CurvePoint {
                    target_fraction: i as f64 / 10.0,
                    achieved_fraction: i as f64 / 10.0,
                    pgr: i as f64 / 10.0,
                    ci95: None,
                })
                .collect(),
        };
        assert!((apgr(&curve).unwrap() - 0.55).abs() < 1e-12);
        let flat = CallPerformanceCurve {
            predictor_name: "x".into(),
            points: vec![CurvePoint {
                target_fraction: 0.5,
                achieved_fraction: 0.5,
                pgr: 0.5,
                ci95: None,
            }],
        };
        assert_eq!(apgr(&flat).unwrap(), 0.5);
    }

    #[test]
    fn cpt_zero_is_free_when_router_matches_weak() {
        let (records, probs) = oracle_set(50, 20);
        let r = cpt(&records, &probs, 0.0).unwrap();
        assert_eq!(r.strong_fraction, 0.0);
        assert!(r.reachable);
    }

    #[test]
    fn cpt_oracle_beats_half_cheaply() {
        // strong wins 40% of queries, oracle routes exactly those first:
        // PGR 0.5 needs only half of the winners routed
        let (records, probs) = oracle_set(100, 40);
        let r = cpt(&records, &probs, 0.5).unwrap();
        assert!(r.reachable);
        assert!((r.strong_fraction - 0.2).abs() < 1e-12, "got {}", r.strong_fraction);
    }

    #[test]
    fn cpt_unreachable_is_flagged() {
        let (records, probs) = oracle_set(10, 5);
        let r = cpt(&records, &probs, 1.5).unwrap();
        assert_eq!(r.strong_fraction, 1.0);
        assert!(!r.reachable);
    }

    #[test]
    fn cpt_non_decreasing_in_x() {
        let (records, probs) = oracle_set(60, 25);
        let mut prev = 0.0;
        for i in 0..=10 {
            let x = i as f64 / 10.0;
            let r = cpt(&records, &probs, x).unwrap();
            assert!(r.strong_fraction >= prev - 1e-12);
            prev = r.strong_fraction;
        }
    }

    #[test]
    fn random_baseline_is_near_diagonal() {
        let records: Vec<EvalRecord> = (0..500)
            .map(|i| if i % 2 == 0 { record(0.0, 1.0) } else { record(0.3, 0.8) })
            .collect();
        let targets = default_call_targets();
        let baseline = random_baseline(&records, &targets, 100, 7).unwrap();
        assert!(!baseline.degenerate);
        for p in &baseline.curve.points {
            assert!(
                (p.pgr - p.target_fraction).abs() < 0.05,
                "target {} mean pgr {}",
                p.target_fraction,
                p.pgr
            );
        }
        // on the midpoint quadrature grid, random APGR is 0.5
        let baseline = random_baseline(&records, &apgr_call_targets(), 100, 7).unwrap();
        let a = apgr(&baseline.curve).unwrap();
        assert!((a - 0.5).abs() < 0.02, "APGR {a}");
    }

    #[test]
    fn random_ci_shrinks_with_sqrt_trials() {
        let records: Vec<EvalRecord> = (0..200)
            .map(|i| if i % 3 == 0 { record(0.0, 1.0) } else { record(0.2, 0.9) })
            .collect();
        let targets = vec![0.5];
        let few = random_baseline(&records, &targets, 100, 3).unwrap();
        let many = random_baseline(&records, &targets, 400, 3).unwrap();
        let ratio = few.curve.points[0].ci95.unwrap() / many.curve.points[0].ci95.unwrap();
        assert!((ratio - 2.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn tiny_baseline_is_degenerate() {
        let records = vec![record(0.0, 1.0)];
        let baseline = random_baseline(&records, &[0.5], 2, 1).unwrap();
        assert!(baseline.degenerate);
        assert!(matches!(
            random_baseline(&records, &[0.5], 1, 1),
            Err(EvalError::TooFewTrials(1))
        ));
    }

    fn vec32(values: &[f32]) -> EmbeddingVector {
        EmbeddingVector::new(values.to_vec()).unwrap()
    }

    #[test]
    fn similarity_one_when_benchmark_subset_of_dataset() {
        let a = vec32(&[1.0, 2.0]);
        let b = vec32(&[-3.0, 0.5]);
        let sim =
            benchmark_dataset_similarity(&[a.clone()], &[b, a]).unwrap();
        assert!((sim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn similarity_two_by_two_hand_case() {
        // row maxima 0.9 and 0.7 -> mean 0.8
        let unit = |c: f32| vec32(&[c, (1.0 - c * c).sqrt()]);
        let bench = vec![vec32(&[1.0, 0.0]), vec32(&[0.0, 1.0])];
        let data = vec![unit(0.9), vec32(&[(1.0f32 - 0.49).sqrt(), 0.7])];
        // bench0: cos(d0) = 0.9, cos(d1) ≈ 0.714 -> max 0.9
        // bench1: cos(d0) ≈ 0.436, cos(d1) = 0.7  -> max 0.7
        let sim = benchmark_dataset_similarity(&bench, &data).unwrap();
        assert!((sim - 0.8).abs() < 1e-6, "got {sim}");
    }

    proptest! {
        #[test]
        fn similarity_matches_brute_force(
            bench in proptest::collection::vec(proptest::collection::vec(-5.0f32..5.0, 3), 1..6),
            data in proptest::collection::vec(proptest::collection::vec(-5.0f32..5.0, 3), 1..6),
        ) {
            let to_vecs = |vs: &Vec<Vec<f32>>| -> Vec<EmbeddingVector> {
                vs.iter().map(|v| vec32(v)).collect()
            };
            let bench = to_vecs(&bench);
            let data = to_vecs(&data);
            prop_assume!(bench.iter().chain(&data).all(|v| v.norm() > 1e-3));
            let got = benchmark_dataset_similarity(&bench, &data).unwrap();
            // independent brute force with the public cosine routine
            let mut total = 0.0;
            for b in &bench {
                let mut best = f64::NEG_INFINITY;
                for d in &data {
                    best = best.max(crate::embedding::cosine_similarity(b, d).unwrap());
                }
                total += best;
            }
            let want = total / bench.len() as f64;
            prop_assert!((got - want).abs() < 1e-9);
        }
    }

    fn paper_cost_model() -> CostModel {
        CostModel {
            strong_input_price: 10.0,
            strong_output_price: 30.0,
            weak_input_price: 0.24,
            weak_output_price: 0.24,
            avg_input_tokens: 95.0,
            avg_output_tokens: 264.0,
        }
    }

    #[test]
    fn strong_average_cost_matches_reference() {
        let c = average_token_cost(&paper_cost_model(), CostSide::Strong).unwrap();
        assert!((c - 24.7).abs() < 0.05, "got {c}");
    }

    #[test]
    fn flat_pricing_returns_price_exactly() {
        let c = average_token_cost(&paper_cost_model(), CostSide::Weak).unwrap();
        assert_eq!(c, 0.24);
        // equal prices dominate any token split
        let mut m = paper_cost_model();
        m.weak_input_price = 1.5;
        m.weak_output_price = 1.5;
        m.avg_input_tokens = 1.0;
        m.avg_output_tokens = 999.0;
        assert_eq!(average_token_cost(&m, CostSide::Weak).unwrap(), 1.5);
    }

    #[test]
    fn zero_tokens_is_an_error() {
        let mut m = paper_cost_model();
        m.avg_input_tokens = 0.0;
        m.avg_output_tokens = 0.0;
        assert!(matches!(
            average_token_cost(&m, CostSide::Strong),
            Err(EvalError::ZeroTokens)
        ));
    }

    #[test]
    fn saving_ratio_reference_values() {
        assert_eq!(cost_saving_ratio(0.4, 0.4).unwrap().ratio, 1.0);
        let r = cost_saving_ratio(0.1340, 0.4903).unwrap();
        assert!((r.ratio - 3.66).abs() < 0.01, "got {}", r.ratio);
        assert_eq!(cost_saving_ratio(0.8, 0.4).unwrap().ratio, 0.5);
        let unbounded = cost_saving_ratio(0.0, 0.4).unwrap();
        assert!(unbounded.unbounded);
        assert!(unbounded.ratio.is_infinite());
    }

    #[test]
    fn eval_records_roundtrip_via_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("eval.jsonl");
        std::fs::write(
            &path,
            concat!(
                r#"{"prompt":"q1","score_weak":0.2,"score_strong":0.9}"#,
                "\n",
                r#"{"prompt":"q2","score_weak":1.0,"score_strong":1.0,"win_probability":0.4}"#,
                "\n",
                "garbage\n",
            ),
        )
        .unwrap();
        let (records, errors) = load_eval_records(&path).unwrap();
        assert_eq!(records.len(), 2);
        assert_eq!(errors.len(), 1);
        assert_eq!(errors[0].line, 3);
        assert_eq!(records[1].win_probability, Some(0.4));
    }

    #[test]
    fn curve_csv_shape() {
        let curve = CallPerformanceCurve {
            predictor_name: "x".into(),
            points: vec![
                CurvePoint {
                    target_fraction: 0.1,
                    achieved_fraction: 0.1,
                    pgr: 0.25,
                    ci95: None,
                },
                CurvePoint {
                    target_fraction: 0.2,
                    achieved_fraction: 0.2,
                    pgr: 0.5,
                    ci95: Some(0.01),
                },
            ],
        };
        let csv = curve.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "strong_fraction,pgr,ci95");
        assert_eq!(lines[1], "0.1,0.25,");
        assert_eq!(lines[2], "0.2,0.5,0.01");
    }

    #[test]
    fn fallback_decisions_still_satisfy_metrics() {
        // routing through the engine with a failing predictor still produces
        // decisions the metrics accept
        struct Bad;
        impl crate::engine::WinPredictor for Bad {
            fn predict(&self, _q: &str) -> Result<f64, crate::engine::PredictorError> {
                Err(crate::engine::PredictorError::Model("nope".into()))
            }
            fn name(&self) -> &str {
                "bad"
            }
        }
        let records = vec![record(0.0, 1.0), record(0.0, 1.0)];
        let decisions: Vec<RoutingDecision> = records
            .iter()
            .map(|r| crate::engine::route(&r.query, &Bad, 0.5, FallbackDecision::Strong).unwrap())
            .collect();
        assert_eq!(strong_call_fraction(&decisions).unwrap(), 1.0);
        assert_eq!(average_quality(&records, &decisions).unwrap(), 1.0);
    }
}
