//! Cluster models into tiers from Elo scores and map battles between raw
//! models onto battles between tiers.
//!
//! Tiers are contiguous bands in Elo order (tier 0 = highest Elo). The
//! partition minimizes the total within-tier sum of squared deviations via
//! dynamic programming; among equal-cost partitions the one with the
//! smallest tier 0 wins.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbedError, EmbeddingVector, QueryEmbedder};
use crate::preference::{ComparisonLabel, PreferenceRecord, RowError};

pub const DEFAULT_TIER_COUNT: usize = 10;

#[derive(Debug, Error)]
pub enum TieringError {
    #[error("{models} models cannot be split into {k} tiers")]
    TooFewModels { models: usize, k: usize },
    #[error("non-finite Elo rating for model {0:?}")]
    NonFiniteElo(String),
    #[error("strong and weak tier sets overlap (tier {0})")]
    OverlappingTiers(usize),
    #[error("no models fall in the {0} tier set")]
    EmptySide(&'static str),
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid JSON in {path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Leaderboard Elo scores, one per model.
#[derive(Debug, Clone, PartialEq)]
pub struct EloTable {
    entries: BTreeMap<String, f64>,
}

impl EloTable {
    pub fn new(entries: impl IntoIterator<Item = (String, f64)>) -> Result<Self, TieringError> {
        let entries: BTreeMap<String, f64> = entries.into_iter().collect();
        for (model, elo) in &entries {
            if !elo.is_finite() {
                return Err(TieringError::NonFiniteElo(model.clone()));
            }
        }
        Ok(Self { entries })
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, TieringError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| TieringError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let entries: BTreeMap<String, f64> =
            serde_json::from_reader(BufReader::new(file)).map_err(|source| TieringError::Json {
                path: path.display().to_string(),
                source,
            })?;
        Self::new(entries)
    }

    pub fn to_json_file(&self, path: impl AsRef<Path>) -> Result<(), TieringError> {
        let path = path.as_ref();
        let io_err = |source| TieringError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        serde_json::to_writer_pretty(&mut w, &self.entries).map_err(|source| TieringError::Json {
            path: path.display().to_string(),
            source,
        })?;
        w.write_all(b"\n").map_err(io_err)?;
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, model: &str) -> Option<f64> {
        self.entries.get(model).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.entries.iter().map(|(m, &e)| (m.as_str(), e))
    }
}

/// Assignment of every model to one of `tier_count` tiers.
#[derive(Debug, Clone, PartialEq)]
pub struct TierAssignment {
    tier_of: BTreeMap<String, usize>,
    tier_count: usize,
    /// Elo midpoints between consecutive tiers; populated by
    /// [`assign_tiers`], empty when loaded from a plain `{model: tier}` file.
    boundaries: Vec<f64>,
}

impl TierAssignment {
    pub fn tier_of(&self, model: &str) -> Option<usize> {
        self.tier_of.get(model).copied()
    }

    pub fn tier_count(&self) -> usize {
        self.tier_count
    }

    pub fn boundaries(&self) -> &[f64] {
        &self.boundaries
    }

    pub fn len(&self) -> usize {
        self.tier_of.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tier_of.is_empty()
    }

    pub fn members(&self, tier: usize) -> Vec<&str> {
        self.tier_of
            .iter()
            .filter(|(_, &t)| t == tier)
            .map(|(m, _)| m.as_str())
            .collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, usize)> {
        self.tier_of.iter().map(|(m, &t)| (m.as_str(), t))
    }

    /// Exported as a flat `{model: tier_index}` JSON object.
    pub fn to_json_file(&self, path: impl AsRef<Path>) -> Result<(), TieringError> {
        let path = path.as_ref();
        let io_err = |source| TieringError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
        serde_json::to_writer_pretty(&mut w, &self.tier_of).map_err(|source| TieringError::Json {
            path: path.display().to_string(),
            source,
        })?;
        w.write_all(b"\n").map_err(io_err)?;
        w.flush().map_err(io_err)?;
        Ok(())
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self, TieringError> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|source| TieringError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let tier_of: BTreeMap<String, usize> =
            serde_json::from_reader(BufReader::new(file)).map_err(|source| TieringError::Json {
                path: path.display().to_string(),
                source,
            })?;
        let tier_count = tier_of.values().max().map_or(0, |&t| t + 1);
        Ok(Self {
            tier_of,
            tier_count,
            boundaries: Vec::new(),
        })
    }
}

/// Sum of squared deviations of `values[a..b]`, from prefix sums.
struct SseTable {
    sum: Vec<f64>,
    sum_sq: Vec<f64>,
}

impl SseTable {
    fn new(values: &[f64]) -> Self {
        let mut sum = vec![0.0; values.len() + 1];
        let mut sum_sq = vec![0.0; values.len() + 1];
        for (i, &v) in values.iter().enumerate() {
            sum[i + 1] = sum[i] + v;
            sum_sq[i + 1] = sum_sq[i] + v * v;
        }
        Self { sum, sum_sq }
    }

    fn cost(&self, a: usize, b: usize) -> f64 {
        let n = (b - a) as f64;
        let s = self.sum[b] - self.sum[a];
        let sq = self.sum_sq[b] - self.sum_sq[a];
        (sq - s * s / n).max(0.0)
    }
}

/// Optimal contiguous split of `values` (in the given order) into `k`
/// segments minimizing total within-segment SSE. Returns segment lengths.
/// Among equal-cost splits, earlier segments are as short as possible.
fn optimal_contiguous_split(values: &[f64], k: usize) -> Vec<usize> {
    let n = values.len();
    debug_assert!(k >= 1 && n >= k);
    let sse = SseTable::new(values);

    // best[j][i]: min cost splitting values[i..n] into j segments.
    // choice[j][i]: end of the first segment, smallest among optima.
    let mut best = vec![vec![f64::INFINITY; n + 1]; k + 1];
    let mut choice = vec![vec![0usize; n + 1]; k + 1];
    for i in 0..n {
        best[1][i] = sse.cost(i, n);
        choice[1][i] = n;
    }
    for j in 2..=k {
        for i in 0..=(n - j) {
            let mut best_cost = f64::INFINITY;
            let mut best_end = i + 1;
            for m in (i + 1)..=(n - (j - 1)) {
                let c = sse.cost(i, m) + best[j - 1][m];
                if c < best_cost {
                    best_cost = c;
                    best_end = m;
                }
            }
            best[j][i] = best_cost;
            choice[j][i] = best_end;
        }
    }

    let mut lengths = Vec::with_capacity(k);
    let mut i = 0;
    for j in (1..=k).rev() {
        let end = choice[j][i];
        lengths.push(end - i);
        i = end;
    }
    lengths
}

/// Partition models into `k` contiguous Elo tiers minimizing total
/// within-tier SSE; tier 0 holds the highest-Elo models.
pub fn assign_tiers(elo: &EloTable, k: usize) -> Result<TierAssignment, TieringError> {
    let n = elo.len();
    if k == 0 || n < k {
        return Err(TieringError::TooFewModels { models: n, k });
    }

    // Descending Elo; equal ratings ordered by name for determinism.
    let mut models: Vec<(&str, f64)> = elo.iter().collect();
    models.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite Elo")
            .then_with(|| a.0.cmp(b.0))
    });
    let elos: Vec<f64> = models.iter().map(|(_, e)| *e).collect();

    let lengths = optimal_contiguous_split(&elos, k);

    let mut tier_of = BTreeMap::new();
    let mut boundaries = Vec::with_capacity(k - 1);
    let mut start = 0;
    for (tier, &len) in lengths.iter().enumerate() {
        let end = start + len;
        for (model, _) in &models[start..end] {
            tier_of.insert(model.to_string(), tier);
        }
        if end < n {
            boundaries.push((elos[end - 1] + elos[end]) / 2.0);
        }
        start = end;
    }

    Ok(TierAssignment {
        tier_of,
        tier_count: k,
        boundaries,
    })
}

pub fn tier_label(tier: usize) -> String {
    format!("tier_{tier}")
}

pub fn parse_tier_label(label: &str) -> Option<usize> {
    label.strip_prefix("tier_")?.parse().ok()
}

/// A battle mapped from raw model identities to tier indices. Same-tier
/// battles are legal here (they regularize downstream learning).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TierRecord {
    pub query: String,
    pub tier_first: usize,
    pub tier_second: usize,
    pub label: ComparisonLabel,
}

#[derive(Debug, Default)]
pub struct TierMapping {
    pub records: Vec<TierRecord>,
    /// Battles dropped because a participant is missing from the assignment.
    pub dropped_count: usize,
}

/// Replace model identities with tier indices; battles involving a model
/// absent from the assignment are dropped and counted.
pub fn battles_to_tier_records(
    records: &[PreferenceRecord],
    tiers: &TierAssignment,
) -> TierMapping {
    let mut out = TierMapping::default();
    for r in records {
        match (tiers.tier_of(&r.model_first), tiers.tier_of(&r.model_second)) {
            (Some(a), Some(b)) => out.records.push(TierRecord {
                query: r.query.clone(),
                tier_first: a,
                tier_second: b,
                label: r.label,
            }),
            _ => out.dropped_count += 1,
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct TierRow {
    prompt: String,
    model_a: String,
    model_b: String,
    winner: String,
}

/// Tier records serialize like arena battles with `tier_N` identities.
pub fn save_tier_records(
    records: &[TierRecord],
    path: impl AsRef<Path>,
) -> Result<(), TieringError> {
    let path = path.as_ref();
    let io_err = |source| TieringError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut w = BufWriter::new(File::create(path).map_err(io_err)?);
    for r in records {
        let row = TierRow {
            prompt: r.query.clone(),
            model_a: tier_label(r.tier_first),
            model_b: tier_label(r.tier_second),
            winner: r.label.as_arena().to_string(),
        };
        serde_json::to_writer(&mut w, &row).map_err(|source| TieringError::Json {
            path: path.display().to_string(),
            source,
        })?;
        w.write_all(b"\n").map_err(io_err)?;
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub fn load_tier_records(
    path: impl AsRef<Path>,
) -> Result<(Vec<TierRecord>, Vec<RowError>), TieringError> {
    use std::io::BufRead;
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| TieringError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut records = Vec::new();
    let mut row_errors = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|source| TieringError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<TierRow>(&line)
            .map_err(|e| e.to_string())
            .and_then(|row| {
                let tier_first = parse_tier_label(&row.model_a)
                    .ok_or_else(|| format!("not a tier label: {:?}", row.model_a))?;
                let tier_second = parse_tier_label(&row.model_b)
                    .ok_or_else(|| format!("not a tier label: {:?}", row.model_b))?;
                let label = ComparisonLabel::from_arena(&row.winner)
                    .ok_or_else(|| format!("unknown winner label {:?}", row.winner))?;
                Ok(TierRecord {
                    query: row.prompt,
                    tier_first,
                    tier_second,
                    label,
                })
            });
        match parsed {
            Ok(r) => records.push(r),
            Err(message) => row_errors.push(RowError {
                line: idx as u64 + 1,
                message,
            }),
        }
    }
    Ok((records, row_errors))
}

/// A tier battle paired with the embedding of its query.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedBattle {
    pub tier_first: usize,
    pub tier_second: usize,
    pub label: ComparisonLabel,
    pub embedding: EmbeddingVector,
}

impl EmbeddedBattle {
    /// Collapse the label to a (winner, loser) tier pair. Ties count as a
    /// win for the weaker side (the larger tier index); a tie between equal
    /// tiers keeps declaration order.
    pub fn winner_loser(&self) -> (usize, usize) {
        match self.label {
            ComparisonLabel::WinFirst => (self.tier_first, self.tier_second),
            ComparisonLabel::WinSecond => (self.tier_second, self.tier_first),
            ComparisonLabel::Tie | ComparisonLabel::TieBothBad => {
                if self.tier_second > self.tier_first {
                    (self.tier_second, self.tier_first)
                } else {
                    (self.tier_first, self.tier_second)
                }
            }
        }
    }
}

/// Embed the queries of tier records in one batched pass.
pub fn embed_tier_records(
    records: &[TierRecord],
    embedder: &dyn QueryEmbedder,
) -> Result<Vec<EmbeddedBattle>, TieringError> {
    let texts: Vec<String> = records.iter().map(|r| r.query.clone()).collect();
    let vectors = embedder.embed(&texts)?;
    Ok(records
        .iter()
        .zip(vectors)
        .map(|(r, embedding)| EmbeddedBattle {
            tier_first: r.tier_first,
            tier_second: r.tier_second,
            label: r.label,
            embedding,
        })
        .collect())
}

/// Model sets for the strong and weak side of the routing problem.
pub fn strong_weak_split(
    tiers: &TierAssignment,
    strong_tiers: &BTreeSet<usize>,
    weak_tiers: &BTreeSet<usize>,
) -> Result<(BTreeSet<String>, BTreeSet<String>), TieringError> {
    if let Some(&t) = strong_tiers.intersection(weak_tiers).next() {
        return Err(TieringError::OverlappingTiers(t));
    }
    let mut strong = BTreeSet::new();
    let mut weak = BTreeSet::new();
    for (model, tier) in tiers.iter() {
        if strong_tiers.contains(&tier) {
            strong.insert(model.to_string());
        } else if weak_tiers.contains(&tier) {
            weak.insert(model.to_string());
        }
    }
    if strong.is_empty() {
        return Err(TieringError::EmptySide("strong"));
    }
    if weak.is_empty() {
        return Err(TieringError::EmptySide("weak"));
    }
    Ok((strong, weak))
}

/// Tiers 0 and 1 represent the strong side, tier 2 the weak side.
pub fn default_strong_weak_split(
    tiers: &TierAssignment,
) -> Result<(BTreeSet<String>, BTreeSet<String>), TieringError> {
    strong_weak_split(
        tiers,
        &BTreeSet::from([0, 1]),
        &BTreeSet::from([2]),
    )
}
