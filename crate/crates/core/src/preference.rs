//! Pairwise preference datasets: loading, validation, pruning, golden-label
//! augmentation, contamination checks, and merging.
//!
//! A preference record stores only the query and the two model identities —
//! never the model responses.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{EmbedError, EmbeddingVector, QueryEmbedder};

/// Prompts shorter than this many characters carry too little signal and are
/// pruned before training.
pub const DEFAULT_MIN_PROMPT_CHARS: usize = 16;

/// Default cosine-similarity threshold above which an evaluation query is
/// considered contaminated by the training set.
pub const DEFAULT_CONTAMINATION_THRESHOLD: f64 = 0.95;

/// Outcome of one pairwise battle.
///
/// For binary routing supervision, `Tie` and `TieBothBad` both count as a
/// win for the weaker side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ComparisonLabel {
    WinFirst,
    WinSecond,
    Tie,
    TieBothBad,
}

impl ComparisonLabel {
    /// Parse a Chatbot-Arena-export label string.
    pub fn from_arena(s: &str) -> Option<Self> {
        match s {
            "model_a" => Some(Self::WinFirst),
            "model_b" => Some(Self::WinSecond),
            "tie" => Some(Self::Tie),
            "tie (bothbad)" => Some(Self::TieBothBad),
            _ => None,
        }
    }

    pub fn as_arena(&self) -> &'static str {
        match self {
            Self::WinFirst => "model_a",
            Self::WinSecond => "model_b",
            Self::Tie => "tie",
            Self::TieBothBad => "tie (bothbad)",
        }
    }

    pub fn is_tie(&self) -> bool {
        matches!(self, Self::Tie | Self::TieBothBad)
    }
}

/// One pairwise battle: query plus the identities of the two compared
/// models. Responses are never stored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PreferenceRecord {
    pub query: String,
    pub model_first: String,
    pub model_second: String,
    pub label: ComparisonLabel,
}

impl PreferenceRecord {
    pub fn new(
        query: impl Into<String>,
        model_first: impl Into<String>,
        model_second: impl Into<String>,
        label: ComparisonLabel,
    ) -> Result<Self, String> {
        let record = Self {
            query: query.into(),
            model_first: model_first.into(),
            model_second: model_second.into(),
            label,
        };
        record.validate()?;
        Ok(record)
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.query.trim().is_empty() {
            return Err("empty prompt".to_string());
        }
        if self.model_first == self.model_second {
            return Err(format!("identical models {:?}", self.model_first));
        }
        Ok(())
    }
}

/// One golden-labeled answer: whether `model`'s response to `query` was
/// correct under the dataset's automatic metric.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GoldenRecord {
    pub query: String,
    pub model: String,
    pub correct: bool,
}

/// Bookkeeping for a processed dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub record_count: usize,
    pub model_set: BTreeSet<String>,
    pub pruned_count: usize,
    pub contaminated_count: usize,
    /// Records contributed per source, e.g. "base" / "gold".
    pub source_counts: BTreeMap<String, usize>,
}

impl DatasetSummary {
    pub fn from_records(records: &[PreferenceRecord]) -> Self {
        let mut model_set = BTreeSet::new();
        for r in records {
            model_set.insert(r.model_first.clone());
            model_set.insert(r.model_second.clone());
        }
        Self {
            record_count: records.len(),
            model_set,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    ArenaJsonLines,
    Csv,
}

impl FromStr for DatasetFormat {
    type Err = PreferenceError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "arena_json_lines" | "arena-json-lines" | "jsonl" => Ok(Self::ArenaJsonLines),
            "csv" => Ok(Self::Csv),
            other => Err(PreferenceError::UnknownFormat(other.to_string())),
        }
    }
}

impl fmt::Display for DatasetFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::ArenaJsonLines => write!(f, "arena_json_lines"),
            Self::Csv => write!(f, "csv"),
        }
    }
}

#[derive(Debug, Error)]
pub enum PreferenceError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("format mismatch: {failed} of {total} rows failed to parse as {format}")]
    FormatMismatch {
        failed: usize,
        total: usize,
        format: String,
    },
    #[error("CSV header mismatch: expected `prompt,model_a,model_b,winner`, got `{0}`")]
    CsvHeader(String),
    #[error("unknown dataset format {0:?}")]
    UnknownFormat(String),
    #[error("golden pairing names the same model twice: {0:?}")]
    InvalidPairing(String),
    #[error("duplicate golden record for query {query:?} and model {model}")]
    DuplicateGolden { query: String, model: String },
    #[error("while embedding {text:?}: {source}")]
    Embedding {
        text: String,
        #[source]
        source: EmbedError,
    },
}

/// A row that failed to parse, with its 1-based line number.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowError {
    pub line: u64,
    pub message: String,
}

impl fmt::Display for RowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

#[derive(Debug, Default)]
pub struct LoadOutcome {
    pub records: Vec<PreferenceRecord>,
    pub row_errors: Vec<RowError>,
}

#[derive(Serialize, Deserialize)]
struct ArenaRow {
    prompt: String,
    model_a: String,
    model_b: String,
    winner: String,
}

fn record_from_row(row: ArenaRow) -> Result<PreferenceRecord, String> {
    let label = ComparisonLabel::from_arena(&row.winner)
        .ok_or_else(|| format!("unknown winner label {:?}", row.winner))?;
    PreferenceRecord::new(row.prompt, row.model_a, row.model_b, label)
}

/// Load a preference dataset, collecting malformed rows as line-numbered
/// errors. If more than half of the rows fail, the file is assumed to be in
/// the wrong format and loading fails.
pub fn load_preference_dataset(
    path: impl AsRef<Path>,
    format: DatasetFormat,
) -> Result<LoadOutcome, PreferenceError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| PreferenceError::Io {
        path: path.display().to_string(),
        source,
    })?;

    let mut outcome = LoadOutcome::default();
    let mut total = 0usize;

    match format {
        DatasetFormat::ArenaJsonLines => {
            let reader = BufReader::new(file);
            for (idx, line) in reader.lines().enumerate() {
                let line_no = idx as u64 + 1;
                let line = line.map_err(|source| PreferenceError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                if line.trim().is_empty() {
                    continue;
                }
                total += 1;
                let parsed = serde_json::from_str::<ArenaRow>(&line)
                    .map_err(|e| e.to_string())
                    .and_then(record_from_row);
                match parsed {
                    Ok(r) => outcome.records.push(r),
                    Err(message) => outcome.row_errors.push(RowError {
                        line: line_no,
                        message,
                    }),
                }
            }
        }
        DatasetFormat::Csv => {
            let mut reader = csv::Reader::from_reader(file);
            let headers = reader
                .headers()
                .map_err(|e| PreferenceError::CsvHeader(e.to_string()))?
                .clone();
            let expected = ["prompt", "model_a", "model_b", "winner"];
            if headers.iter().collect::<Vec<_>>() != expected {
                return Err(PreferenceError::CsvHeader(
                    headers.iter().collect::<Vec<_>>().join(","),
                ));
            }
            for result in reader.into_records() {
                total += 1;
                match result {
                    Ok(record) => {
                        let line_no = record.position().map(|p| p.line()).unwrap_or(0);
                        let parsed = record
                            .deserialize::<ArenaRow>(Some(&headers))
                            .map_err(|e| e.to_string())
                            .and_then(record_from_row);
                        match parsed {
                            Ok(r) => outcome.records.push(r),
                            Err(message) => outcome.row_errors.push(RowError {
                                line: line_no,
                                message,
                            }),
                        }
                    }
                    Err(e) => outcome.row_errors.push(RowError {
                        line: e.position().map(|p| p.line()).unwrap_or(0),
                        message: e.to_string(),
                    }),
                }
            }
        }
    }

    if outcome.row_errors.len() * 2 > total {
        return Err(PreferenceError::FormatMismatch {
            failed: outcome.row_errors.len(),
            total,
            format: format.to_string(),
        });
    }
    Ok(outcome)
}

/// Serialize records in the given format; `load -> save -> load` round-trips
/// to an identical record list.
pub fn save_preference_dataset(
    records: &[PreferenceRecord],
    path: impl AsRef<Path>,
    format: DatasetFormat,
) -> Result<(), PreferenceError> {
    let path = path.as_ref();
    let io_err = |source| PreferenceError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    match format {
        DatasetFormat::ArenaJsonLines => {
            let mut w = BufWriter::new(file);
            for r in records {
                let row = ArenaRow {
                    prompt: r.query.clone(),
                    model_a: r.model_first.clone(),
                    model_b: r.model_second.clone(),
                    winner: r.label.as_arena().to_string(),
                };
                serde_json::to_writer(&mut w, &row).map_err(|e| PreferenceError::Io {
                    path: path.display().to_string(),
                    source: std::io::Error::other(e),
                })?;
                w.write_all(b"\n").map_err(io_err)?;
            }
            w.flush().map_err(io_err)?;
        }
        DatasetFormat::Csv => {
            let mut w = csv::Writer::from_writer(file);
            w.write_record(["prompt", "model_a", "model_b", "winner"])
                .map_err(|e| PreferenceError::Io {
                    path: path.display().to_string(),
                    source: std::io::Error::other(e),
                })?;
            for r in records {
                w.write_record([
                    r.query.as_str(),
                    r.model_first.as_str(),
                    r.model_second.as_str(),
                    r.label.as_arena(),
                ])
                .map_err(|e| PreferenceError::Io {
                    path: path.display().to_string(),
                    source: std::io::Error::other(e),
                })?;
            }
            w.flush().map_err(io_err)?;
        }
    }
    Ok(())
}

/// Keep only records whose query is at least `min_chars` Unicode scalar
/// values long. Order-preserving and idempotent.
pub fn prune_short_prompts(
    mut records: Vec<PreferenceRecord>,
    min_chars: usize,
) -> Vec<PreferenceRecord> {
    records.retain(|r| r.query.chars().count() >= min_chars);
    records
}

#[derive(Serialize, Deserialize)]
struct GoldenRow {
    prompt: String,
    model: String,
    correct: bool,
}

/// Load a golden dataset (`{prompt, model, correct}` JSON lines).
pub fn load_golden_dataset(
    path: impl AsRef<Path>,
) -> Result<(Vec<GoldenRecord>, Vec<RowError>), PreferenceError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| PreferenceError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    let mut row_errors = Vec::new();
    let mut total = 0usize;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| PreferenceError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        total += 1;
        match serde_json::from_str::<GoldenRow>(&line) {
            Ok(row) => records.push(GoldenRecord {
                query: row.prompt,
                model: row.model,
                correct: row.correct,
            }),
            Err(e) => row_errors.push(RowError {
                line: idx as u64 + 1,
                message: e.to_string(),
            }),
        }
    }
    if row_errors.len() * 2 > total {
        return Err(PreferenceError::FormatMismatch {
            failed: row_errors.len(),
            total,
            format: "golden_json_lines".to_string(),
        });
    }
    Ok((records, row_errors))
}

#[derive(Debug, Default)]
pub struct GoldDerivation {
    pub records: Vec<PreferenceRecord>,
    /// Queries that had a golden record for only one model of the pairing.
    pub skipped_queries: Vec<String>,
}

/// Derive pairwise comparison labels from golden correctness labels for one
/// model pairing: correct-vs-incorrect wins, equal correctness is a tie.
pub fn derive_gold_preferences(
    gold: &[GoldenRecord],
    pairing: (&str, &str),
) -> Result<GoldDerivation, PreferenceError> {
    let (first, second) = pairing;
    if first == second {
        return Err(PreferenceError::InvalidPairing(first.to_string()));
    }

    let mut order: Vec<&str> = Vec::new();
    let mut slots: HashMap<&str, (Option<bool>, Option<bool>)> = HashMap::new();
    for record in gold {
        let side = if record.model == first {
            0
        } else if record.model == second {
            1
        } else {
            continue; // models outside the pairing are irrelevant here
        };
        let entry = slots.entry(record.query.as_str()).or_insert_with(|| {
            order.push(record.query.as_str());
            (None, None)
        });
        let slot = if side == 0 { &mut entry.0 } else { &mut entry.1 };
        if slot.is_some() {
            return Err(PreferenceError::DuplicateGolden {
                query: record.query.clone(),
                model: record.model.clone(),
            });
        }
        *slot = Some(record.correct);
    }

    let mut out = GoldDerivation::default();
    for query in order {
        match slots[query] {
            (Some(a), Some(b)) => {
                let label = match (a, b) {
                    (true, false) => ComparisonLabel::WinFirst,
                    (false, true) => ComparisonLabel::WinSecond,
                    _ => ComparisonLabel::Tie,
                };
                out.records.push(PreferenceRecord {
                    query: query.to_string(),
                    model_first: first.to_string(),
                    model_second: second.to_string(),
                    label,
                });
            }
            _ => out.skipped_queries.push(query.to_string()),
        }
    }
    Ok(out)
}

/// Flag evaluation queries whose maximum cosine similarity to any training
/// query reaches `threshold`. The training set is returned unmodified; the
/// flagged indices refer to `eval_queries`.
pub fn contamination_filter(
    train: Vec<PreferenceRecord>,
    eval_queries: &[String],
    embedder: &dyn QueryEmbedder,
    threshold: f64,
) -> Result<(Vec<PreferenceRecord>, Vec<usize>), PreferenceError> {
    if train.is_empty() || eval_queries.is_empty() {
        return Ok((train, Vec::new()));
    }

    let train_texts: Vec<String> = train.iter().map(|r| r.query.clone()).collect();
    let train_vecs = embed_identifying(embedder, &train_texts)?;
    let eval_vecs = embed_identifying(embedder, eval_queries)?;

    let train_norms: Vec<f64> = train_vecs.iter().map(EmbeddingVector::norm).collect();
    for (i, n) in train_norms.iter().enumerate() {
        if *n == 0.0 {
            return Err(PreferenceError::Embedding {
                text: train_texts[i].clone(),
                source: EmbedError::ZeroNorm,
            });
        }
    }

    let mut flagged = Vec::new();
    for (i, ev) in eval_vecs.iter().enumerate() {
        let en = ev.norm();
        if en == 0.0 {
            return Err(PreferenceError::Embedding {
                text: eval_queries[i].clone(),
                source: EmbedError::ZeroNorm,
            });
        }
        let mut max_cos = f64::NEG_INFINITY;
        for (tv, tn) in train_vecs.iter().zip(&train_norms) {
            let cos = ev.dot(tv) / (en * tn);
            if cos > max_cos {
                max_cos = cos;
            }
        }
        if max_cos >= threshold {
            flagged.push(i);
        }
    }
    Ok((train, flagged))
}

/// Embed a batch; on failure, probe texts one at a time to identify the
/// offender. If every text embeds individually, the per-text results are
/// used (the batch failure was transient).
fn embed_identifying(
    embedder: &dyn QueryEmbedder,
    texts: &[String],
) -> Result<Vec<EmbeddingVector>, PreferenceError> {
    match embedder.embed(texts) {
        Ok(v) => Ok(v),
        Err(batch_err) => {
            let mut out = Vec::with_capacity(texts.len());
            for text in texts {
                match embedder.embed(std::slice::from_ref(text)) {
                    Ok(mut v) if v.len() == 1 => out.push(v.pop().expect("one vector")),
                    Ok(_) | Err(_) => {
                        return Err(PreferenceError::Embedding {
                            text: text.clone(),
                            source: batch_err,
                        })
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Concatenate two datasets; augmentation records follow the base records.
pub fn merge_datasets(
    mut base: Vec<PreferenceRecord>,
    augment: Vec<PreferenceRecord>,
) -> Vec<PreferenceRecord> {
    base.extend(augment);
    base
}
