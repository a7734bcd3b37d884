//! Query embeddings: a configurable external provider, a deterministic
//! offline stub, a persistent cache, and similarity primitives.

mod cache;
mod provider;

pub use cache::EmbeddingCache;
pub use provider::{HttpEmbeddingBackend, ProviderConfig};

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EmbedError {
    #[error("I/O error on embedding cache {path}: {source}")]
    CacheIo {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("embedding cache {path} is corrupt: {reason}")]
    CacheCorrupt { path: String, reason: String },
    #[error("embedding dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("zero-norm embedding vector")]
    ZeroNorm,
    #[error("non-finite embedding value")]
    NonFinite,
    #[error("embedding provider rejected credentials (HTTP {status})")]
    Auth { status: u16 },
    #[error("embedding request failed after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("embedding provider returned {returned} vectors for {requested} inputs")]
    CountMismatch { requested: usize, returned: usize },
    #[error("API key environment variable {0} is not set")]
    MissingApiKey(String),
}

/// A fixed-length query embedding. Entries are finite by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct EmbeddingVector {
    values: Vec<f32>,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f32>) -> Result<Self, EmbedError> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(EmbedError::NonFinite);
        }
        Ok(Self { values })
    }

    /// Construct without the finiteness check, for values we produced
    /// ourselves (cache reads, stub output).
    pub(crate) fn from_raw(values: Vec<f32>) -> Self {
        Self { values }
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// Euclidean norm, accumulated in f64.
    pub fn norm(&self) -> f64 {
        self.values
            .iter()
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn dot(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }
}

impl TryFrom<Vec<f32>> for EmbeddingVector {
    type Error = EmbedError;
    fn try_from(values: Vec<f32>) -> Result<Self, Self::Error> {
        Self::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f32> {
    fn from(v: EmbeddingVector) -> Self {
        v.values
    }
}

/// Cosine similarity in [-1, 1]. Errors on mismatched dimensions or a
/// zero-norm operand.
pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64, EmbedError> {
    if a.dim() != b.dim() {
        return Err(EmbedError::DimensionMismatch {
            expected: a.dim(),
            actual: b.dim(),
        });
    }
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(EmbedError::ZeroNorm);
    }
    Ok((a.dot(b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Anything that turns texts into embedding vectors, order-preserving.
pub trait QueryEmbedder: Send + Sync {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError>;

    /// Name of the embedding model; vectors from different models are never
    /// comparable.
    fn model_name(&self) -> &str;

    fn embed_one(&self, text: &str) -> Result<EmbeddingVector, EmbedError> {
        let mut out = self.embed(std::slice::from_ref(&text.to_string()))?;
        out.pop().ok_or(EmbedError::CountMismatch {
            requested: 1,
            returned: 0,
        })
    }
}

impl<T: QueryEmbedder + ?Sized> QueryEmbedder for Arc<T> {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        (**self).embed(texts)
    }
    fn model_name(&self) -> &str {
        (**self).model_name()
    }
}

/// Raw transport behind the caching [`Embedder`]: one network (or stub)
/// round trip per call.
pub trait EmbeddingBackend: Send + Sync {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError>;
    fn model_name(&self) -> &str;
}

/// Deterministic hash-seeded embedder for tests and air-gapped runs.
///
/// Identical texts map to identical vectors; distinct texts map to
/// independent pseudo-random vectors (near-orthogonal at moderate
/// dimensions).
#[derive(Debug, Clone)]
pub struct StubEmbedder {
    dimension: usize,
    seed: u64,
    name: String,
}

impl StubEmbedder {
    pub fn new(dimension: usize, seed: u64) -> Self {
        Self {
            dimension,
            seed,
            name: format!("stub-d{dimension}-s{seed}"),
        }
    }

    fn vector_for(&self, text: &str) -> EmbeddingVector {
        let hash = EmbeddingCache::text_hash(text);
        let h = u64::from_le_bytes(hash[..8].try_into().expect("8 bytes"));
        let mut rng = ChaCha8Rng::seed_from_u64(h ^ self.seed.rotate_left(17));
        let values = (0..self.dimension)
            .map(|_| rng.random_range(-1.0f32..1.0f32))
            .collect();
        EmbeddingVector::from_raw(values)
    }
}

impl EmbeddingBackend for StubEmbedder {
    fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        Ok(texts.iter().map(|t| self.vector_for(t)).collect())
    }
    fn model_name(&self) -> &str {
        &self.name
    }
}

impl QueryEmbedder for StubEmbedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        self.embed_batch(texts)
    }
    fn model_name(&self) -> &str {
        &self.name
    }
}

/// Caching, batching front end over an [`EmbeddingBackend`].
///
/// Serves repeated texts from the cache, deduplicates within a call, splits
/// misses into provider-sized batches, and runs up to `max_in_flight`
/// batches concurrently.
pub struct Embedder {
    backend: Box<dyn EmbeddingBackend>,
    cache: EmbeddingCache,
    batch_size: usize,
    max_in_flight: usize,
}

impl Embedder {
    pub fn new(
        backend: Box<dyn EmbeddingBackend>,
        cache: EmbeddingCache,
        batch_size: usize,
        max_in_flight: usize,
    ) -> Self {
        Self {
            backend,
            cache,
            batch_size: batch_size.max(1),
            max_in_flight: max_in_flight.max(1),
        }
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    fn fetch_missing(&self, missing: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        let batches: Vec<&[String]> = missing.chunks(self.batch_size).collect();
        let mut results: Vec<Option<Result<Vec<EmbeddingVector>, EmbedError>>> =
            (0..batches.len()).map(|_| None).collect();

        if batches.len() == 1 || self.max_in_flight == 1 {
            for (i, batch) in batches.iter().enumerate() {
                results[i] = Some(self.backend.embed_batch(batch));
            }
        } else {
            let backend = self.backend.as_ref();
            for (wave_start, wave) in batches
                .chunks(self.max_in_flight)
                .enumerate()
                .map(|(w, c)| (w * self.max_in_flight, c))
            {
                std::thread::scope(|s| {
                    let handles: Vec<_> = wave
                        .iter()
                        .map(|batch| s.spawn(move || backend.embed_batch(batch)))
                        .collect();
                    for (off, h) in handles.into_iter().enumerate() {
                        results[wave_start + off] = Some(h.join().expect("embed thread panicked"));
                    }
                });
            }
        }

        let mut out = Vec::with_capacity(missing.len());
        for (batch, result) in batches.iter().zip(results) {
            let vectors = result.expect("batch result missing")?;
            if vectors.len() != batch.len() {
                return Err(EmbedError::CountMismatch {
                    requested: batch.len(),
                    returned: vectors.len(),
                });
            }
            out.extend(vectors);
        }
        Ok(out)
    }
}

impl QueryEmbedder for Embedder {
    fn embed(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
        if texts.is_empty() {
            return Ok(Vec::new());
        }
        let model = self.backend.model_name();

        let mut slots: Vec<Option<EmbeddingVector>> =
            texts.iter().map(|t| self.cache.get(model, t)).collect();

        let mut missing: Vec<String> = Vec::new();
        let mut seen: HashSet<&str> = HashSet::new();
        for (slot, text) in slots.iter().zip(texts) {
            if slot.is_none() && seen.insert(text.as_str()) {
                missing.push(text.clone());
            }
        }

        if !missing.is_empty() {
            let fetched = self.fetch_missing(&missing)?;
            let mut by_text: HashMap<&str, EmbeddingVector> = HashMap::new();
            for (text, vector) in missing.iter().zip(fetched) {
                self.cache.insert(model, text, &vector)?;
                by_text.insert(text.as_str(), vector);
            }
            for (slot, text) in slots.iter_mut().zip(texts) {
                if slot.is_none() {
                    *slot = by_text.get(text.as_str()).cloned();
                }
            }
        }

        Ok(slots
            .into_iter()
            .map(|s| s.expect("all slots filled"))
            .collect())
    }

    fn model_name(&self) -> &str {
        self.backend.model_name()
    }
}

pub const DEFAULT_STUB_DIMENSION: usize = 64;

/// Declarative embedder configuration shared by the CLI and the gateway.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "provider", rename_all = "snake_case")]
pub enum EmbeddingProviderSpec {
    /// Deterministic offline embedder.
    Stub {
        #[serde(default = "default_stub_dimension")]
        dimension: usize,
        #[serde(default)]
        seed: u64,
    },
    /// OpenAI-compatible `/v1/embeddings` endpoint.
    #[serde(alias = "http")]
    Openai(ProviderConfig),
}

fn default_stub_dimension() -> usize {
    DEFAULT_STUB_DIMENSION
}

impl Default for EmbeddingProviderSpec {
    fn default() -> Self {
        Self::Stub {
            dimension: DEFAULT_STUB_DIMENSION,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct EmbedderSpec {
    #[serde(flatten)]
    pub provider: EmbeddingProviderSpec,
    /// Persistent cache file; in-memory cache when absent.
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
}

impl EmbedderSpec {
    pub fn offline(dimension: usize, seed: u64) -> Self {
        Self {
            provider: EmbeddingProviderSpec::Stub { dimension, seed },
            cache_path: None,
        }
    }

    pub fn build(&self) -> Result<Embedder, EmbedError> {
        let cache = match &self.cache_path {
            Some(path) => EmbeddingCache::open(path)?,
            None => EmbeddingCache::in_memory(),
        };
        match &self.provider {
            EmbeddingProviderSpec::Stub { dimension, seed } => Ok(Embedder::new(
                Box::new(StubEmbedder::new(*dimension, *seed)),
                cache,
                2048,
                1,
            )),
            EmbeddingProviderSpec::Openai(cfg) => {
                let backend = HttpEmbeddingBackend::new(cfg.clone())?;
                Ok(Embedder::new(
                    Box::new(backend),
                    cache,
                    cfg.batch_size,
                    cfg.max_in_flight,
                ))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn vec32(values: &[f32]) -> EmbeddingVector {
        EmbeddingVector::from_raw(values.to_vec())
    }

    #[test]
    fn cosine_of_identical_vectors_is_one() {
        let v = vec32(&[0.3, -1.2, 4.0]);
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_of_orthogonal_vectors_is_zero() {
        let a = vec32(&[1.0, 0.0]);
        let b = vec32(&[0.0, 5.0]);
        assert_eq!(cosine_similarity(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn cosine_matches_hand_computation() {
        let a = vec32(&[1.0, 0.0]);
        let b = vec32(&[1.0, 1.0]);
        let got = cosine_similarity(&a, &b).unwrap();
        assert!((got - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-9, "got {got}");
    }

    #[test]
    fn cosine_rejects_zero_norm_and_mismatched_dims() {
        let a = vec32(&[0.0, 0.0]);
        let b = vec32(&[1.0, 1.0]);
        assert!(matches!(
            cosine_similarity(&a, &b),
            Err(EmbedError::ZeroNorm)
        ));
        let c = vec32(&[1.0]);
        assert!(matches!(
            cosine_similarity(&b, &c),
            Err(EmbedError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn embedding_vector_rejects_non_finite() {
        assert!(EmbeddingVector::new(vec![1.0, f32::NAN]).is_err());
        assert!(EmbeddingVector::new(vec![1.0, f32::INFINITY]).is_err());
    }

    proptest! {
        #[test]
        fn cosine_symmetric_and_scale_invariant(
            a in proptest::collection::vec(-100.0f32..100.0, 4),
            b in proptest::collection::vec(-100.0f32..100.0, 4),
            lambda in 0.01f32..100.0,
        ) {
            let va = vec32(&a);
            let vb = vec32(&b);
            prop_assume!(va.norm() > 1e-3 && vb.norm() > 1e-3);
            let scaled: Vec<f32> = a.iter().map(|x| x * lambda).collect();
            let vs = vec32(&scaled);
            prop_assume!(vs.norm() > 1e-3);
            let ab = cosine_similarity(&va, &vb).unwrap();
            let ba = cosine_similarity(&vb, &va).unwrap();
            let sb = cosine_similarity(&vs, &vb).unwrap();
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!((ab - sb).abs() < 1e-5);
        }
    }

    #[test]
    fn stub_is_deterministic_and_text_sensitive() {
        let s1 = StubEmbedder::new(32, 7);
        let s2 = StubEmbedder::new(32, 7);
        let a = s1.embed_one("hello").unwrap();
        let b = s2.embed_one("hello").unwrap();
        assert_eq!(a, b);
        let c = s1.embed_one("world").unwrap();
        assert_ne!(a, c);
        assert_eq!(a.dim(), 32);
    }

    /// Backend that counts network calls, for cache-contract tests.
    #[derive(Clone)]
    struct CountingBackend {
        inner: StubEmbedder,
        calls: Arc<AtomicUsize>,
    }

    impl CountingBackend {
        fn new(dim: usize) -> Self {
            Self {
                inner: StubEmbedder::new(dim, 0),
                calls: Arc::new(AtomicUsize::new(0)),
            }
        }

        fn count(&self) -> usize {
            self.calls.load(Ordering::SeqCst)
        }
    }

    impl EmbeddingBackend for CountingBackend {
        fn embed_batch(&self, texts: &[String]) -> Result<Vec<EmbeddingVector>, EmbedError> {
            self.calls.fetch_add(1, Ordering::SeqCst);
            self.inner.embed_batch(texts)
        }
        fn model_name(&self) -> &str {
            EmbeddingBackend::model_name(&self.inner)
        }
    }

    #[test]
    fn repeated_text_hits_cache() {
        let backend = CountingBackend::new(8);
        let embedder = Embedder::new(
            Box::new(backend.clone()),
            EmbeddingCache::in_memory(),
            2048,
            1,
        );
        let texts = vec!["same text".to_string()];
        let first = embedder.embed(&texts).unwrap();
        assert_eq!(backend.count(), 1);
        let second = embedder.embed(&texts).unwrap();
        assert_eq!(backend.count(), 1, "cache hit expected");
        assert_eq!(first, second);
    }

    #[test]
    fn empty_input_is_empty_output() {
        let embedder = Embedder::new(
            Box::new(StubEmbedder::new(8, 0)),
            EmbeddingCache::in_memory(),
            2048,
            1,
        );
        assert!(embedder.embed(&[]).unwrap().is_empty());
    }

    #[test]
    fn batch_count_is_ceil_of_texts_over_limit() {
        let backend = CountingBackend::new(4);
        let embedder = Embedder::new(
            Box::new(backend.clone()),
            EmbeddingCache::in_memory(),
            2048,
            1,
        );
        let texts: Vec<String> = (0..2500).map(|i| format!("text {i}")).collect();
        let out = embedder.embed(&texts).unwrap();
        assert_eq!(out.len(), 2500);
        assert_eq!(backend.count(), 2);
    }

    #[test]
    fn duplicates_within_one_call_are_deduplicated() {
        let backend = CountingBackend::new(4);
        let embedder = Embedder::new(Box::new(backend.clone()), EmbeddingCache::in_memory(), 2, 1);
        let texts = vec![
            "a".to_string(),
            "b".to_string(),
            "a".to_string(),
            "b".to_string(),
        ];
        let out = embedder.embed(&texts).unwrap();
        assert_eq!(backend.count(), 1); // 2 unique texts, batch size 2
        assert_eq!(out[0], out[2]);
        assert_eq!(out[1], out[3]);
    }

    #[test]
    fn cache_survives_process_restart() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.cache");
        let texts: Vec<String> = (0..10).map(|i| format!("query {i}")).collect();

        let backend1 = CountingBackend::new(16);
        let first = {
            let embedder = Embedder::new(
                Box::new(backend1.clone()),
                EmbeddingCache::open(&path).unwrap(),
                4,
                1,
            );
            embedder.embed(&texts).unwrap()
        };
        assert!(backend1.count() > 0);

        // "restart": fresh embedder over the same file, fresh counter
        let backend2 = CountingBackend::new(16);
        let embedder = Embedder::new(
            Box::new(backend2.clone()),
            EmbeddingCache::open(&path).unwrap(),
            4,
            1,
        );
        let second = embedder.embed(&texts).unwrap();
        assert_eq!(backend2.count(), 0, "no network calls after restart");
        for (a, b) in first.iter().zip(&second) {
            let ab: Vec<u32> = a.values().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.values().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb);
        }
    }

    #[test]
    fn concurrent_batches_preserve_order() {
        let backend = CountingBackend::new(4);
        let embedder = Embedder::new(Box::new(backend.clone()), EmbeddingCache::in_memory(), 10, 4);
        let texts: Vec<String> = (0..95).map(|i| format!("t{i}")).collect();
        let out = embedder.embed(&texts).unwrap();
        assert_eq!(backend.count(), 10);
        let direct = StubEmbedder::new(4, 0);
        for (t, v) in texts.iter().zip(&out) {
            assert_eq!(v, &direct.embed_one(t).unwrap());
        }
    }

    #[test]
    fn spec_roundtrips_through_serde() {
        let spec = EmbedderSpec::offline(32, 9);
        let json = serde_json::to_string(&spec).unwrap();
        let back: EmbedderSpec = serde_json::from_str(&json).unwrap();
        let e = back.build().unwrap();
        assert_eq!(e.model_name(), "stub-d32-s9");
    }
}
