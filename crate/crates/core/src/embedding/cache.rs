//! Persistent embedding cache: a single append-only file keyed by
//! (embedding model name, content hash of the text).

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Mutex, RwLock};

use super::{EmbedError, EmbeddingVector};

const MAGIC: &[u8; 8] = b"EMBCACHE";
const VERSION: u32 = 1;

/// Entries for one embedding model; all vectors share one dimension.
#[derive(Default)]
struct ModelSpace {
    dim: usize,
    entries: HashMap<[u8; 32], Vec<f32>>,
}

/// Concurrent embedding cache with optional single-file persistence.
///
/// Vectors are stored as raw little-endian `f32`, so a cache hit returns a
/// bit-identical copy of what was inserted. Keys include the model name, so
/// switching embedding models never mixes vector spaces.
pub struct EmbeddingCache {
    spaces: RwLock<HashMap<String, ModelSpace>>,
    writer: Option<Mutex<BufWriter<File>>>,
    path: Option<PathBuf>,
}

impl EmbeddingCache {
    /// Cache without a backing file; contents are lost on drop.
    pub fn in_memory() -> Self {
        Self {
            spaces: RwLock::new(HashMap::new()),
            writer: None,
            path: None,
        }
    }

    /// Open (or create) a file-backed cache.
    ///
    /// A truncated trailing record (torn final write) is ignored; everything
    /// before it is served. A wrong magic header is an error.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, EmbedError> {
        let path = path.as_ref().to_path_buf();
        let io_err = |source| EmbedError::CacheIo {
            path: path.display().to_string(),
            source,
        };

        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .open(&path)
            .map_err(io_err)?;

        let len = file.metadata().map_err(io_err)?.len();
        let mut spaces = HashMap::new();
        if len == 0 {
            file.write_all(MAGIC).map_err(io_err)?;
            file.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
            file.flush().map_err(io_err)?;
        } else {
            let mut reader = BufReader::new(&mut file);
            let mut magic = [0u8; 8];
            reader.read_exact(&mut magic).map_err(io_err)?;
            let mut version = [0u8; 4];
            reader.read_exact(&mut version).map_err(io_err)?;
            if &magic != MAGIC {
                return Err(EmbedError::CacheCorrupt {
                    path: path.display().to_string(),
                    reason: "bad magic header".into(),
                });
            }
            let version = u32::from_le_bytes(version);
            if version != VERSION {
                return Err(EmbedError::CacheCorrupt {
                    path: path.display().to_string(),
                    reason: format!("unsupported version {version}"),
                });
            }
            Self::read_records(&mut reader, &mut spaces, &path)?;
            file.seek(SeekFrom::End(0)).map_err(io_err)?;
        }

        Ok(Self {
            spaces: RwLock::new(spaces),
            writer: Some(Mutex::new(BufWriter::new(file))),
            path: Some(path),
        })
    }

    fn read_records(
        reader: &mut impl Read,
        spaces: &mut HashMap<String, ModelSpace>,
        path: &Path,
    ) -> Result<(), EmbedError> {
        loop {
            let mut model_len = [0u8; 2];
            match read_exact_or_eof(reader, &mut model_len) {
                ReadOutcome::Eof | ReadOutcome::Partial => break,
                ReadOutcome::Err(source) => {
                    return Err(EmbedError::CacheIo {
                        path: path.display().to_string(),
                        source,
                    })
                }
                ReadOutcome::Full => {}
            }
            let model_len = u16::from_le_bytes(model_len) as usize;
            let mut model = vec![0u8; model_len];
            let mut hash = [0u8; 32];
            let mut dim = [0u8; 4];
            if !read_all(reader, &mut model)
                || !read_all(reader, &mut hash)
                || !read_all(reader, &mut dim)
            {
                break; // torn trailing record
            }
            let dim = u32::from_le_bytes(dim) as usize;
            let mut values = vec![0u8; dim * 4];
            if !read_all(reader, &mut values) {
                break;
            }
            let model = match String::from_utf8(model) {
                Ok(m) => m,
                Err(_) => {
                    return Err(EmbedError::CacheCorrupt {
                        path: path.display().to_string(),
                        reason: "model name is not valid UTF-8".into(),
                    })
                }
            };
            let vector: Vec<f32> = values
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let space = spaces.entry(model).or_default();
            if space.entries.is_empty() {
                space.dim = dim;
            } else if space.dim != dim {
                return Err(EmbedError::CacheCorrupt {
                    path: path.display().to_string(),
                    reason: format!("mixed dimensions {} and {dim} for one model", space.dim),
                });
            }
            space.entries.insert(hash, vector);
        }
        Ok(())
    }

    /// Content hash used as the per-model cache key.
    pub fn text_hash(text: &str) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        Sha256::digest(text.as_bytes()).into()
    }

    pub fn get(&self, model: &str, text: &str) -> Option<EmbeddingVector> {
        let hash = Self::text_hash(text);
        let spaces = self.spaces.read().expect("cache lock poisoned");
        spaces
            .get(model)
            .and_then(|s| s.entries.get(&hash))
            .map(|v| EmbeddingVector::from_raw(v.clone()))
    }

    /// Dimension of the vectors stored for `model`, if any.
    pub fn dimension(&self, model: &str) -> Option<usize> {
        let spaces = self.spaces.read().expect("cache lock poisoned");
        spaces.get(model).map(|s| s.dim)
    }

    pub fn len(&self) -> usize {
        let spaces = self.spaces.read().expect("cache lock poisoned");
        spaces.values().map(|s| s.entries.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert a vector. Rejects a vector whose dimension differs from what
    /// the cache already holds for this model. Re-inserting an existing key
    /// is a no-op.
    pub fn insert(
        &self,
        model: &str,
        text: &str,
        vector: &EmbeddingVector,
    ) -> Result<(), EmbedError> {
        let hash = Self::text_hash(text);
        {
            let mut spaces = self.spaces.write().expect("cache lock poisoned");
            let space = spaces.entry(model.to_string()).or_default();
            if space.entries.is_empty() {
                space.dim = vector.dim();
            } else if space.dim != vector.dim() {
                return Err(EmbedError::DimensionMismatch {
                    expected: space.dim,
                    actual: vector.dim(),
                });
            }
            if space
                .entries
                .insert(hash, vector.values().to_vec())
                .is_some()
            {
                return Ok(()); // already persisted
            }
        }
        if let Some(writer) = &self.writer {
            let mut w = writer.lock().expect("cache writer poisoned");
            let io_err = |source| EmbedError::CacheIo {
                path: self
                    .path
                    .as_ref()
                    .map(|p| p.display().to_string())
                    .unwrap_or_default(),
                source,
            };
            let model_bytes = model.as_bytes();
            w.write_all(&(model_bytes.len() as u16).to_le_bytes())
                .map_err(io_err)?;
            w.write_all(model_bytes).map_err(io_err)?;
            w.write_all(&hash).map_err(io_err)?;
            w.write_all(&(vector.dim() as u32).to_le_bytes())
                .map_err(io_err)?;
            for v in vector.values() {
                w.write_all(&v.to_le_bytes()).map_err(io_err)?;
            }
            w.flush().map_err(io_err)?;
        }
        Ok(())
    }
}

enum ReadOutcome {
    Full,
    Eof,
    Partial,
    Err(std::io::Error),
}

fn read_exact_or_eof(reader: &mut impl Read, buf: &mut [u8]) -> ReadOutcome {
    let mut filled = 0;
    while filled < buf.len() {
        match reader.read(&mut buf[filled..]) {
            Ok(0) => {
                return if filled == 0 {
                    ReadOutcome::Eof
                } else {
                    ReadOutcome::Partial
                }
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => continue,
            Err(e) => return ReadOutcome::Err(e),
        }
    }
    ReadOutcome::Full
}

fn read_all(reader: &mut impl Read, buf: &mut [u8]) -> bool {
    matches!(read_exact_or_eof(reader, buf), ReadOutcome::Full)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn in_memory_roundtrip() {
        let cache = EmbeddingCache::in_memory();
        let v = EmbeddingVector::from_raw(vec![1.0, -2.5, 0.125]);
        cache.insert("m", "hello", &v).unwrap();
        assert_eq!(cache.get("m", "hello").unwrap(), v);
        assert!(cache.get("m", "other").is_none());
        assert!(cache.get("other-model", "hello").is_none());
    }

    #[test]
    fn file_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.cache");
        let v = EmbeddingVector::from_raw(vec![0.1, f32::MIN_POSITIVE, -3.75e8]);
        {
            let cache = EmbeddingCache::open(&path).unwrap();
            cache.insert("m", "q", &v).unwrap();
        }
        let cache = EmbeddingCache::open(&path).unwrap();
        let got = cache.get("m", "q").unwrap();
        let want_bits: Vec<u32> = v.values().iter().map(|x| x.to_bits()).collect();
        let got_bits: Vec<u32> = got.values().iter().map(|x| x.to_bits()).collect();
        assert_eq!(want_bits, got_bits);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let cache = EmbeddingCache::in_memory();
        cache
            .insert("m", "a", &EmbeddingVector::from_raw(vec![1.0, 2.0]))
            .unwrap();
        let err = cache
            .insert("m", "b", &EmbeddingVector::from_raw(vec![1.0]))
            .unwrap_err();
        assert!(matches!(
            err,
            EmbedError::DimensionMismatch {
                expected: 2,
                actual: 1
            }
        ));
        // a different model may use a different dimension
        cache
            .insert("m2", "b", &EmbeddingVector::from_raw(vec![1.0]))
            .unwrap();
    }

    #[test]
    fn torn_trailing_record_is_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.cache");
        {
            let cache = EmbeddingCache::open(&path).unwrap();
            cache
                .insert("m", "a", &EmbeddingVector::from_raw(vec![1.0, 2.0]))
                .unwrap();
        }
        // simulate a torn write: append half a record
        {
            let mut f = OpenOptions::new().append(true).open(&path).unwrap();
            f.write_all(&3u16.to_le_bytes()).unwrap();
            f.write_all(b"m").unwrap(); // shorter than the declared name
        }
        let cache = EmbeddingCache::open(&path).unwrap();
        assert_eq!(cache.len(), 1);
        assert!(cache.get("m", "a").is_some());
    }

    #[test]
    fn bad_magic_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.cache");
        std::fs::write(&path, b"NOTMAGIC0000").unwrap();
        assert!(matches!(
            EmbeddingCache::open(&path),
            Err(EmbedError::CacheCorrupt { .. })
        ));
    }
}
