//! Similarity scoring and band filtering for parallel corpora.
//!
//! Pairs are scored by cosine similarity of per-side embeddings from a pluggable
//! [`EmbeddingProvider`], then kept when the score falls inside a half-open
//! [`SimilarityBand`] (low inclusive, high exclusive). Two providers ship with
//! the crate: a deterministic character-n-gram hashing projection and a reader
//! for precomputed per-pair vectors.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, ParallelPair};
use crate::error::{Error, Result};
use crate::hash::Fnv1a;

/// Maps text to a fixed-dimension vector. Implementations must be deterministic:
/// equal text, equal vector.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;

    /// Embeds one text. Providers keyed by pair id rather than text should
    /// return an error here and override [`EmbeddingProvider::embed_pair`].
    fn embed(&self, text: &str) -> Result<Vec<f64>>;

    /// Embeds both sides of a pair. The default embeds each text.
    fn embed_pair(&self, pair: &ParallelPair) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.embed(&pair.source_text)?, self.embed(&pair.target_text)?))
    }
}

/// Cosine similarity of two equal-dimension, non-zero vectors.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            got: b.len(),
        });
    }
    let mut dot = 0.0;
    let mut na = 0.0;
    let mut nb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Invalid {
            what: "vector",
            msg: "cosine similarity of a zero vector is undefined".into(),
        });
    }
    Ok(dot / (na.sqrt() * nb.sqrt()))
}

/// Half-open keep band over similarity scores: keep s iff low <= s < high.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityBand {
    low: f64,
    high: f64,
}

impl SimilarityBand {
    pub fn new(low: f64, high: f64) -> Result<Self> {
        if !(low.is_finite() && high.is_finite()) || low >= high || low < -1.0 || high > 1.0 + 1e-12
        {
            return Err(Error::Invalid {
                what: "similarity band",
                msg: format!("[{low}, {high}) is not a sub-interval of [-1, 1]"),
            });
        }
        Ok(SimilarityBand { low, high })
    }

    pub fn low(&self) -> f64 {
        self.low
    }

    pub fn high(&self) -> f64 {
        self.high
    }

    /// Low edge inclusive, high edge exclusive.
    pub fn contains(&self, similarity: f64) -> bool {
        self.low <= similarity && similarity < self.high
    }
}

/// Scores every pair with cosine similarity of its embeddings, writing results
/// back in input order. Embedding runs in parallel; a provider failure is
/// reported with the offending pair's id.
pub fn score_corpus(corpus: &mut Corpus, provider: &dyn EmbeddingProvider) -> Result<()> {
    let scores: Vec<Result<f64>> = corpus
        .pairs()
        .par_iter()
        .map(|pair| {
            let (a, b) = provider.embed_pair(pair).map_err(|e| Error::Pair {
                id: pair.id,
                msg: e.to_string(),
            })?;
            cosine_similarity(&a, &b).map_err(|e| Error::Pair {
                id: pair.id,
                msg: e.to_string(),
            })
        })
        .collect();
    for (pair, score) in corpus.pairs_mut().iter_mut().zip(scores) {
        pair.similarity = Some(score?);
    }
    Ok(())
}

/// Keeps exactly the pairs whose similarity lies in `band`, preserving order.
/// Every pair must carry a similarity score.
pub fn band_filter(corpus: &Corpus, band: SimilarityBand) -> Result<Corpus> {
    let mut kept = Vec::new();
    for pair in corpus.iter() {
        let sim = pair.similarity.ok_or_else(|| Error::Pair {
            id: pair.id,
            msg: "missing similarity score (run scoring first)".into(),
        })?;
        if band.contains(sim) {
            kept.push(pair.clone());
        }
    }
    Corpus::new(corpus.direction().clone(), kept)
}

/// Deterministic character-n-gram feature-hashing embedder.
///
/// Each n-gram (n in `min_n..=max_n`, over Unicode scalar values) is FNV-1a
/// hashed; the hash selects a component and a sign, and the accumulated vector
/// is L2-normalized. No model weights, no I/O, stable across runs and builds.
pub struct HashNgramEmbedder {
    dim: usize,
    min_n: usize,
    max_n: usize,
}

impl HashNgramEmbedder {
    pub fn new(dim: usize, min_n: usize, max_n: usize) -> Result<Self> {
        if dim == 0 || min_n == 0 || min_n > max_n {
            return Err(Error::Invalid {
                what: "embedder config",
                msg: format!("dim {dim}, n-gram range {min_n}..={max_n}"),
            });
        }
        Ok(HashNgramEmbedder { dim, min_n, max_n })
    }
}

impl Default for HashNgramEmbedder {
    /// 128 dimensions over character 1- to 3-grams.
    fn default() -> Self {
        HashNgramEmbedder::new(128, 1, 3).expect("default config is valid")
    }
}

impl EmbeddingProvider for HashNgramEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let chars: Vec<char> = text.chars().collect();
        if chars.is_empty() {
            return Err(Error::Invalid {
                what: "text",
                msg: "cannot embed empty text".into(),
            });
        }
        let mut v = vec![0.0f64; self.dim];
        let mut buf = [0u8; 4];
        for n in self.min_n..=self.max_n.min(chars.len()) {
            for gram in chars.windows(n) {
                let mut h = Fnv1a::new();
                h.write(&[n as u8]);
                for &ch in gram {
                    h.write(ch.encode_utf8(&mut buf).as_bytes());
                }
                let hash = h.finish();
                let idx = (hash % self.dim as u64) as usize;
                let sign = if (hash >> 32) & 1 == 0 { 1.0 } else { -1.0 };
                v[idx] += sign;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Invalid {
                what: "text",
                msg: "all n-gram features cancelled; cannot normalize".into(),
            });
        }
        for x in &mut v {
            *x /= norm;
        }
        Ok(v)
    }
}

/// Per-pair vectors loaded from a file of lines
/// `{"id": 7, "src_vec": [...], "tgt_vec": [...]}`, keyed by pair id.
#[derive(Debug)]
pub struct PrecomputedEmbeddings {
    dim: usize,
    by_id: HashMap<u64, (Vec<f64>, Vec<f64>)>,
}

impl PrecomputedEmbeddings {
    pub fn load(path: &Path) -> Result<Self> {
        #[derive(Deserialize)]
        struct Line {
            id: u64,
            src_vec: Vec<f64>,
            tgt_vec: Vec<f64>,
        }
        let file = File::open(path).map_err(Error::io(path))?;
        let mut by_id = HashMap::new();
        let mut dim = None;
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(Error::io(path))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Line = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: line_no,
                msg: e.to_string(),
            })?;
            let d = *dim.get_or_insert(rec.src_vec.len());
            if rec.src_vec.len() != d || rec.tgt_vec.len() != d || d == 0 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!(
                        "vector dims {}/{} differ from file dim {d}",
                        rec.src_vec.len(),
                        rec.tgt_vec.len()
                    ),
                });
            }
            if by_id.insert(rec.id, (rec.src_vec, rec.tgt_vec)).is_some() {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("duplicate vector entry for pair id {}", rec.id),
                });
            }
        }
        match dim {
            Some(dim) => Ok(PrecomputedEmbeddings { dim, by_id }),
            None => Err(Error::file(path, "empty vectors file")),
        }
    }

    pub fn len(&self) -> usize {
        self.by_id.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_id.is_empty()
    }
}

impl EmbeddingProvider for PrecomputedEmbeddings {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, _text: &str) -> Result<Vec<f64>> {
        Err(Error::Invalid {
            what: "lookup",
            msg: "precomputed embeddings are keyed by pair id, not text".into(),
        })
    }

    fn embed_pair(&self, pair: &ParallelPair) -> Result<(Vec<f64>, Vec<f64>)> {
        self.by_id
            .get(&pair.id)
            .cloned()
            .ok_or_else(|| Error::Pair {
                id: pair.id,
                msg: "no precomputed vector for this pair".into(),
            })
    }
}
