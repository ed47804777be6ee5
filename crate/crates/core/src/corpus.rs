//! Parallel-corpus model and line-delimited JSON persistence.
//!
//! A pair file is UTF-8, one JSON object per line:
//! `{"id": 7, "src": "...", "tgt": "...", "src_lang": "en", "tgt_lang": "ja", "sim": 0.83}`
//! where `id` and `sim` are optional.

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Language tag: non-empty, lowercase ASCII letters and digits only.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct LanguageCode(String);

impl LanguageCode {
    pub fn new(code: impl Into<String>) -> Result<Self> {
        let code = code.into();
        let ok = !code.is_empty()
            && code
                .bytes()
                .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit());
        if !ok {
            return Err(Error::Invalid {
                what: "language code",
                msg: format!("{code:?} (want non-empty lowercase ASCII letters/digits)"),
            });
        }
        Ok(LanguageCode(code))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LanguageCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for LanguageCode {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        LanguageCode::new(s)
    }
}

impl From<LanguageCode> for String {
    fn from(c: LanguageCode) -> String {
        c.0
    }
}

/// Translation direction. Source and target always differ.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "DirectionWire", into = "DirectionWire")]
pub struct Direction {
    source: LanguageCode,
    target: LanguageCode,
}

#[derive(Serialize, Deserialize)]
struct DirectionWire {
    source: LanguageCode,
    target: LanguageCode,
}

impl TryFrom<DirectionWire> for Direction {
    type Error = Error;
    fn try_from(w: DirectionWire) -> Result<Self> {
        Direction::new(w.source, w.target)
    }
}

impl From<Direction> for DirectionWire {
    fn from(d: Direction) -> DirectionWire {
        DirectionWire {
            source: d.source,
            target: d.target,
        }
    }
}

impl Direction {
    pub fn new(source: LanguageCode, target: LanguageCode) -> Result<Self> {
        if source == target {
            return Err(Error::Invalid {
                what: "direction",
                msg: format!("source and target are both {source:?}"),
            });
        }
        Ok(Direction { source, target })
    }

    /// Convenience constructor from raw code strings.
    pub fn from_codes(source: &str, target: &str) -> Result<Self> {
        Direction::new(LanguageCode::new(source)?, LanguageCode::new(target)?)
    }

    pub fn source(&self) -> &LanguageCode {
        &self.source
    }

    pub fn target(&self) -> &LanguageCode {
        &self.target
    }

    pub fn reversed(&self) -> Direction {
        Direction {
            source: self.target.clone(),
            target: self.source.clone(),
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.source, self.target)
    }
}

/// One aligned sentence pair, optionally carrying a similarity score.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelPair {
    pub id: u64,
    pub source_text: String,
    pub target_text: String,
    pub direction: Direction,
    /// Cosine similarity of the two sides' embeddings, when scored.
    pub similarity: Option<f64>,
}

impl ParallelPair {
    /// Validating constructor: texts must be non-empty after trimming and any
    /// similarity must lie in [-1, 1].
    pub fn new(
        id: u64,
        source_text: impl Into<String>,
        target_text: impl Into<String>,
        direction: Direction,
        similarity: Option<f64>,
    ) -> Result<Self> {
        let source_text = source_text.into();
        let target_text = target_text.into();
        if source_text.trim().is_empty() || target_text.trim().is_empty() {
            return Err(Error::Pair {
                id,
                msg: "empty source or target text".into(),
            });
        }
        if let Some(s) = similarity {
            if !(-1.0..=1.0).contains(&s) || s.is_nan() {
                return Err(Error::Pair {
                    id,
                    msg: format!("similarity {s} outside [-1, 1]"),
                });
            }
        }
        Ok(ParallelPair {
            id,
            source_text,
            target_text,
            direction,
            similarity,
        })
    }
}

/// An ordered pair collection sharing one direction, with unique ids.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    direction: Direction,
    pairs: Vec<ParallelPair>,
}

impl Corpus {
    pub fn new(direction: Direction, pairs: Vec<ParallelPair>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(pairs.len());
        for p in &pairs {
            if p.direction != direction {
                return Err(Error::Pair {
                    id: p.id,
                    msg: format!("direction {} does not match corpus {}", p.direction, direction),
                });
            }
            if !seen.insert(p.id) {
                return Err(Error::Pair {
                    id: p.id,
                    msg: "duplicate pair id".into(),
                });
            }
        }
        Ok(Corpus { direction, pairs })
    }

    pub fn direction(&self) -> &Direction {
        &self.direction
    }

    pub fn pairs(&self) -> &[ParallelPair] {
        &self.pairs
    }

    pub(crate) fn pairs_mut(&mut self) -> &mut [ParallelPair] {
        &mut self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ParallelPair> {
        self.pairs.iter()
    }

    pub fn into_pairs(self) -> Vec<ParallelPair> {
        self.pairs
    }
}

/// Wire form of one pair-file line. Field order is the serialization order.
#[derive(Serialize, Deserialize)]
struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    id: Option<u64>,
    src: String,
    tgt: String,
    src_lang: String,
    tgt_lang: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sim: Option<f64>,
}

/// Trims serde_json's positional suffix; we report our own line numbers.
fn json_msg(e: &serde_json::Error) -> String {
    let s = e.to_string();
    match s.find(" at line ") {
        Some(i) => s[..i].to_string(),
        None => s,
    }
}

fn record_to_pair(rec: Record, fallback_id: u64, line: usize) -> Result<ParallelPair> {
    let wrap = |e: Error| Error::Parse {
        line,
        msg: e.to_string(),
    };
    let direction = Direction::new(
        LanguageCode::new(rec.src_lang).map_err(wrap)?,
        LanguageCode::new(rec.tgt_lang).map_err(wrap)?,
    )
    .map_err(wrap)?;
    ParallelPair::new(
        rec.id.unwrap_or(fallback_id),
        rec.src,
        rec.tgt,
        direction,
        rec.sim,
    )
    .map_err(wrap)
}

fn load_records(path: &Path) -> Result<Vec<ParallelPair>> {
    let file = File::open(path).map_err(Error::io(path))?;
    let reader = BufReader::new(file);
    let mut pairs = Vec::new();
    let mut n_records = 0u64;
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: json_msg(&e),
        })?;
        pairs.push(record_to_pair(rec, n_records, line_no)?);
        n_records += 1;
    }
    Ok(pairs)
}

/// Loads a pair file, requiring every record to match `direction`.
/// Records without an `id` get sequential ids from 0 (in record order).
pub fn load_pairs(path: &Path, direction: &Direction) -> Result<Corpus> {
    let pairs = load_records(path)?;
    for p in &pairs {
        if p.direction != *direction {
            return Err(Error::Pair {
                id: p.id,
                msg: format!("direction {} does not match expected {}", p.direction, direction),
            });
        }
    }
    Corpus::new(direction.clone(), pairs)
}

/// Loads a pair file, inferring the direction from the first record and
/// requiring the rest to agree.
pub fn load_pairs_auto(path: &Path) -> Result<Corpus> {
    let pairs = load_records(path)?;
    let direction = match pairs.first() {
        Some(p) => p.direction.clone(),
        None => {
            return Err(Error::file(path, "empty pair file: cannot infer direction"));
        }
    };
    Corpus::new(direction, pairs)
}

/// Writes a corpus as one JSON record per line. Ids are always written;
/// `sim` is written only when present.
pub fn save_pairs(corpus: &Corpus, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    for p in corpus.iter() {
        let rec = Record {
            id: Some(p.id),
            src: p.source_text.clone(),
            tgt: p.target_text.clone(),
            src_lang: p.direction.source().as_str().to_string(),
            tgt_lang: p.direction.target().as_str().to_string(),
            sim: p.similarity,
        };
        let line = serde_json::to_string(&rec).expect("pair record serializes");
        w.write_all(line.as_bytes()).map_err(Error::io(path))?;
        w.write_all(b"\n").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}
