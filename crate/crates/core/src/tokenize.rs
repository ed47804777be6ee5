//! Tokenization, document-stream encoding, and fixed-window packing.
//!
//! Documents are encoded into one contiguous id stream, each document terminated
//! by `eos`. Packing slides a fixed window of `c` tokens in increments of `c`
//! (no overlap); every window carries its next-token targets, so a stream of
//! `m` tokens yields `floor((m - 1) / c)` windows and the underfull tail is
//! dropped. Window boundaries deliberately ignore document boundaries.
//!
//! Packed file layout (little-endian): magic `BFPK`, version u16, window length
//! u32, window count u64, then per window `c` input ids and `c` target ids,
//! each a u32.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::formats::CptDocument;

pub const PACKED_MAGIC: &[u8; 4] = b"BFPK";
pub const PACKED_VERSION: u16 = 1;

/// Text <-> token ids. Implementations must be deterministic.
pub trait Tokenizer: Send + Sync {
    fn vocab_size(&self) -> usize;
    fn bos_id(&self) -> Option<u32>;
    fn eos_id(&self) -> u32;
    fn pad_id(&self) -> Option<u32>;
    fn encode(&self, text: &str) -> Result<Vec<u32>>;
    /// Inverse of `encode` up to special ids, which are skipped.
    fn decode(&self, ids: &[u32]) -> Result<String>;
}

/// Lossless byte-level tokenizer: ids 0..=255 are raw bytes, 256 = bos,
/// 257 = eos, 258 = pad. `decode(encode(t)) == t` for every string; decoding
/// arbitrary generated ids replaces invalid UTF-8 lossily.
#[derive(Debug, Clone, Copy, Default)]
pub struct ByteTokenizer;

pub const BYTE_BOS: u32 = 256;
pub const BYTE_EOS: u32 = 257;
pub const BYTE_PAD: u32 = 258;
pub const BYTE_VOCAB_SIZE: usize = 259;

impl Tokenizer for ByteTokenizer {
    fn vocab_size(&self) -> usize {
        BYTE_VOCAB_SIZE
    }

    fn bos_id(&self) -> Option<u32> {
        Some(BYTE_BOS)
    }

    fn eos_id(&self) -> u32 {
        BYTE_EOS
    }

    fn pad_id(&self) -> Option<u32> {
        Some(BYTE_PAD)
    }

    fn encode(&self, text: &str) -> Result<Vec<u32>> {
        Ok(text.bytes().map(u32::from).collect())
    }

    fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            if id < 256 {
                bytes.push(id as u8);
            } else if id >= BYTE_VOCAB_SIZE as u32 {
                return Err(Error::Invalid {
                    what: "token id",
                    msg: format!("{id} out of byte-tokenizer range 0..{BYTE_VOCAB_SIZE}"),
                });
            }
        }
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }
}

/// Whitespace word tokenizer over a fixed vocabulary (one word per line in the
/// vocab file; bos/eos/pad get the three ids after the words). Unknown words
/// are an error. Decoding joins with single spaces, so it is lossless only for
/// canonically spaced text.
pub struct WordTokenizer {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl WordTokenizer {
    pub fn new(words: Vec<String>) -> Result<Self> {
        if words.is_empty() {
            return Err(Error::Invalid {
                what: "vocabulary",
                msg: "no words".into(),
            });
        }
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Invalid {
                    what: "vocabulary",
                    msg: format!("word {i} ({w:?}) is empty or contains whitespace"),
                });
            }
            if index.insert(w.clone(), i as u32).is_some() {
                return Err(Error::Invalid {
                    what: "vocabulary",
                    msg: format!("duplicate word {w:?}"),
                });
            }
        }
        Ok(WordTokenizer { words, index })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(Error::io(path))?;
        let mut words = Vec::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(Error::io(path))?;
            let word = line.trim();
            if !word.is_empty() {
                words.push(word.to_string());
            }
        }
        WordTokenizer::new(words)
    }

    fn n_words(&self) -> u32 {
        self.words.len() as u32
    }
}

impl Tokenizer for WordTokenizer {
    fn vocab_size(&self) -> usize {
        self.words.len() + 3
    }

    fn bos_id(&self) -> Option<u32> {
        Some(self.n_words())
    }

    fn eos_id(&self) -> u32 {
        self.n_words() + 1
    }

    fn pad_id(&self) -> Option<u32> {
        Some(self.n_words() + 2)
    }

    fn encode(&self, text: &str) -> Result<Vec<u32>> {
        text.split_whitespace()
            .map(|w| {
                self.index.get(w).copied().ok_or_else(|| Error::Invalid {
                    what: "word",
                    msg: format!("{w:?} not in vocabulary"),
                })
            })
            .collect()
    }

    fn decode(&self, ids: &[u32]) -> Result<String> {
        let mut words = Vec::with_capacity(ids.len());
        for &id in ids {
            if id < self.n_words() {
                words.push(self.words[id as usize].as_str());
            } else if id >= self.vocab_size() as u32 {
                return Err(Error::Invalid {
                    what: "token id",
                    msg: format!("{id} out of vocabulary range"),
                });
            }
        }
        Ok(words.join(" "))
    }
}

/// One contiguous token stream with the positions just past each document's eos.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenStream {
    pub ids: Vec<u32>,
    pub boundaries: Vec<usize>,
}

/// Encodes documents into one eos-terminated stream. Tokenizer failures name
/// the offending document's origin pair.
pub fn encode_stream(docs: &[CptDocument], tokenizer: &dyn Tokenizer) -> Result<TokenStream> {
    if docs.is_empty() {
        return Err(Error::Invalid {
            what: "document list",
            msg: "cannot encode an empty document list".into(),
        });
    }
    let mut ids = Vec::new();
    let mut boundaries = Vec::with_capacity(docs.len());
    for doc in docs {
        let mut encoded = tokenizer.encode(&doc.text).map_err(|e| Error::Document {
            origin_id: doc.origin_id,
            msg: e.to_string(),
        })?;
        ids.append(&mut encoded);
        ids.push(tokenizer.eos_id());
        boundaries.push(ids.len());
    }
    Ok(TokenStream { ids, boundaries })
}

/// One training window: `target_ids[i]` is the stream successor of `input_ids[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedWindow {
    pub input_ids: Vec<u32>,
    pub target_ids: Vec<u32>,
}

/// Packs the stream into non-overlapping windows of length `c` starting at
/// offsets 0, c, 2c, ...; an offset with fewer than `c + 1` tokens remaining is
/// dropped. A stream shorter than `c + 1` yields no windows (with a warning,
/// not an error).
pub fn pack_windows(stream: &TokenStream, c: usize) -> Result<Vec<PackedWindow>> {
    if c == 0 {
        return Err(Error::Config("window length must be at least 1".into()));
    }
    let m = stream.ids.len();
    let count = m.saturating_sub(1) / c;
    if count == 0 {
        log::warn!("stream of {m} tokens is shorter than c + 1 = {}; no windows", c + 1);
        return Ok(Vec::new());
    }
    let mut windows = Vec::with_capacity(count);
    for k in 0..count {
        let at = k * c;
        windows.push(PackedWindow {
            input_ids: stream.ids[at..at + c].to_vec(),
            target_ids: stream.ids[at + 1..at + c + 1].to_vec(),
        });
    }
    Ok(windows)
}

fn write_u32s(w: &mut impl Write, vals: &[u32], path: &Path) -> Result<()> {
    for &v in vals {
        w.write_all(&v.to_le_bytes()).map_err(Error::io(path))?;
    }
    Ok(())
}

fn read_exact_buf<const N: usize>(r: &mut impl Read, path: &Path) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf).map_err(Error::io(path))?;
    Ok(buf)
}

/// Writes windows in the packed binary format. Every window must have length `c`.
pub fn save_packed(windows: &[PackedWindow], c: u32, path: &Path) -> Result<()> {
    for (i, win) in windows.iter().enumerate() {
        if win.input_ids.len() != c as usize || win.target_ids.len() != c as usize {
            return Err(Error::Shape(format!(
                "window {i} has lengths {}/{}, expected {c}",
                win.input_ids.len(),
                win.target_ids.len()
            )));
        }
    }
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    w.write_all(PACKED_MAGIC).map_err(Error::io(path))?;
    w.write_all(&PACKED_VERSION.to_le_bytes()).map_err(Error::io(path))?;
    w.write_all(&c.to_le_bytes()).map_err(Error::io(path))?;
    w.write_all(&(windows.len() as u64).to_le_bytes())
        .map_err(Error::io(path))?;
    for win in windows {
        write_u32s(&mut w, &win.input_ids, path)?;
        write_u32s(&mut w, &win.target_ids, path)?;
    }
    w.flush().map_err(Error::io(path))
}

/// Reads a packed file, returning the window length and the windows.
pub fn load_packed(path: &Path) -> Result<(u32, Vec<PackedWindow>)> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut r = BufReader::new(file);
    let magic = read_exact_buf::<4>(&mut r, path)?;
    if &magic != PACKED_MAGIC {
        return Err(Error::file(path, format!("bad magic {magic:?}, want BFPK")));
    }
    let version = u16::from_le_bytes(read_exact_buf::<2>(&mut r, path)?);
    if version != PACKED_VERSION {
        return Err(Error::file(
            path,
            format!("unsupported version {version}, want {PACKED_VERSION}"),
        ));
    }
    let c = u32::from_le_bytes(read_exact_buf::<4>(&mut r, path)?);
    let count = u64::from_le_bytes(read_exact_buf::<8>(&mut r, path)?);
    if c == 0 {
        return Err(Error::file(path, "window length 0"));
    }
    let mut windows = Vec::with_capacity(count as usize);
    let mut raw = vec![0u8; c as usize * 4];
    for _ in 0..count {
        let mut win = PackedWindow {
            input_ids: Vec::with_capacity(c as usize),
            target_ids: Vec::with_capacity(c as usize),
        };
        for part in [&mut win.input_ids, &mut win.target_ids] {
            r.read_exact(&mut raw).map_err(Error::io(path))?;
            part.extend(raw.chunks_exact(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]])));
        }
        windows.push(win);
    }
    let mut rest = [0u8; 1];
    match r.read(&mut rest).map_err(Error::io(path))? {
        0 => Ok((c, windows)),
        _ => Err(Error::file(path, "trailing data after declared windows")),
    }
}
