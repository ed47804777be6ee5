//! Pretraining-document construction: ordering schemes crossed with marker formats.
//!
//! A corpus is turned into a list of [`CptDocument`]s. The ordering scheme decides
//! which direction each pair contributes (monolingual, one direction, or a
//! deterministic half-and-half mix); the marker format decides how a pair is
//! rendered into text (plain interleaving, a direction prefix, a target-language
//! tag, or a JSON wrapper).
//!
//! Document files are UTF-8, one JSON object per line:
//! `{"text": "...", "direction": {"source": "en", "target": "ja"}, "origin_id": 7}`
//! with `direction` omitted for monolingual documents.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Direction, ParallelPair};
use crate::error::{Error, Result};

/// Which side(s) of the pair collection enter the document stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum OrderingScheme {
    /// All source sentences (in order), then all target sentences, each its own document.
    Mono,
    /// Every pair rendered in one fixed direction.
    SingleDirection(Direction),
    /// A disjoint index split: `ceil(fraction * n)` pairs rendered forward, the
    /// complement rendered backward, shuffled deterministically by `seed`.
    Mix { fraction: f64, seed: u64 },
}

/// How one pair becomes document text. Map keys are the rendered direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MarkerFormat {
    /// `src` + separator + `tgt`, no marker.
    Interleaved,
    /// A per-direction instruction prefix before the source.
    Prefixed(#[serde(with = "direction_keys")] BTreeMap<Direction, String>),
    /// A per-direction target-language tag (for example `<2ja>`) before the source.
    Tagged(#[serde(with = "direction_keys")] BTreeMap<Direction, String>),
    /// A single-line JSON object; values are the two texts, keys are the
    /// per-direction (source-name, target-name) strings.
    JsonWrapped(#[serde(with = "direction_keys")] BTreeMap<Direction, (String, String)>),
}

/// (De)serializes direction-keyed maps with `src-tgt` string keys, since JSON
/// map keys must be strings. Language codes never contain `-`, so the split
/// is unambiguous.
mod direction_keys {
    use std::collections::BTreeMap;

    use serde::de::Error as DeError;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use crate::corpus::Direction;

    pub fn serialize<V, S>(map: &BTreeMap<Direction, V>, ser: S) -> Result<S::Ok, S::Error>
    where
        V: Serialize,
        S: Serializer,
    {
        ser.collect_map(map.iter().map(|(d, v)| (d.to_string(), v)))
    }

    pub fn deserialize<'de, V, D>(de: D) -> Result<BTreeMap<Direction, V>, D::Error>
    where
        V: Deserialize<'de>,
        D: Deserializer<'de>,
    {
        let raw = BTreeMap::<String, V>::deserialize(de)?;
        raw.into_iter()
            .map(|(k, v)| {
                let (src, tgt) = k
                    .split_once('-')
                    .ok_or_else(|| D::Error::custom(format!("direction key {k:?} has no `-`")))?;
                let dir = Direction::from_codes(src, tgt).map_err(D::Error::custom)?;
                Ok((dir, v))
            })
            .collect()
    }
}

fn en_ja() -> Direction {
    Direction::from_codes("en", "ja").expect("static codes are valid")
}

impl MarkerFormat {
    /// Stock instruction prefixes for en->ja and ja->en; the reverse-direction
    /// instruction is written in Japanese, matching the convention that the
    /// marker speaks the source sentence's language.
    pub fn prefixed_en_ja() -> Self {
        let mut map = BTreeMap::new();
        map.insert(en_ja(), "translate to Japanese:".to_string());
        map.insert(en_ja().reversed(), "英語に翻訳してください:".to_string());
        MarkerFormat::Prefixed(map)
    }

    /// Code-derived prefixes (`translate to {target}:`) for arbitrary directions.
    pub fn prefixed_for(directions: &[Direction]) -> Self {
        let map = directions
            .iter()
            .map(|d| (d.clone(), format!("translate to {}:", d.target())))
            .collect();
        MarkerFormat::Prefixed(map)
    }

    /// Target-language tags `<2{code}>` (so en->ja tags `<2ja>`).
    pub fn tagged_for(directions: &[Direction]) -> Self {
        let map = directions
            .iter()
            .map(|d| (d.clone(), format!("<2{}>", d.target())))
            .collect();
        MarkerFormat::Tagged(map)
    }

    /// Stock JSON key names for en->ja and ja->en: keys are language names
    /// written in the source sentence's language.
    pub fn json_en_ja() -> Self {
        let mut map = BTreeMap::new();
        map.insert(en_ja(), ("English".to_string(), "Japanese".to_string()));
        map.insert(
            en_ja().reversed(),
            ("日本語".to_string(), "英語".to_string()),
        );
        MarkerFormat::JsonWrapped(map)
    }

    /// JSON key names from the raw language codes, for arbitrary directions.
    pub fn json_for(directions: &[Direction]) -> Self {
        let map = directions
            .iter()
            .map(|d| {
                (
                    d.clone(),
                    (d.source().as_str().to_string(), d.target().as_str().to_string()),
                )
            })
            .collect();
        MarkerFormat::JsonWrapped(map)
    }

    /// Stock en/ja strings when every direction is between en and ja,
    /// code-derived strings otherwise. `Interleaved` needs no table.
    pub fn auto(kind: MarkerKind, directions: &[Direction]) -> Self {
        let all_en_ja = directions
            .iter()
            .all(|d| *d == en_ja() || *d == en_ja().reversed());
        match kind {
            MarkerKind::Interleaved => MarkerFormat::Interleaved,
            MarkerKind::Prefixed if all_en_ja => Self::prefixed_en_ja(),
            MarkerKind::Prefixed => Self::prefixed_for(directions),
            MarkerKind::Tagged => Self::tagged_for(directions),
            MarkerKind::JsonWrapped if all_en_ja => Self::json_en_ja(),
            MarkerKind::JsonWrapped => Self::json_for(directions),
        }
    }

    pub fn kind(&self) -> MarkerKind {
        match self {
            MarkerFormat::Interleaved => MarkerKind::Interleaved,
            MarkerFormat::Prefixed(_) => MarkerKind::Prefixed,
            MarkerFormat::Tagged(_) => MarkerKind::Tagged,
            MarkerFormat::JsonWrapped(_) => MarkerKind::JsonWrapped,
        }
    }
}

/// Marker family without its per-direction tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerKind {
    Interleaved,
    Prefixed,
    Tagged,
    JsonWrapped,
}

impl MarkerKind {
    pub fn name(&self) -> &'static str {
        match self {
            MarkerKind::Interleaved => "interleaved",
            MarkerKind::Prefixed => "prefixed",
            MarkerKind::Tagged => "tagged",
            MarkerKind::JsonWrapped => "json",
        }
    }
}

/// A complete document-construction recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FormatSpec {
    pub ordering: OrderingScheme,
    pub marker: MarkerFormat,
    /// Text joining marker/source/target segments (ignored by `JsonWrapped`).
    pub separator: String,
}

impl FormatSpec {
    /// Validates the combination: `Mono` is only meaningful without markers,
    /// and a `Mix` fraction must lie in (0, 1].
    pub fn new(ordering: OrderingScheme, marker: MarkerFormat, separator: impl Into<String>) -> Result<Self> {
        if matches!(ordering, OrderingScheme::Mono) && marker != MarkerFormat::Interleaved {
            return Err(Error::Config(
                "Mono ordering emits single sentences and admits no marker; use Interleaved".into(),
            ));
        }
        if let OrderingScheme::Mix { fraction, .. } = ordering {
            if !(fraction > 0.0 && fraction <= 1.0) {
                return Err(Error::Config(format!(
                    "mix fraction {fraction} outside (0, 1]"
                )));
            }
        }
        Ok(FormatSpec {
            ordering,
            marker,
            separator: separator.into(),
        })
    }

    /// Single-ASCII-space separator.
    pub fn with_default_separator(ordering: OrderingScheme, marker: MarkerFormat) -> Result<Self> {
        FormatSpec::new(ordering, marker, " ")
    }
}

/// One pretraining document with its provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CptDocument {
    pub text: String,
    /// Rendered direction; `None` for monolingual documents.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub direction: Option<Direction>,
    /// Id of the pair this document came from.
    pub origin_id: u64,
}

fn marker_lookup<'a, T>(map: &'a BTreeMap<Direction, T>, direction: &Direction) -> Result<&'a T> {
    map.get(direction).ok_or_else(|| Error::Config(format!(
        "marker format has no entry for direction {direction}"
    )))
}

fn json_escape(s: &str) -> String {
    serde_json::to_string(s).expect("strings always serialize")
}

/// Renders one pair in its own direction under `marker`.
pub fn format_pair(pair: &ParallelPair, marker: &MarkerFormat, separator: &str) -> Result<CptDocument> {
    let dir = &pair.direction;
    let text = match marker {
        MarkerFormat::Interleaved => {
            format!("{}{separator}{}", pair.source_text, pair.target_text)
        }
        MarkerFormat::Prefixed(map) => {
            let prefix = marker_lookup(map, dir)?;
            format!("{prefix}{separator}{}{separator}{}", pair.source_text, pair.target_text)
        }
        MarkerFormat::Tagged(map) => {
            let tag = marker_lookup(map, dir)?;
            format!("{tag}{separator}{}{separator}{}", pair.source_text, pair.target_text)
        }
        MarkerFormat::JsonWrapped(map) => {
            let (src_name, tgt_name) = marker_lookup(map, dir)?;
            format!(
                "{{{}: {}, {}: {}}}",
                json_escape(src_name),
                json_escape(&pair.source_text),
                json_escape(tgt_name),
                json_escape(&pair.target_text)
            )
        }
    };
    Ok(CptDocument {
        text,
        direction: Some(dir.clone()),
        origin_id: pair.id,
    })
}

/// Builds the CPT document list for `spec`.
///
/// `corpus_ab` and `corpus_ba` are the same pair collection rendered in the two
/// directions: pair `i` of one must correspond to pair `i` of the other (the
/// builder checks direction and length consistency; text correspondence is the
/// caller's contract). `Mono` and `SingleDirection` touch only the corpus they
/// need; `Mix` samples a disjoint index split covering all pairs.
pub fn build_cpt_corpus(
    corpus_ab: &Corpus,
    corpus_ba: &Corpus,
    spec: &FormatSpec,
) -> Result<Vec<CptDocument>> {
    match &spec.ordering {
        OrderingScheme::Mono => {
            let mut docs = Vec::with_capacity(corpus_ab.len() * 2);
            for pair in corpus_ab.iter() {
                docs.push(CptDocument {
                    text: pair.source_text.clone(),
                    direction: None,
                    origin_id: pair.id,
                });
            }
            for pair in corpus_ab.iter() {
                docs.push(CptDocument {
                    text: pair.target_text.clone(),
                    direction: None,
                    origin_id: pair.id,
                });
            }
            Ok(docs)
        }
        OrderingScheme::SingleDirection(dir) => {
            let corpus = if corpus_ab.direction() == dir {
                corpus_ab
            } else if corpus_ba.direction() == dir {
                corpus_ba
            } else {
                return Err(Error::Config(format!(
                    "neither corpus has direction {dir} (got {} and {})",
                    corpus_ab.direction(),
                    corpus_ba.direction()
                )));
            };
            corpus
                .iter()
                .map(|p| format_pair(p, &spec.marker, &spec.separator))
                .collect()
        }
        OrderingScheme::Mix { fraction, seed } => {
            if *corpus_ba.direction() != corpus_ab.direction().reversed() {
                return Err(Error::Config(format!(
                    "mix needs opposite directions, got {} and {}",
                    corpus_ab.direction(),
                    corpus_ba.direction()
                )));
            }
            let n = corpus_ab.len();
            if corpus_ba.len() != n {
                return Err(Error::Config(format!(
                    "mix needs equally sized corpora (a disjoint split is impossible): {} vs {}",
                    n,
                    corpus_ba.len()
                )));
            }
            if n == 0 {
                return Ok(Vec::new());
            }
            let k = (fraction * n as f64).ceil() as usize;
            let k = k.min(n);
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let forward = rand::seq::index::sample(&mut rng, n, k);
            let mut is_forward = vec![false; n];
            for i in forward.iter() {
                is_forward[i] = true;
            }
            let mut docs = Vec::with_capacity(n);
            for (i, fwd) in is_forward.iter().enumerate() {
                let pair = if *fwd {
                    &corpus_ab.pairs()[i]
                } else {
                    &corpus_ba.pairs()[i]
                };
                docs.push(format_pair(pair, &spec.marker, &spec.separator)?);
            }
            docs.shuffle(&mut rng);
            Ok(docs)
        }
    }
}

/// Appends `ceil(replay_fraction * primary.len())` documents sampled from
/// `replay` (without replacement; with replacement when `replay` is smaller
/// than needed) and shuffles the combined list deterministically by `seed`.
pub fn replay_mix(
    primary: &[CptDocument],
    replay: &[CptDocument],
    replay_fraction: f64,
    seed: u64,
) -> Result<Vec<CptDocument>> {
    if !(replay_fraction.is_finite() && replay_fraction >= 0.0) {
        return Err(Error::Config(format!(
            "replay fraction {replay_fraction} must be a finite non-negative number"
        )));
    }
    let k = (replay_fraction * primary.len() as f64).ceil() as usize;
    if k > 0 && replay.is_empty() {
        return Err(Error::Config(
            "replay requested but the replay document list is empty".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<CptDocument> = primary.to_vec();
    if k > 0 {
        if k <= replay.len() {
            for i in rand::seq::index::sample(&mut rng, replay.len(), k).iter() {
                out.push(replay[i].clone());
            }
        } else {
            use rand::Rng;
            for _ in 0..k {
                out.push(replay[rng.gen_range(0..replay.len())].clone());
            }
        }
    }
    out.shuffle(&mut rng);
    Ok(out)
}

/// Writes documents as one JSON object per line.
pub fn save_documents(docs: &[CptDocument], path: &Path) -> Result<()> {
    let file = File::create(path).map_err(Error::io(path))?;
    let mut w = BufWriter::new(file);
    for doc in docs {
        let line = serde_json::to_string(doc).expect("document serializes");
        w.write_all(line.as_bytes()).map_err(Error::io(path))?;
        w.write_all(b"\n").map_err(Error::io(path))?;
    }
    w.flush().map_err(Error::io(path))
}

/// Reads a document file written by [`save_documents`].
pub fn load_documents(path: &Path) -> Result<Vec<CptDocument>> {
    let file = File::open(path).map_err(Error::io(path))?;
    let mut docs = Vec::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(Error::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let doc: CptDocument = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: idx + 1,
            msg: e.to_string(),
        })?;
        docs.push(doc);
    }
    Ok(docs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LanguageCode;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn pair(id: u64, src: &str, tgt: &str, dir: Direction) -> ParallelPair {
        ParallelPair::new(id, src, tgt, dir, None).unwrap()
    }

    fn pair_en_ja(id: u64, src: &str, tgt: &str) -> ParallelPair {
        pair(id, src, tgt, en_ja())
    }

    fn two_sided(n: usize) -> (Corpus, Corpus) {
        let ab: Vec<ParallelPair> = (0..n)
            .map(|i| pair_en_ja(i as u64, &format!("src{i}"), &format!("tgt{i}")))
            .collect();
        let ba: Vec<ParallelPair> = ab
            .iter()
            .map(|p| {
                pair(
                    p.id,
                    &p.target_text,
                    &p.source_text,
                    en_ja().reversed(),
                )
            })
            .collect();
        (
            Corpus::new(en_ja(), ab).unwrap(),
            Corpus::new(en_ja().reversed(), ba).unwrap(),
        )
    }

    #[test]
    fn interleaved_is_src_space_tgt() {
        let doc = format_pair(
            &pair_en_ja(0, "Good morning", "おはよう"),
            &MarkerFormat::Interleaved,
            " ",
        )
        .unwrap();
        assert_eq!(doc.text, "Good morning おはよう");
        assert_eq!(doc.origin_id, 0);
        assert_eq!(doc.direction, Some(en_ja()));
    }

    #[test]
    fn prefixed_uses_stock_strings_per_direction() {
        let marker = MarkerFormat::prefixed_en_ja();
        let doc = format_pair(&pair_en_ja(0, "Good morning", "おはよう"), &marker, " ").unwrap();
        assert_eq!(doc.text, "translate to Japanese: Good morning おはよう");

        let rev = pair(1, "おはよう", "Good morning", en_ja().reversed());
        let doc = format_pair(&rev, &marker, " ").unwrap();
        assert_eq!(doc.text, "英語に翻訳してください: おはよう Good morning");
    }

    #[test]
    fn tagged_names_the_target_language() {
        let marker = MarkerFormat::tagged_for(&[en_ja(), en_ja().reversed()]);
        let doc = format_pair(&pair_en_ja(0, "Good morning", "おはよう"), &marker, " ").unwrap();
        assert_eq!(doc.text, "<2ja> Good morning おはよう");
        let rev = pair(1, "おはよう", "Good morning", en_ja().reversed());
        assert_eq!(
            format_pair(&rev, &marker, " ").unwrap().text,
            "<2en> おはよう Good morning"
        );
    }

    #[test]
    fn json_wrapped_round_trips_and_orders_keys() {
        let marker = MarkerFormat::json_en_ja();
        let doc = format_pair(&pair_en_ja(0, "Good morning", "おはよう"), &marker, " ").unwrap();
        assert_eq!(doc.text, r#"{"English": "Good morning", "Japanese": "おはよう"}"#);

        let rev = pair(1, "おはよう \"引用\"", "Good \\ morning", en_ja().reversed());
        let doc = format_pair(&rev, &marker, " ").unwrap();
        let v: serde_json::Value = serde_json::from_str(&doc.text).unwrap();
        assert_eq!(v["日本語"], "おはよう \"引用\"");
        assert_eq!(v["英語"], "Good \\ morning");
        // Source-language key comes first on the line.
        assert!(doc.text.starts_with("{\"日本語\""));
    }

    #[test]
    fn missing_marker_entry_is_an_error() {
        let marker = MarkerFormat::tagged_for(&[en_ja()]);
        let rev = pair(0, "x", "y", en_ja().reversed());
        assert!(format_pair(&rev, &marker, " ").is_err());
    }

    #[test]
    fn mono_emits_sources_then_targets() {
        let (ab, ba) = two_sided(2);
        let spec = FormatSpec::with_default_separator(OrderingScheme::Mono, MarkerFormat::Interleaved)
            .unwrap();
        let docs = build_cpt_corpus(&ab, &ba, &spec).unwrap();
        let texts: Vec<&str> = docs.iter().map(|d| d.text.as_str()).collect();
        assert_eq!(texts, vec!["src0", "src1", "tgt0", "tgt1"]);
        assert!(docs.iter().all(|d| d.direction.is_none()));
    }

    #[test]
    fn mono_rejects_markers() {
        assert!(FormatSpec::with_default_separator(
            OrderingScheme::Mono,
            MarkerFormat::tagged_for(&[en_ja()])
        )
        .is_err());
    }

    #[test]
    fn single_direction_picks_the_matching_corpus() {
        let (ab, ba) = two_sided(3);
        let spec = FormatSpec::with_default_separator(
            OrderingScheme::SingleDirection(en_ja().reversed()),
            MarkerFormat::Interleaved,
        )
        .unwrap();
        let docs = build_cpt_corpus(&ab, &ba, &spec).unwrap();
        assert_eq!(docs[0].text, "tgt0 src0");
        assert_eq!(docs.len(), 3);

        let other = Direction::from_codes("fr", "de").unwrap();
        let spec = FormatSpec::with_default_separator(
            OrderingScheme::SingleDirection(other),
            MarkerFormat::Interleaved,
        )
        .unwrap();
        assert!(build_cpt_corpus(&ab, &ba, &spec).is_err());
    }

    #[test]
    fn mix_splits_disjointly_and_covers_everything() {
        let (ab, ba) = two_sided(4);
        let spec = FormatSpec::with_default_separator(
            OrderingScheme::Mix { fraction: 0.5, seed: 9 },
            MarkerFormat::Interleaved,
        )
        .unwrap();
        let docs = build_cpt_corpus(&ab, &ba, &spec).unwrap();
        assert_eq!(docs.len(), 4);
        let forward: HashSet<u64> = docs
            .iter()
            .filter(|d| d.direction.as_ref() == Some(&en_ja()))
            .map(|d| d.origin_id)
            .collect();
        let backward: HashSet<u64> = docs
            .iter()
            .filter(|d| d.direction.as_ref() == Some(&en_ja().reversed()))
            .map(|d| d.origin_id)
            .collect();
        assert_eq!(forward.len(), 2, "ceil(0.5 * 4) = 2 forward documents");
        assert!(forward.is_disjoint(&backward));
        let mut all: Vec<u64> = forward.union(&backward).copied().collect();
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn mix_is_deterministic_per_seed() {
        let (ab, ba) = two_sided(32);
        let spec = |seed| {
            FormatSpec::with_default_separator(
                OrderingScheme::Mix { fraction: 0.5, seed },
                MarkerFormat::Interleaved,
            )
            .unwrap()
        };
        let a = build_cpt_corpus(&ab, &ba, &spec(1)).unwrap();
        let b = build_cpt_corpus(&ab, &ba, &spec(1)).unwrap();
        let c = build_cpt_corpus(&ab, &ba, &spec(2)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn mix_rejects_unequal_corpora() {
        let (ab, _) = two_sided(3);
        let (_, ba) = two_sided(2);
        let spec = FormatSpec::with_default_separator(
            OrderingScheme::Mix { fraction: 0.5, seed: 0 },
            MarkerFormat::Interleaved,
        )
        .unwrap();
        assert!(build_cpt_corpus(&ab, &ba, &spec).is_err());
    }

    #[test]
    fn mix_fraction_must_be_in_unit_interval() {
        for bad in [0.0, -0.5, 1.5] {
            assert!(FormatSpec::with_default_separator(
                OrderingScheme::Mix { fraction: bad, seed: 0 },
                MarkerFormat::Interleaved,
            )
            .is_err());
        }
    }

    #[test]
    fn replay_mix_counts_and_determinism() {
        let (ab, ba) = two_sided(1000);
        let spec_ab = FormatSpec::with_default_separator(
            OrderingScheme::SingleDirection(en_ja()),
            MarkerFormat::Interleaved,
        )
        .unwrap();
        let spec_ba = FormatSpec::with_default_separator(
            OrderingScheme::SingleDirection(en_ja().reversed()),
            MarkerFormat::Interleaved,
        )
        .unwrap();
        let primary = build_cpt_corpus(&ba, &ba, &spec_ba).unwrap();
        let replay = build_cpt_corpus(&ab, &ab, &spec_ab).unwrap();
        let out = replay_mix(&primary, &replay, 0.01, 5).unwrap();
        assert_eq!(out.len(), 1010);
        let replayed = out
            .iter()
            .filter(|d| d.direction.as_ref() == Some(&en_ja()))
            .count();
        assert_eq!(replayed, 10);
        // Without replacement: replayed documents are distinct.
        let distinct: HashSet<(u64, &str)> = out
            .iter()
            .filter(|d| d.direction.as_ref() == Some(&en_ja()))
            .map(|d| (d.origin_id, d.text.as_str()))
            .collect();
        assert_eq!(distinct.len(), 10);
        assert_eq!(out, replay_mix(&primary, &replay, 0.01, 5).unwrap());
        assert_ne!(out, replay_mix(&primary, &replay, 0.01, 6).unwrap());
    }

    #[test]
    fn replay_mix_with_replacement_when_pool_is_small() {
        let (ab, ba) = two_sided(100);
        let spec_ab = FormatSpec::with_default_separator(
            OrderingScheme::SingleDirection(en_ja()),
            MarkerFormat::Interleaved,
        )
        .unwrap();
        let primary = build_cpt_corpus(&ab, &ba, &spec_ab).unwrap();
        let replay = primary[..3].to_vec();
        let out = replay_mix(&primary, &replay, 0.1, 7).unwrap();
        assert_eq!(out.len(), 110);
        assert!(replay_mix(&primary, &[], 0.1, 7).is_err());
        assert_eq!(replay_mix(&primary, &replay, 0.0, 7).unwrap().len(), 100);
    }

    #[test]
    fn document_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("docs.jsonl");
        let docs = vec![
            CptDocument {
                text: "<2ja> a b".into(),
                direction: Some(en_ja()),
                origin_id: 0,
            },
            CptDocument {
                text: "mono \"line\"".into(),
                direction: None,
                origin_id: 1,
            },
        ];
        save_documents(&docs, &path).unwrap();
        assert_eq!(load_documents(&path).unwrap(), docs);
    }

    fn text_strategy() -> impl Strategy<Value = String> {
        "\\PC{1,20}".prop_filter("non-blank", |s| !s.trim().is_empty())
    }

    proptest! {
        #[test]
        fn non_json_markers_contain_both_texts_verbatim(
            src in text_strategy(),
            tgt in text_strategy(),
        ) {
            let p = pair_en_ja(0, &src, &tgt);
            for marker in [
                MarkerFormat::Interleaved,
                MarkerFormat::prefixed_en_ja(),
                MarkerFormat::tagged_for(&[en_ja()]),
            ] {
                let doc = format_pair(&p, &marker, " ").unwrap();
                prop_assert!(doc.text.contains(&src));
                prop_assert!(doc.text.contains(&tgt));
            }
        }

        #[test]
        fn json_wrapped_parse_recovers_texts_exactly(
            src in text_strategy(),
            tgt in text_strategy(),
        ) {
            let p = pair_en_ja(0, &src, &tgt);
            let doc = format_pair(&p, &MarkerFormat::json_en_ja(), " ").unwrap();
            let v: serde_json::Value = serde_json::from_str(&doc.text).unwrap();
            prop_assert_eq!(v["English"].as_str().unwrap(), src.as_str());
            prop_assert_eq!(v["Japanese"].as_str().unwrap(), tgt.as_str());
        }

        #[test]
        fn mix_disjointness_holds_for_any_fraction(
            n in 1usize..64,
            fraction in 0.01f64..=1.0,
            seed in 0u64..1000,
        ) {
            let (ab, ba) = two_sided(n);
            let spec = FormatSpec::with_default_separator(
                OrderingScheme::Mix { fraction, seed },
                MarkerFormat::Interleaved,
            ).unwrap();
            let docs = build_cpt_corpus(&ab, &ba, &spec).unwrap();
            prop_assert_eq!(docs.len(), n);
            let forward: HashSet<u64> = docs
                .iter()
                .filter(|d| d.direction.as_ref() == Some(&en_ja()))
                .map(|d| d.origin_id)
                .collect();
            let expected = ((fraction * n as f64).ceil() as usize).min(n);
            prop_assert_eq!(forward.len(), expected);
            let ids: HashSet<u64> = docs.iter().map(|d| d.origin_id).collect();
            prop_assert_eq!(ids.len(), n);
        }
    }

    #[test]
    fn auto_marker_uses_stock_tables_for_en_ja() {
        let dirs = [en_ja(), en_ja().reversed()];
        match MarkerFormat::auto(MarkerKind::Prefixed, &dirs) {
            MarkerFormat::Prefixed(map) => {
                assert_eq!(map[&en_ja()], "translate to Japanese:");
            }
            other => panic!("unexpected marker {other:?}"),
        }
        let synth = [Direction::from_codes("srcl", "tgtl").unwrap()];
        match MarkerFormat::auto(MarkerKind::Tagged, &synth) {
            MarkerFormat::Tagged(map) => {
                assert_eq!(map[&synth[0]], "<2tgtl>");
            }
            other => panic!("unexpected marker {other:?}"),
        }
        let _ = LanguageCode::new("tgtl").unwrap();
    }

    #[test]
    fn format_spec_serializes_for_every_marker_kind() {
        let dirs = [en_ja(), en_ja().reversed()];
        for kind in [
            MarkerKind::Interleaved,
            MarkerKind::Prefixed,
            MarkerKind::Tagged,
            MarkerKind::JsonWrapped,
        ] {
            let spec = FormatSpec::with_default_separator(
                OrderingScheme::Mix { fraction: 0.5, seed: 3 },
                MarkerFormat::auto(kind, &dirs),
            )
            .unwrap();
            let json = serde_json::to_string(&spec).unwrap();
            let back: FormatSpec = serde_json::from_str(&json).unwrap();
            assert_eq!(back, spec);
        }
    }
}
