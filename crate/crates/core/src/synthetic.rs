//! Synthetic "bilingual" tasks with exact ground truth: each source sentence
//! is uniform random words over a small vocabulary and the target is a
//! deterministic, bijective transform of it. Bijectivity makes the reverse
//! direction well-defined, so directional training effects can be measured
//! exactly. Languages are named `srcl` and `tgtl`.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Direction, ParallelPair};
use crate::error::{Error, Result};

/// Mixes the cipher permutation stream away from the sentence stream.
const CIPHER_SEED_SALT: u64 = 0xC1F3_0000_5EED_0001;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyntheticTask {
    /// Bijective word-for-word substitution from a seeded permutation.
    SubstitutionCipher,
    /// Word order reversed.
    WordReversal,
    /// Substitution followed by reversal (the two commute).
    CipherPlusReversal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTaskSpec {
    pub task: SyntheticTask,
    pub vocab: Vec<String>,
    pub sentence_len_range: (usize, usize),
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        SyntheticTaskSpec {
            task: SyntheticTask::CipherPlusReversal,
            vocab: cv_vocab(32),
            sentence_len_range: (3, 8),
            n_train: 20_000,
            n_val: 500,
            n_test: 500,
            seed: 0,
        }
    }
}

/// First `n` consonant-vowel two-letter words in a fixed order ("ba", "be",
/// ...). Multi-byte words keep the byte tokenizer honest: no single token
/// identifies a word.
pub fn cv_vocab(n: usize) -> Vec<String> {
    const CONSONANTS: [char; 16] = [
        'b', 'd', 'f', 'g', 'h', 'k', 'l', 'm', 'n', 'p', 'r', 's', 't', 'v', 'w', 'z',
    ];
    const VOWELS: [char; 5] = ['a', 'e', 'i', 'o', 'u'];
    assert!(n <= CONSONANTS.len() * VOWELS.len(), "at most 80 cv words");
    let mut words = Vec::with_capacity(n);
    'outer: for c in CONSONANTS {
        for v in VOWELS {
            if words.len() == n {
                break 'outer;
            }
            words.push(format!("{c}{v}"));
        }
    }
    words
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab.len() < 8 {
            return Err(Error::Config(format!(
                "vocabulary of {} words, need at least 8",
                self.vocab.len()
            )));
        }
        let unique: HashSet<&str> = self.vocab.iter().map(String::as_str).collect();
        if unique.len() != self.vocab.len() {
            return Err(Error::Config("vocabulary contains duplicate words".into()));
        }
        for w in &self.vocab {
            if w.is_empty() || w.contains(char::is_whitespace) {
                return Err(Error::Config(format!(
                    "word {w:?} is empty or contains whitespace"
                )));
            }
        }
        let (min, max) = self.sentence_len_range;
        if min < 1 || max < min {
            return Err(Error::Config(format!(
                "sentence length range ({min}, {max}) invalid"
            )));
        }
        for (name, n) in [("n_train", self.n_train), ("n_val", self.n_val), ("n_test", self.n_test)] {
            if n < 1 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    /// Number of distinct sentences the spec can express, saturating.
    fn sentence_space(&self) -> f64 {
        let v = self.vocab.len() as f64;
        let (min, max) = self.sentence_len_range;
        (min..=max).map(|len| v.powi(len as i32)).sum()
    }

    pub fn direction() -> Direction {
        Direction::from_codes("srcl", "tgtl").expect("static codes")
    }

    /// The word substitution this spec's seed induces (identity for pure
    /// reversal). Exposed so tests and tools can verify targets independently.
    pub fn substitution(&self) -> Vec<(String, String)> {
        let mut image: Vec<usize> = (0..self.vocab.len()).collect();
        if matches!(
            self.task,
            SyntheticTask::SubstitutionCipher | SyntheticTask::CipherPlusReversal
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ CIPHER_SEED_SALT);
            image.shuffle(&mut rng);
        }
        (0..self.vocab.len())
            .map(|i| (self.vocab[i].clone(), self.vocab[image[i]].clone()))
            .collect()
    }
}

/// The three seed-disjoint splits of one generated task.
#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

fn transform(task: SyntheticTask, words: &[usize], image: &[usize]) -> Vec<usize> {
    match task {
        SyntheticTask::SubstitutionCipher => words.iter().map(|&w| image[w]).collect(),
        SyntheticTask::WordReversal => words.iter().rev().copied().collect(),
        SyntheticTask::CipherPlusReversal => words.iter().rev().map(|&w| image[w]).collect(),
    }
}

/// Generates disjoint train/val/test corpora for the spec. Source sentences
/// are sampled without repetition, so no sentence appears in two splits.
pub fn generate(spec: &SyntheticTaskSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let total = spec.n_train + spec.n_val + spec.n_test;
    // Rejection sampling needs headroom; cap at half the sentence space.
    if (total as f64) > 0.5 * spec.sentence_space() {
        return Err(Error::Config(format!(
            "{total} sentences requested from a space of about {:.0}",
            spec.sentence_space()
        )));
    }
    let image: Vec<usize> = {
        let pairs = spec.substitution();
        let index: std::collections::HashMap<&str, usize> = spec
            .vocab
            .iter()
            .enumerate()
            .map(|(i, w)| (w.as_str(), i))
            .collect();
        pairs.iter().map(|(_, tgt)| index[tgt.as_str()]).collect()
    };

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (min, max) = spec.sentence_len_range;
    let mut seen: HashSet<Vec<usize>> = HashSet::with_capacity(total);
    let mut sentences: Vec<Vec<usize>> = Vec::with_capacity(total);
    while sentences.len() < total {
        let len = rng.gen_range(min..=max);
        let words: Vec<usize> = (0..len).map(|_| rng.gen_range(0..spec.vocab.len())).collect();
        if seen.insert(words.clone()) {
            sentences.push(words);
        }
    }

    let render = |words: &[usize]| -> String {
        words
            .iter()
            .map(|&w| spec.vocab[w].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    };
    let direction = SyntheticTaskSpec::direction();
    let make_split = |range: std::ops::Range<usize>| -> Result<Corpus> {
        let pairs = sentences[range]
            .iter()
            .enumerate()
            .map(|(i, words)| {
                ParallelPair::new(
                    i as u64,
                    render(words),
                    render(&transform(spec.task, words, &image)),
                    direction.clone(),
                    None,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Corpus::new(direction.clone(), pairs)
    };
    let train = make_split(0..spec.n_train)?;
    let val = make_split(spec.n_train..spec.n_train + spec.n_val)?;
    let test = make_split(spec.n_train + spec.n_val..total)?;
    Ok(SyntheticData { train, val, test })
}

/// Swaps source and target (texts and direction) for every pair.
pub fn invert_direction(corpus: &Corpus) -> Corpus {
    let direction = corpus.direction().reversed();
    let pairs = corpus
        .iter()
        .map(|p| {
            ParallelPair::new(
                p.id,
                p.target_text.clone(),
                p.source_text.clone(),
                direction.clone(),
                p.similarity,
            )
            .expect("swapped pair stays valid")
        })
        .collect();
    Corpus::new(direction, pairs).expect("swapped corpus stays valid")
}
