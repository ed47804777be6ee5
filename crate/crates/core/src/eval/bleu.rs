//! Corpus-level BLEU: clipped n-gram precisions up to 4-grams pooled over the
//! whole corpus, times a brevity penalty. Zero-precision handling is strict
//! (score 0) by default; optional add-one smoothing raises n≥2 counts only.
//! Every report records the smoothing and pre-tokenizer that produced it.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_N: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PreTokenizer {
    /// Split on whitespace only (right choice for the synthetic word tasks).
    #[default]
    Whitespace,
    /// Split on whitespace and make each punctuation character its own token.
    Punct,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// Any zero precision zeroes the whole score.
    #[default]
    None,
    /// Add one to numerator and denominator of p₂..p₄ (never p₁) wherever the
    /// hypothesis has at least one n-gram.
    AddOne,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct BleuConfig {
    pub smoothing: Smoothing,
    pub pre_tokenizer: PreTokenizer,
}

/// The score plus everything needed to audit it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub score: f64,
    pub precisions: [f64; MAX_N],
    pub brevity_penalty: f64,
    pub hyp_len: u64,
    pub ref_len: u64,
    pub smoothing: Smoothing,
    pub pre_tokenizer: PreTokenizer,
}

pub(crate) fn tokenize(text: &str, pre: PreTokenizer) -> Vec<String> {
    match pre {
        PreTokenizer::Whitespace => text.split_whitespace().map(str::to_owned).collect(),
        PreTokenizer::Punct => {
            let mut tokens = Vec::new();
            let mut word = String::new();
            for ch in text.chars() {
                if ch.is_whitespace() {
                    if !word.is_empty() {
                        tokens.push(std::mem::take(&mut word));
                    }
                } else if ch.is_alphanumeric() {
                    word.push(ch);
                } else {
                    if !word.is_empty() {
                        tokens.push(std::mem::take(&mut word));
                    }
                    tokens.push(ch.to_string());
                }
            }
            if !word.is_empty() {
                tokens.push(word);
            }
            tokens
        }
    }
}

/// Pooled counting state of one or more sentence pairs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub(crate) struct BleuStats {
    /// Clipped n-gram matches, index 0 = unigrams.
    pub matches: [u64; MAX_N],
    /// Hypothesis n-gram totals.
    pub totals: [u64; MAX_N],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl BleuStats {
    pub fn add(&mut self, other: &BleuStats) {
        for n in 0..MAX_N {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts: HashMap<&[String], u64> = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_default() += 1;
        }
    }
    counts
}

pub(crate) fn sentence_stats(hyp: &str, reference: &str, pre: PreTokenizer) -> BleuStats {
    let hyp_tokens = tokenize(hyp, pre);
    let ref_tokens = tokenize(reference, pre);
    let mut stats = BleuStats {
        hyp_len: hyp_tokens.len() as u64,
        ref_len: ref_tokens.len() as u64,
        ..BleuStats::default()
    };
    for n in 1..=MAX_N {
        let hyp_counts = ngram_counts(&hyp_tokens, n);
        let ref_counts = ngram_counts(&ref_tokens, n);
        for (gram, &c) in &hyp_counts {
            stats.totals[n - 1] += c;
            let clip = ref_counts.get(gram).copied().unwrap_or(0);
            stats.matches[n - 1] += c.min(clip);
        }
    }
    stats
}

/// Score from pooled counts; shared by the corpus scorer and the bootstrap.
pub(crate) fn score_from_stats(stats: &BleuStats, cfg: BleuConfig) -> BleuReport {
    let mut precisions = [0.0; MAX_N];
    for n in 0..MAX_N {
        let (m, t) = (stats.matches[n], stats.totals[n]);
        precisions[n] = match cfg.smoothing {
            Smoothing::AddOne if n > 0 && t > 0 => (m + 1) as f64 / (t + 1) as f64,
            _ if t > 0 => m as f64 / t as f64,
            _ => 0.0,
        };
    }
    let brevity_penalty = if stats.hyp_len == 0 {
        0.0
    } else if stats.hyp_len < stats.ref_len {
        (1.0 - stats.ref_len as f64 / stats.hyp_len as f64).exp()
    } else {
        1.0
    };
    let score = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let mean_log = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_N as f64;
        100.0 * brevity_penalty * mean_log.exp()
    };
    BleuReport {
        score,
        precisions,
        brevity_penalty,
        hyp_len: stats.hyp_len,
        ref_len: stats.ref_len,
        smoothing: cfg.smoothing,
        pre_tokenizer: cfg.pre_tokenizer,
    }
}

/// Corpus BLEU of `hypotheses` against line-aligned `references`.
pub fn corpus_bleu(hypotheses: &[String], references: &[String], cfg: BleuConfig) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::Invalid {
            what: "evaluation corpus",
            msg: format!(
                "{} hypotheses against {} references",
                hypotheses.len(),
                references.len()
            ),
        });
    }
    if hypotheses.is_empty() {
        return Err(Error::Invalid {
            what: "evaluation corpus",
            msg: "no sentences".into(),
        });
    }
    let mut pooled = BleuStats::default();
    for (h, r) in hypotheses.iter().zip(references) {
        pooled.add(&sentence_stats(h, r, cfg.pre_tokenizer));
    }
    Ok(score_from_stats(&pooled, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn v(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn hand_derived_case_with_brevity_penalty() {
        // p1..p4 all 1, BP = exp(1 - 5/4).
        let report = corpus_bleu(&v(&["a b c d"]), &v(&["a b c d e"]), BleuConfig::default()).unwrap();
        assert_eq!(report.precisions, [1.0; 4]);
        assert_abs_diff_eq!(report.brevity_penalty, (-0.25f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(report.score, 100.0 * (-0.25f64).exp(), epsilon = 1e-9);
        assert!((report.score - 77.88).abs() < 0.01);
        assert_eq!((report.hyp_len, report.ref_len), (4, 5));
    }

    #[test]
    fn identity_scores_exactly_100() {
        let texts = v(&["the cat sat on the mat", "a b c d e", "one two three four"]);
        let report = corpus_bleu(&texts, &texts, BleuConfig::default()).unwrap();
        assert_eq!(report.score, 100.0);
        assert_eq!(report.brevity_penalty, 1.0);
    }

    #[test]
    fn no_shared_fourgram_scores_zero_strictly() {
        let report = corpus_bleu(
            &v(&["a b c x e f"]),
            &v(&["a b c d e f"]),
            BleuConfig::default(),
        )
        .unwrap();
        assert_eq!(report.score, 0.0);
        assert!(report.precisions[0] > 0.0, "unigrams still matched");
        assert_eq!(report.precisions[3], 0.0);
    }

    #[test]
    fn add_one_smoothing_rescues_zero_fourgrams_and_is_flagged() {
        let cfg = BleuConfig {
            smoothing: Smoothing::AddOne,
            ..BleuConfig::default()
        };
        let report = corpus_bleu(&v(&["a b c x e f"]), &v(&["a b c d e f"]), cfg).unwrap();
        assert!(report.score > 0.0);
        assert_eq!(report.smoothing, Smoothing::AddOne);
        // p4 = (0+1)/(3+1); p1 stays unsmoothed at 5/6.
        assert_abs_diff_eq!(report.precisions[3], 0.25, epsilon = 1e-12);
        assert_abs_diff_eq!(report.precisions[0], 5.0 / 6.0, epsilon = 1e-12);
    }

    #[test]
    fn clipping_caps_repeated_ngrams() {
        // "the the the the" vs "the cat": only 1 unigram match survives clipping.
        let report = corpus_bleu(&v(&["the the the the"]), &v(&["the cat"]), BleuConfig::default()).unwrap();
        assert_abs_diff_eq!(report.precisions[0], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn pooling_is_permutation_invariant() {
        let hyps = v(&["a b c d", "x y z w", "p q r s t"]);
        let refs = v(&["a b c d e", "x y z w", "p q r s"]);
        let a = corpus_bleu(&hyps, &refs, BleuConfig::default()).unwrap();
        let perm = [2usize, 0, 1];
        let hyps_p: Vec<String> = perm.iter().map(|&i| hyps[i].clone()).collect();
        let refs_p: Vec<String> = perm.iter().map(|&i| refs[i].clone()).collect();
        let b = corpus_bleu(&hyps_p, &refs_p, BleuConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_hypothesis_scores_zero_not_nan() {
        let report = corpus_bleu(&v(&[""]), &v(&["a b c"]), BleuConfig::default()).unwrap();
        assert_eq!(report.score, 0.0);
        assert_eq!(report.brevity_penalty, 0.0);
        assert!(report.score.is_finite());
    }

    #[test]
    fn length_mismatch_and_empty_corpus_are_rejected() {
        assert!(corpus_bleu(&v(&["a"]), &v(&["a", "b"]), BleuConfig::default()).is_err());
        assert!(corpus_bleu(&[], &[], BleuConfig::default()).is_err());
    }

    #[test]
    fn brevity_penalty_is_monotone_in_hyp_len() {
        // Same precisions, shrinking hypothesis length.
        let mut prev = f64::INFINITY;
        for hyp_len in (1..10).rev() {
            let stats = BleuStats {
                matches: [hyp_len; 4],
                totals: [hyp_len; 4],
                hyp_len,
                ref_len: 10,
            };
            let report = score_from_stats(&stats, BleuConfig::default());
            assert!(report.score < prev, "hyp_len {hyp_len} did not lower the score");
            prev = report.score;
        }
    }

    #[test]
    fn punct_pre_tokenizer_separates_punctuation() {
        assert_eq!(
            tokenize("Hello, world! 答え:42", PreTokenizer::Punct),
            vec!["Hello", ",", "world", "!", "答え", ":", "42"]
        );
        assert_eq!(
            tokenize("Hello, world!", PreTokenizer::Whitespace),
            vec!["Hello,", "world!"]
        );
        // Punctuation splitting changes the score for punctuated text.
        let cfg_punct = BleuConfig {
            pre_tokenizer: PreTokenizer::Punct,
            ..BleuConfig::default()
        };
        let hyp = v(&["a , b , c , d ."]);
        let r = v(&["a, b, c, d."]);
        let strict = corpus_bleu(&hyp, &r, BleuConfig::default()).unwrap();
        let punct = corpus_bleu(&hyp, &r, cfg_punct).unwrap();
        assert_eq!(strict.score, 0.0, "whitespace views tokens as different");
        assert_eq!(punct.score, 100.0, "punct tokenizer aligns them");
        assert_eq!(punct.pre_tokenizer, PreTokenizer::Punct);
    }
}
