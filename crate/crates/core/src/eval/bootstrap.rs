//! Paired bootstrap resampling for BLEU deltas: resample sentence indices
//! with replacement, rescore both systems on each resample from precomputed
//! per-sentence counts, and report the one-sided p-value for system A
//! beating system B.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bleu::{score_from_stats, sentence_stats, BleuConfig, BleuStats};
use crate::error::{Error, Result};

pub const MIN_RESAMPLES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    /// Fraction of resamples where A failed to beat B (delta ≤ 0).
    pub p_value: f64,
    pub n_resamples: usize,
    /// BLEU(A) − BLEU(B) on the full corpus.
    pub delta_observed: f64,
}

impl SignificanceResult {
    /// A is significantly better than B at level `alpha`.
    pub fn significant(&self, alpha: f64) -> bool {
        self.delta_observed > 0.0 && self.p_value < alpha
    }
}

/// Test whether system A's corpus BLEU beats system B's on shared references.
pub fn paired_bootstrap(
    hyp_a: &[String],
    hyp_b: &[String],
    references: &[String],
    cfg: BleuConfig,
    n_resamples: usize,
    seed: u64,
) -> Result<SignificanceResult> {
    if hyp_a.len() != references.len() || hyp_b.len() != references.len() {
        return Err(Error::Invalid {
            what: "bootstrap corpus",
            msg: format!(
                "system sizes {} and {} against {} references",
                hyp_a.len(),
                hyp_b.len(),
                references.len()
            ),
        });
    }
    if references.is_empty() {
        return Err(Error::Invalid {
            what: "bootstrap corpus",
            msg: "no sentences".into(),
        });
    }
    if n_resamples < MIN_RESAMPLES {
        return Err(Error::Invalid {
            what: "bootstrap resamples",
            msg: format!("{n_resamples} requested, minimum is {MIN_RESAMPLES}"),
        });
    }

    let stats_a: Vec<BleuStats> = hyp_a
        .iter()
        .zip(references)
        .map(|(h, r)| sentence_stats(h, r, cfg.pre_tokenizer))
        .collect();
    let stats_b: Vec<BleuStats> = hyp_b
        .iter()
        .zip(references)
        .map(|(h, r)| sentence_stats(h, r, cfg.pre_tokenizer))
        .collect();

    let delta = |idx: &[usize]| -> f64 {
        let mut pooled_a = BleuStats::default();
        let mut pooled_b = BleuStats::default();
        for &i in idx {
            pooled_a.add(&stats_a[i]);
            pooled_b.add(&stats_b[i]);
        }
        score_from_stats(&pooled_a, cfg).score - score_from_stats(&pooled_b, cfg).score
    };

    let full: Vec<usize> = (0..references.len()).collect();
    let delta_observed = delta(&full);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut not_better = 0usize;
    let mut idx = vec![0usize; references.len()];
    for _ in 0..n_resamples {
        for slot in idx.iter_mut() {
            *slot = rng.gen_range(0..references.len());
        }
        if delta(&idx) <= 0.0 {
            not_better += 1;
        }
    }

    Ok(SignificanceResult {
        p_value: not_better as f64 / n_resamples as f64,
        n_resamples,
        delta_observed,
    })
}
