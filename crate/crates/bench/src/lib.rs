//! Shared fixtures for the pipeline benchmarks: deterministic token streams,
//! sentence corpora, and initialized models sized for timing runs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bitextlm_core::model::net::TrainExample;
use bitextlm_core::model::{ModelConfig, ModelParams};
use bitextlm_core::tokenize::{pack_windows, TokenStream, BYTE_VOCAB_SIZE};

/// Random byte-range token stream with a document boundary every ~40 tokens.
pub fn demo_stream(n_tokens: usize, seed: u64) -> TokenStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids = Vec::with_capacity(n_tokens);
    let mut boundaries = Vec::new();
    for i in 0..n_tokens {
        ids.push(rng.gen_range(0..256u32));
        if i % 40 == 39 {
            boundaries.push(i + 1);
        }
    }
    TokenStream { ids, boundaries }
}

/// Whitespace sentence corpus over a small word list; hypothesis sentences
/// share most but not all tokens with the references.
pub fn demo_sentences(n: usize, seed: u64) -> (Vec<String>, Vec<String>) {
    let words = ["ba", "de", "ki", "mo", "ru", "sa", "te", "vu", "na", "po"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut hyps = Vec::with_capacity(n);
    let mut refs = Vec::with_capacity(n);
    for _ in 0..n {
        let len = rng.gen_range(8..16);
        let reference: Vec<&str> = (0..len).map(|_| words[rng.gen_range(0..words.len())]).collect();
        let mut hyp = reference.clone();
        let flip = rng.gen_range(0..hyp.len());
        hyp[flip] = words[rng.gen_range(0..words.len())];
        refs.push(reference.join(" "));
        hyps.push(hyp.join(" "));
    }
    (hyps, refs)
}

/// Desk-scale model with the usual byte vocabulary.
pub fn demo_model(seed: u64) -> ModelParams<f32> {
    let config = ModelConfig {
        vocab_size: BYTE_VOCAB_SIZE,
        context_len: 256,
        embed_dim: 64,
        n_layers: 2,
        n_heads: 4,
        ffn_dim: 256,
        seed,
    };
    ModelParams::init(config).expect("static config is valid")
}

/// Packed training windows drawn from a demo stream.
pub fn demo_windows(n_windows: usize, window: usize, seed: u64) -> Vec<TrainExample> {
    let stream = demo_stream(n_windows * window + 1, seed);
    pack_windows(&stream, window)
        .expect("window length is positive")
        .iter()
        .map(|w| TrainExample::from_window(w).expect("windows are well-formed"))
        .collect()
}
