//! Core library for training and evaluating small bilingual translation
//! language models end to end on one machine.
//!
//! The pipeline stages, in data order:
//!
//! 1. [`corpus`]: parallel pairs and JSONL corpus files.
//! 2. [`filter`]: embedding-based similarity scoring and band filtering.
//! 3. [`formats`]: bilingual document construction for continued pretraining
//!    (orderings crossed with marker formats).
//! 4. [`tokenize`]: tokenizers, document streams, and fixed-window packing.
//! 5. [`sft`]: prompt templates and mask-supervised fine-tuning examples.
//!
//! Everything is deterministic given a seed: data generation, shuffling,
//! initialization, and parallel gradient reduction all produce identical
//! results across runs and thread counts.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod filter;
pub mod formats;
mod hash;
pub mod model;
pub mod scalar;
pub mod sft;
pub mod synthetic;
pub mod tokenize;
pub mod train;

pub use corpus::{Corpus, Direction, LanguageCode, ParallelPair};
pub use error::{Error, Result};
pub use eval::{
    corpus_bleu, paired_bootstrap, BleuConfig, BleuReport, PreTokenizer, SignificanceResult,
    Smoothing,
};
pub use experiment::{run_experiment_matrix, CellResult, ExperimentMatrix, ExperimentSpec};
pub use filter::{EmbeddingProvider, HashNgramEmbedder, SimilarityBand};
pub use formats::{CptDocument, FormatSpec, MarkerFormat, MarkerKind, OrderingScheme};
pub use model::{AdapterConfig, AdapterTarget, ModelConfig, ModelParams};
pub use scalar::Scalar;
pub use sft::{PromptTemplate, SftExample};
pub use synthetic::{generate as generate_synthetic, SyntheticData, SyntheticTask, SyntheticTaskSpec};
pub use tokenize::{ByteTokenizer, PackedWindow, Tokenizer, WordTokenizer};
pub use train::{train_phase, Checkpoint, Phase, ScheduleKind, TrainConfig};
