//! Translation quality evaluation: corpus BLEU and paired-bootstrap
//! significance testing.

pub mod bleu;
pub mod bootstrap;

pub use bleu::{corpus_bleu, BleuConfig, BleuReport, PreTokenizer, Smoothing};
pub use bootstrap::{paired_bootstrap, SignificanceResult};
