//! Reference causal language model: a small decoder-only pre-norm transformer
//! with learned positional embeddings, an untied output head, and optional
//! low-rank adapters.
//!
//! All parameters live in one flat buffer; [`ParamIndex`] names contiguous
//! ranges in a fixed declared order (embeddings, per-layer blocks, final norm,
//! head, then adapter blocks). Appending adapters at the tail makes the
//! trainable region a single contiguous range when the base is frozen.

pub mod decode;
pub mod math;
pub mod net;

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Standard deviation of the normal weight initialization.
pub const INIT_STD: f64 = 0.02;
/// Salt mixed into the model seed for adapter initialization, so adapter
/// weights never replay the base initialization stream.
const ADAPTER_SEED_SALT: u64 = 0xADA7_ADA7_ADA7_ADA7;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub context_len: usize,
    pub embed_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default sized for CPU training and finite-difference checks.
    pub fn desk_default() -> Self {
        ModelConfig {
            vocab_size: crate::tokenize::BYTE_VOCAB_SIZE as usize,
            context_len: 256,
            embed_dim: 64,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 256,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("vocab_size", self.vocab_size),
            ("context_len", self.context_len),
            ("embed_dim", self.embed_dim),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }
}

/// Linear layers an adapter can attach to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterTarget {
    Query,
    Key,
    Value,
    AttnOutput,
    FfnUp,
    FfnDown,
}

impl AdapterTarget {
    pub fn name(self) -> &'static str {
        match self {
            AdapterTarget::Query => "query",
            AdapterTarget::Key => "key",
            AdapterTarget::Value => "value",
            AdapterTarget::AttnOutput => "attn_output",
            AdapterTarget::FfnUp => "ffn_up",
            AdapterTarget::FfnDown => "ffn_down",
        }
    }

    /// (d_in, d_out) of the adapted linear under `cfg`.
    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        let d = cfg.embed_dim;
        match self {
            AdapterTarget::Query | AdapterTarget::Key | AdapterTarget::Value
            | AdapterTarget::AttnOutput => (d, d),
            AdapterTarget::FfnUp => (d, cfg.ffn_dim),
            AdapterTarget::FfnDown => (cfg.ffn_dim, d),
        }
    }
}

/// Parses a comma-separated target list. Accepts `q|query`, `k|key`,
/// `v|value`, `o|output`, `ffn_up`, `ffn_down`, and `ffn` as shorthand for
/// both feed-forward linears.
pub fn parse_targets(s: &str) -> Result<Vec<AdapterTarget>> {
    let mut out = Vec::new();
    for part in s.split(',') {
        let part = part.trim();
        match part {
            "q" | "query" => out.push(AdapterTarget::Query),
            "k" | "key" => out.push(AdapterTarget::Key),
            "v" | "value" => out.push(AdapterTarget::Value),
            "o" | "output" | "attn_output" => out.push(AdapterTarget::AttnOutput),
            "ffn_up" => out.push(AdapterTarget::FfnUp),
            "ffn_down" => out.push(AdapterTarget::FfnDown),
            "ffn" => {
                out.push(AdapterTarget::FfnUp);
                out.push(AdapterTarget::FfnDown);
            }
            other => {
                return Err(Error::Config(format!("unknown adapter target {other:?}")));
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub r: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub targets: Vec<AdapterTarget>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            r: 16,
            alpha: 32.0,
            dropout: 0.05,
            targets: vec![AdapterTarget::Query, AdapterTarget::Key, AdapterTarget::Value],
        }
    }
}

impl AdapterConfig {
    /// The wider target set used when fine-tuning without any pre-training
    /// phase: attention output and both feed-forward linears join q/k/v.
    pub fn direct_sft_targets() -> Vec<AdapterTarget> {
        vec![
            AdapterTarget::Query,
            AdapterTarget::Key,
            AdapterTarget::Value,
            AdapterTarget::AttnOutput,
            AdapterTarget::FfnUp,
            AdapterTarget::FfnDown,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        if self.r < 1 {
            return Err(Error::Config("adapter rank must be at least 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("adapter alpha {} must be > 0", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "adapter dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        if self.targets.is_empty() {
            return Err(Error::Config("adapter targets must be non-empty".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.targets {
            if !seen.insert(*t) {
                return Err(Error::Config(format!("duplicate adapter target {}", t.name())));
            }
        }
        Ok(())
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.r as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum InitKind {
    Normal,
    One,
    Zero,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub range: Range<usize>,
    init: InitKind,
}

/// Ranges of one transformer layer's tensors inside the flat buffer.
#[derive(Debug, Clone)]
pub struct LayerIx {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub wq: Range<usize>,
    pub bq: Range<usize>,
    pub wk: Range<usize>,
    pub bk: Range<usize>,
    pub wv: Range<usize>,
    pub bv: Range<usize>,
    pub wo: Range<usize>,
    pub bo: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w_up: Range<usize>,
    pub b_up: Range<usize>,
    pub w_down: Range<usize>,
    pub b_down: Range<usize>,
}

/// One adapter pair: `a` is (r, d_in) random-initialized, `b` is (d_out, r)
/// zero-initialized, so the initial update is exactly zero.
#[derive(Debug, Clone)]
pub struct AdapterIx {
    pub layer: usize,
    pub target: AdapterTarget,
    pub a: Range<usize>,
    pub b: Range<usize>,
}

#[derive(Debug, Clone)]
pub struct ParamIndex {
    pub entries: Vec<ParamEntry>,
    pub embed: Range<usize>,
    pub pos: Range<usize>,
    pub layers: Vec<LayerIx>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub head: Range<usize>,
    pub adapters: Vec<AdapterIx>,
    /// First adapter offset; equals `total` when no adapters exist.
    pub adapter_start: usize,
    pub total: usize,
}

struct Alloc {
    entries: Vec<ParamEntry>,
    next: usize,
}

impl Alloc {
    fn push(&mut self, name: String, len: usize, init: InitKind) -> Range<usize> {
        let range = self.next..self.next + len;
        self.entries.push(ParamEntry {
            name,
            range: range.clone(),
            init,
        });
        self.next += len;
        range
    }
}

impl ParamIndex {
    pub fn build(config: &ModelConfig, adapter: Option<&AdapterConfig>) -> ParamIndex {
        let d = config.embed_dim;
        let ffn = config.ffn_dim;
        let mut al = Alloc {
            entries: Vec::new(),
            next: 0,
        };
        let embed = al.push("embed".into(), config.vocab_size * d, InitKind::Normal);
        let pos = al.push("pos".into(), config.context_len * d, InitKind::Normal);
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerIx {
                ln1_g: al.push(p("ln1.g"), d, InitKind::One),
                ln1_b: al.push(p("ln1.b"), d, InitKind::Zero),
                wq: al.push(p("wq"), d * d, InitKind::Normal),
                bq: al.push(p("bq"), d, InitKind::Zero),
                wk: al.push(p("wk"), d * d, InitKind::Normal),
                bk: al.push(p("bk"), d, InitKind::Zero),
                wv: al.push(p("wv"), d * d, InitKind::Normal),
                bv: al.push(p("bv"), d, InitKind::Zero),
                wo: al.push(p("wo"), d * d, InitKind::Normal),
                bo: al.push(p("bo"), d, InitKind::Zero),
                ln2_g: al.push(p("ln2.g"), d, InitKind::One),
                ln2_b: al.push(p("ln2.b"), d, InitKind::Zero),
                w_up: al.push(p("w_up"), ffn * d, InitKind::Normal),
                b_up: al.push(p("b_up"), ffn, InitKind::Zero),
                w_down: al.push(p("w_down"), d * ffn, InitKind::Normal),
                b_down: al.push(p("b_down"), d, InitKind::Zero),
            });
        }
        let lnf_g = al.push("lnf.g".into(), d, InitKind::One);
        let lnf_b = al.push("lnf.b".into(), d, InitKind::Zero);
        let head = al.push("head".into(), config.vocab_size * d, InitKind::Normal);
        let adapter_start = al.next;
        let mut adapters = Vec::new();
        if let Some(cfg) = adapter {
            for l in 0..config.n_layers {
                for &target in &cfg.targets {
                    let (d_in, d_out) = target.dims(config);
                    let a = al.push(
                        format!("layer{l}.adapter.{}.a", target.name()),
                        cfg.r * d_in,
                        InitKind::Normal,
                    );
                    let b = al.push(
                        format!("layer{l}.adapter.{}.b", target.name()),
                        d_out * cfg.r,
                        InitKind::Zero,
                    );
                    adapters.push(AdapterIx { layer: l, target, a, b });
                }
            }
        }
        ParamIndex {
            entries: al.entries,
            embed,
            pos,
            layers,
            lnf_g,
            lnf_b,
            head,
            adapters,
            adapter_start,
            total: al.next,
        }
    }

    pub fn adapter_for(&self, layer: usize, target: AdapterTarget) -> Option<&AdapterIx> {
        self.adapters
            .iter()
            .find(|a| a.layer == layer && a.target == target)
    }
}

/// All model parameters plus their layout.
#[derive(Debug, Clone)]
pub struct ModelParams<F> {
    pub config: ModelConfig,
    pub adapter: Option<AdapterConfig>,
    pub index: ParamIndex,
    pub data: Vec<F>,
}

fn fill_normal<F: Scalar>(out: &mut [F], rng: &mut ChaCha8Rng) {
    let dist = Normal::new(0.0, INIT_STD).expect("valid normal");
    for v in out {
        *v = F::from_f64(dist.sample(rng));
    }
}

impl<F: Scalar> ModelParams<F> {
    /// Fresh base parameters: weights drawn N(0, 0.02) from a stream seeded by
    /// `config.seed`, norm gains one, biases zero.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let index = ParamIndex::build(&config, None);
        let mut data = vec![F::zero(); index.total];
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        for entry in &index.entries {
            match entry.init {
                InitKind::Normal => fill_normal(&mut data[entry.range.clone()], &mut rng),
                InitKind::One => data[entry.range.clone()].fill(F::one()),
                InitKind::Zero => {}
            }
        }
        Ok(ModelParams {
            config,
            adapter: None,
            index,
            data,
        })
    }

    /// Appends low-rank adapters and freezes the base: after this call the
    /// trainable region is exactly the adapter tail. `a` matrices are drawn
    /// from a salted stream; `b` starts at zero so outputs are unchanged.
    pub fn apply_adapters(&mut self, cfg: AdapterConfig) -> Result<()> {
        if self.adapter.is_some() {
            return Err(Error::Config("adapters already applied".into()));
        }
        cfg.validate()?;
        let index = ParamIndex::build(&self.config, Some(&cfg));
        debug_assert_eq!(index.adapter_start, self.data.len());
        self.data.resize(index.total, F::zero());
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ ADAPTER_SEED_SALT);
        for entry in &index.entries[self.index.entries.len()..] {
            if entry.init == InitKind::Normal {
                fill_normal(&mut self.data[entry.range.clone()], &mut rng);
            }
        }
        self.index = index;
        self.adapter = Some(cfg);
        Ok(())
    }

    /// The contiguous range Adam updates: the adapter tail when the base is
    /// frozen, the whole buffer otherwise.
    pub fn trainable_range(&self) -> Range<usize> {
        if self.adapter.is_some() {
            self.index.adapter_start..self.index.total
        } else {
            0..self.index.total
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_range().len()
    }

    pub fn p(&self, range: &Range<usize>) -> &[F] {
        &self.data[range.clone()]
    }

    /// Same parameters in another precision.
    pub fn convert<G: Scalar>(&self) -> ModelParams<G> {
        ModelParams {
            config: self.config.clone(),
            adapter: self.adapter.clone(),
            index: self.index.clone(),
            data: self.data.iter().map(|&v| G::from_f64(v.to_f64())).collect(),
        }
    }
}
