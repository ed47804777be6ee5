//! Declarative experiment matrices over the synthetic tasks.
//!
//! A TOML spec names one task, one model shape, train settings, a seed list,
//! and a list of cells; each cell describes a pipeline (zero, one, or two
//! pretraining phases, then optional fine-tuning) and is scored by greedy
//! decoding plus corpus BLEU in both directions. Every (cell, seed) job is
//! persisted so a re-run recomputes only what is missing, and training-phase
//! checkpoints are cached under a content hash of everything that determines
//! them, so cells sharing a phase train it once.

use std::any::Any;
use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, PoisonError};

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Direction, ParallelPair};
use crate::error::{Error, Result};
use crate::eval::{corpus_bleu, BleuConfig, PreTokenizer, Smoothing};
use crate::formats::{
    build_cpt_corpus, replay_mix, CptDocument, FormatSpec, MarkerFormat, MarkerKind,
    OrderingScheme,
};
use crate::hash::hex_digest;
use crate::model::decode::greedy_decode;
use crate::model::net::TrainExample;
use crate::model::{ModelConfig, ModelParams};
use crate::sft::{build_sft_example, few_shot_prompt, PromptTemplate};
use crate::synthetic::{cv_vocab, generate, invert_direction, SyntheticTask, SyntheticTaskSpec};
use crate::tokenize::{encode_stream, pack_windows, ByteTokenizer, Tokenizer, BYTE_VOCAB_SIZE};
use crate::train::{train_phase, Checkpoint, TrainConfig, DESK_CPT_LR, DESK_SFT_LR};

/// Complete description of one matrix run.
///
/// ```toml
/// seeds = [0, 1, 2]
///
/// [task]
/// kind = "cipher_plus_reversal"
/// vocab = 24
/// sentence_len_min = 4
/// sentence_len_max = 6
/// n_cpt = 6000
/// n_sft = 400
/// n_val = 64
/// n_test = 128
///
/// [model]
/// context = 256
/// embed = 48
///
/// [[cells]]
/// name = "forward_sft"
/// cpt = { ordering = "forward", marker = "interleaved" }
/// sft = true
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub task: TaskSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub cpt: CptSection,
    #[serde(default)]
    pub sft: SftSection,
    #[serde(default)]
    pub eval: EvalSection,
    pub seeds: Vec<u64>,
    pub cells: Vec<CellSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSection {
    pub kind: SyntheticTask,
    /// Number of consonant-vowel vocabulary words.
    pub vocab: usize,
    pub sentence_len_min: usize,
    pub sentence_len_max: usize,
    /// Pairs reserved for pretraining documents.
    pub n_cpt: usize,
    /// Pairs reserved for fine-tuning (disjoint from the pretraining pairs).
    pub n_sft: usize,
    pub n_val: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub context: usize,
    pub embed: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            context: 256,
            embed: 64,
            layers: 2,
            heads: 4,
            ffn: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CptSection {
    pub window: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub validate_every: usize,
}

impl Default for CptSection {
    fn default() -> Self {
        CptSection {
            window: 64,
            batch_size: 8,
            epochs: 1,
            peak_lr: DESK_CPT_LR,
            validate_every: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SftSection {
    pub batch_size: usize,
    pub epochs: usize,
    pub peak_lr: f64,
    pub validate_every: usize,
}

impl Default for SftSection {
    fn default() -> Self {
        SftSection {
            batch_size: 8,
            epochs: 3,
            peak_lr: DESK_SFT_LR,
            validate_every: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// In-context examples for cells that skip fine-tuning.
    pub shots: usize,
    pub max_new: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            shots: 5,
            max_new: 48,
        }
    }
}

/// One pipeline to score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub name: String,
    /// First pretraining phase; absent for fine-tune-only and untrained cells.
    #[serde(default)]
    pub cpt: Option<CptPhaseSpec>,
    /// Second, sequential pretraining phase starting from the first's weights.
    #[serde(default)]
    pub cpt2: Option<CptPhaseSpec>,
    #[serde(default)]
    pub sft: bool,
    /// Overrides the eval-section shot count for this cell.
    #[serde(default)]
    pub shots: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrderingName {
    Mono,
    Forward,
    Backward,
    Mix,
}

impl OrderingName {
    fn label(self) -> &'static str {
        match self {
            OrderingName::Mono => "mono",
            OrderingName::Forward => "forward",
            OrderingName::Backward => "backward",
            OrderingName::Mix => "mix",
        }
    }
}

fn default_marker() -> MarkerKind {
    MarkerKind::Interleaved
}

fn default_one() -> f64 {
    1.0
}

fn default_half() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CptPhaseSpec {
    pub ordering: OrderingName,
    #[serde(default = "default_marker")]
    pub marker: MarkerKind,
    /// Fraction of the pretraining pairs used, truncating the pair list.
    #[serde(default = "default_one")]
    pub data_fraction: f64,
    /// Forward share for `mix` ordering.
    #[serde(default = "default_half")]
    pub mix_fraction: f64,
    /// Documents from the previous phase mixed in, as a fraction of this
    /// phase's documents. Only meaningful on a second phase.
    #[serde(default)]
    pub replay_fraction: f64,
    /// Epoch count for this phase, overriding the `[cpt]` section.
    #[serde(default)]
    pub epochs: Option<usize>,
    /// Capture the mid-run state after this fraction of the training stream
    /// instead of finishing it; the schedule still spans the full run. Data
    /// curves are swept this way: one recipe, checkpoints along its stream.
    #[serde(default = "default_one")]
    pub checkpoint: f64,
}

impl CptPhaseSpec {
    fn format_spec(&self, forward: &Direction, seed: u64) -> Result<FormatSpec> {
        let ordering = match self.ordering {
            OrderingName::Mono => OrderingScheme::Mono,
            OrderingName::Forward => OrderingScheme::SingleDirection(forward.clone()),
            OrderingName::Backward => OrderingScheme::SingleDirection(forward.reversed()),
            OrderingName::Mix => OrderingScheme::Mix {
                fraction: self.mix_fraction,
                seed,
            },
        };
        let directions = [forward.clone(), forward.reversed()];
        FormatSpec::with_default_separator(ordering, MarkerFormat::auto(self.marker, &directions))
    }

    fn label(&self) -> String {
        let mut s = format!("{}/{}", self.ordering.label(), self.marker.name());
        if self.data_fraction < 1.0 {
            s.push_str(&format!("@{}", self.data_fraction));
        }
        if self.replay_fraction > 0.0 {
            s.push_str(&format!("+replay{}", self.replay_fraction));
        }
        if let Some(epochs) = self.epochs {
            s.push_str(&format!("x{epochs}"));
        }
        if self.checkpoint < 1.0 {
            s.push_str(&format!("%{}", self.checkpoint));
        }
        s
    }
}

impl CellSpec {
    /// Human-readable pipeline summary for tables.
    pub fn pipeline(&self) -> String {
        let mut parts = Vec::new();
        if let Some(p) = &self.cpt {
            parts.push(format!("cpt[{}]", p.label()));
        }
        if let Some(p) = &self.cpt2 {
            parts.push(format!("cpt[{}]", p.label()));
        }
        if self.sft {
            parts.push("sft".to_string());
        }
        if parts.is_empty() {
            parts.push("untrained".to_string());
        }
        parts.join("+")
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        let t = &self.task;
        if t.vocab < 2 {
            return Err(Error::Config(format!("task vocab {} is too small", t.vocab)));
        }
        if t.sentence_len_min < 1 || t.sentence_len_min > t.sentence_len_max {
            return Err(Error::Config(format!(
                "sentence length range {}..{} is invalid",
                t.sentence_len_min, t.sentence_len_max
            )));
        }
        if t.n_cpt == 0 || t.n_val == 0 || t.n_test == 0 {
            return Err(Error::Config(
                "n_cpt, n_val, and n_test must all be positive".into(),
            ));
        }
        if self.cells.iter().any(|c| c.sft) && t.n_sft == 0 {
            return Err(Error::Config(
                "a cell fine-tunes but n_sft is 0".into(),
            ));
        }
        if self.eval.shots > t.n_val {
            return Err(Error::Config(format!(
                "{} shots requested but only {} validation pairs exist",
                self.eval.shots, t.n_val
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds listed".into()));
        }
        if self.cells.is_empty() {
            return Err(Error::Config("no cells listed".into()));
        }
        let mut seen = BTreeSet::new();
        for cell in &self.cells {
            if cell.name.is_empty()
                || !cell
                    .name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(Error::Config(format!(
                    "cell name {:?} must be non-empty and use only [A-Za-z0-9_-]",
                    cell.name
                )));
            }
            if !seen.insert(&cell.name) {
                return Err(Error::Config(format!("duplicate cell name {:?}", cell.name)));
            }
            if cell.cpt2.is_some() && cell.cpt.is_none() {
                return Err(Error::Config(format!(
                    "cell {:?} has a second pretraining phase but no first",
                    cell.name
                )));
            }
            if let Some(shots) = cell.shots {
                if shots > t.n_val {
                    return Err(Error::Config(format!(
                        "cell {:?} asks for {} shots but only {} validation pairs exist",
                        cell.name, shots, t.n_val
                    )));
                }
            }
            for phase in [&cell.cpt, &cell.cpt2].into_iter().flatten() {
                if !(phase.data_fraction > 0.0 && phase.data_fraction <= 1.0) {
                    return Err(Error::Config(format!(
                        "cell {:?} data fraction {} outside (0, 1]",
                        cell.name, phase.data_fraction
                    )));
                }
                if !(phase.replay_fraction >= 0.0 && phase.replay_fraction.is_finite()) {
                    return Err(Error::Config(format!(
                        "cell {:?} replay fraction {} is invalid",
                        cell.name, phase.replay_fraction
                    )));
                }
                if !(phase.checkpoint > 0.0 && phase.checkpoint <= 1.0) {
                    return Err(Error::Config(format!(
                        "cell {:?} checkpoint {} outside (0, 1]",
                        cell.name, phase.checkpoint
                    )));
                }
                if phase.epochs == Some(0) {
                    return Err(Error::Config(format!(
                        "cell {:?} overrides pretraining epochs to zero",
                        cell.name
                    )));
                }
            }
            if let Some(first) = &cell.cpt {
                if first.replay_fraction > 0.0 {
                    return Err(Error::Config(format!(
                        "cell {:?} sets replay on its first phase, which has nothing to replay",
                        cell.name
                    )));
                }
            }
        }
        // Model shape errors surface through the model config itself.
        self.model_config(0).validate()
    }

    fn task_spec(&self, seed: u64) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            task: self.task.kind,
            vocab: cv_vocab(self.task.vocab),
            sentence_len_range: (self.task.sentence_len_min, self.task.sentence_len_max),
            n_train: self.task.n_cpt + self.task.n_sft,
            n_val: self.task.n_val,
            n_test: self.task.n_test,
            seed,
        }
    }

    fn model_config(&self, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: BYTE_VOCAB_SIZE,
            context_len: self.model.context,
            embed_dim: self.model.embed,
            n_layers: self.model.layers,
            n_heads: self.model.heads,
            ffn_dim: self.model.ffn,
            seed,
        }
    }
}

/// Reads and validates a TOML spec file.
pub fn load_spec(path: &Path) -> Result<ExperimentSpec> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    let spec: ExperimentSpec =
        toml::from_str(&text).map_err(|e| Error::file(path, e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

/// Scores of one (cell, seed) job; this is the resumable artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedOutcome {
    pub seed: u64,
    /// Direction label to BLEU; empty when the job failed.
    pub bleu: BTreeMap<String, f64>,
    /// Digest of the resolved configuration that produced these scores. A
    /// persisted outcome is reused only when this matches the current spec,
    /// so editing the spec forces a recompute instead of serving stale scores.
    #[serde(default)]
    pub config: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub name: String,
    pub pipeline: String,
    /// One outcome per configured seed, in spec order.
    pub seeds: Vec<SeedOutcome>,
    /// Direction label to mean BLEU over the seeds that succeeded.
    pub means: BTreeMap<String, f64>,
    pub failed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentMatrix {
    pub seeds: Vec<u64>,
    pub cells: Vec<CellResult>,
}

impl ExperimentMatrix {
    pub fn cell(&self, name: &str) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.name == name)
    }

    /// Mean BLEU of `cell` in `direction`, when that cell has any scores there.
    pub fn mean(&self, cell: &str, direction: &str) -> Option<f64> {
        self.cell(cell)?.means.get(direction).copied()
    }

    pub fn load(path: &Path) -> Result<ExperimentMatrix> {
        let text = fs::read_to_string(path).map_err(Error::io(path))?;
        serde_json::from_str(&text).map_err(|e| Error::file(path, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(self).map_err(|e| Error::file(path, e.to_string()))?;
        bytes.push(b'\n');
        fs::write(path, bytes).map_err(Error::io(path))
    }

    /// Aligned text table: one row per cell, one column per direction, each
    /// cell showing the mean and the per-seed scores.
    pub fn render_table(&self) -> String {
        let directions: BTreeSet<&str> = self
            .cells
            .iter()
            .flat_map(|c| c.seeds.iter().flat_map(|s| s.bleu.keys()))
            .map(String::as_str)
            .collect();
        let mut header = vec!["cell".to_string(), "pipeline".to_string()];
        header.extend(directions.iter().map(|d| d.to_string()));
        let mut rows = vec![header];
        for cell in &self.cells {
            let mut row = vec![cell.name.clone(), cell.pipeline.clone()];
            for &dir in &directions {
                row.push(match cell.means.get(dir) {
                    Some(mean) => {
                        let per_seed: Vec<String> = cell
                            .seeds
                            .iter()
                            .map(|s| match s.bleu.get(dir) {
                                Some(b) => format!("{b:.1}"),
                                None => "-".to_string(),
                            })
                            .collect();
                        format!("{mean:6.2} [{}]", per_seed.join(" "))
                    }
                    None if cell.failed => "FAILED".to_string(),
                    None => "-".to_string(),
                });
            }
            rows.push(row);
        }
        let cols = rows[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|i| rows.iter().map(|r| r[i].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in rows.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, w)| format!("{cell:<w$}"))
                .collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
            if i == 0 {
                let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
                out.push_str(&rule.join("  "));
                out.push('\n');
            }
        }
        out
    }
}

/// Everything derived from one seed, shared by all of that seed's jobs.
struct SeedData {
    task_spec: SyntheticTaskSpec,
    forward: Direction,
    /// Pretraining pairs rendered forward; phase builders derive the rest.
    cpt_ab: Corpus,
    sft_pairs: Corpus,
    val: Corpus,
    test: Corpus,
}

fn seed_data(spec: &ExperimentSpec, seed: u64) -> Result<SeedData> {
    let task_spec = spec.task_spec(seed);
    let data = generate(&task_spec)?;
    let forward = data.train.direction().clone();
    let pairs = data.train.pairs();
    let cpt_ab = Corpus::new(forward.clone(), pairs[..spec.task.n_cpt].to_vec())?;
    let sft_pairs = if spec.task.n_sft > 0 {
        Corpus::new(forward.clone(), pairs[spec.task.n_cpt..].to_vec())?
    } else {
        // Unused; keep a well-formed placeholder so the struct stays simple.
        Corpus::new(forward.clone(), pairs[..1].to_vec())?
    };
    Ok(SeedData {
        task_spec,
        forward,
        cpt_ab,
        sft_pairs,
        val: data.val,
        test: data.test,
    })
}

struct RunCtx<'a> {
    spec: &'a ExperimentSpec,
    cache_dir: PathBuf,
    cells_dir: PathBuf,
    data: BTreeMap<u64, Arc<SeedData>>,
    /// Per-stage-hash locks so concurrent jobs never train the same stage twice.
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

impl RunCtx<'_> {
    fn lock_for(&self, key: &str) -> Arc<Mutex<()>> {
        let mut map = self.locks.lock().unwrap_or_else(PoisonError::into_inner);
        map.entry(key.to_string()).or_default().clone()
    }
}

/// Everything that determines a trained stage's weights, in one hashable record.
#[derive(Serialize)]
struct StageKey<'a> {
    model: &'a ModelConfig,
    task: &'a SyntheticTaskSpec,
    phase: &'a str,
    format: Option<&'a FormatSpec>,
    data_fraction: f64,
    replay_fraction: f64,
    window: usize,
    train: &'a TrainConfig,
    init: &'a str,
}

/// Loads the stage checkpoint for `key` or trains it with `build` and caches it.
fn ensure_stage(
    ctx: &RunCtx,
    key: &StageKey,
    build: impl FnOnce() -> Result<Checkpoint<f32>>,
) -> Result<(String, ModelParams<f32>)> {
    let bytes = serde_json::to_vec(key)
        .map_err(|e| Error::Config(format!("stage key serialization failed: {e}")))?;
    let hash = hex_digest(&bytes);
    let path = ctx.cache_dir.join(format!("{hash}.ckpt"));
    let lock = ctx.lock_for(&hash);
    let _guard = lock.lock().unwrap_or_else(PoisonError::into_inner);
    if path.exists() {
        return Ok((hash.clone(), Checkpoint::load(&path)?.params));
    }
    let checkpoint = build()?;
    checkpoint.save(&path)?;
    Ok((hash, checkpoint.params))
}

/// Documents for one pretraining phase: pair-list truncation, then rendering.
fn phase_docs(data: &SeedData, phase: &CptPhaseSpec, seed: u64) -> Result<Vec<CptDocument>> {
    let n = data.cpt_ab.len();
    let k = ((phase.data_fraction * n as f64).ceil() as usize).clamp(1, n);
    let ab = Corpus::new(data.forward.clone(), data.cpt_ab.pairs()[..k].to_vec())?;
    let ba = invert_direction(&ab);
    let format = phase.format_spec(&data.forward, seed)?;
    build_cpt_corpus(&ab, &ba, &format)
}

fn windows_from_docs(
    docs: &[CptDocument],
    window: usize,
    what: &'static str,
) -> Result<Vec<TrainExample>> {
    let stream = encode_stream(docs, &ByteTokenizer)?;
    let windows = pack_windows(&stream, window)?;
    if windows.is_empty() {
        return Err(Error::Config(format!(
            "{what} stream of {} tokens is shorter than one window of {window}",
            stream.ids.len()
        )));
    }
    windows.iter().map(TrainExample::from_window).collect()
}

fn cpt_stage(
    ctx: &RunCtx,
    data: &SeedData,
    model_cfg: &ModelConfig,
    phase: &CptPhaseSpec,
    replay_from: Option<&CptPhaseSpec>,
    seed: u64,
    init_tag: &str,
    init_params: ModelParams<f32>,
) -> Result<(String, ModelParams<f32>)> {
    let format = phase.format_spec(&data.forward, seed)?;
    let train_cfg = TrainConfig {
        peak_lr: ctx.spec.cpt.peak_lr,
        batch_size: ctx.spec.cpt.batch_size,
        epochs: phase.epochs.unwrap_or(ctx.spec.cpt.epochs),
        stop_fraction: phase.checkpoint,
        validate_every: ctx.spec.cpt.validate_every,
        seed,
        ..TrainConfig::cpt_default()
    };
    let key = StageKey {
        model: model_cfg,
        task: &data.task_spec,
        phase: "cpt",
        format: Some(&format),
        data_fraction: phase.data_fraction,
        replay_fraction: phase.replay_fraction,
        window: ctx.spec.cpt.window,
        train: &train_cfg,
        init: init_tag,
    };
    ensure_stage(ctx, &key, || {
        let mut docs = phase_docs(data, phase, seed)?;
        if phase.replay_fraction > 0.0 {
            let source = replay_from.ok_or_else(|| {
                Error::Config("replay requested but there is no previous phase".into())
            })?;
            let pool = phase_docs(data, source, seed)?;
            docs = replay_mix(&docs, &pool, phase.replay_fraction, seed)?;
        }
        let train_ex = windows_from_docs(&docs, ctx.spec.cpt.window, "pretraining")?;
        let val_ab = data.val.clone();
        let val_ba = invert_direction(&val_ab);
        let val_docs = build_cpt_corpus(&val_ab, &val_ba, &format)?;
        let val_ex = windows_from_docs(&val_docs, ctx.spec.cpt.window, "validation")?;
        train_phase(init_params, &train_ex, &val_ex, &train_cfg)
    })
}

/// The matrix's fixed fine-tuning and evaluation prompt: the tagged document
/// prefix (`<2tgt> src `), identical across every cell so pipelines differ
/// only in their pretraining data. Mirroring the tagged render keeps the
/// fine-tuning token layout position-compatible with tag-marked pretraining,
/// which small absolute-position models need for any transfer to survive.
fn matrix_template(direction: Direction) -> PromptTemplate {
    let text = format!("<2{}> {{source}}", direction.target());
    PromptTemplate::new(direction, text, " ").expect("static template shape is valid")
}

/// Fine-tuning examples for every pair of `corpus`, in both directions.
fn sft_examples(corpus: &Corpus) -> Result<Vec<TrainExample>> {
    let tokenizer = ByteTokenizer;
    let inverted = invert_direction(corpus);
    let mut out = Vec::with_capacity(corpus.len() * 2);
    for view in [corpus, &inverted] {
        let template = matrix_template(view.direction().clone());
        for pair in view.iter() {
            out.push(TrainExample::from_sft(&build_sft_example(
                pair, &template, &tokenizer,
            )?)?);
        }
    }
    Ok(out)
}

fn sft_stage(
    ctx: &RunCtx,
    data: &SeedData,
    model_cfg: &ModelConfig,
    seed: u64,
    init_tag: &str,
    init_params: ModelParams<f32>,
) -> Result<(String, ModelParams<f32>)> {
    let train_cfg = TrainConfig {
        peak_lr: ctx.spec.sft.peak_lr,
        batch_size: ctx.spec.sft.batch_size,
        epochs: ctx.spec.sft.epochs,
        validate_every: ctx.spec.sft.validate_every,
        seed,
        ..TrainConfig::sft_default()
    };
    let key = StageKey {
        model: model_cfg,
        task: &data.task_spec,
        phase: "sft",
        format: None,
        data_fraction: 1.0,
        replay_fraction: 0.0,
        window: 0,
        train: &train_cfg,
        init: init_tag,
    };
    ensure_stage(ctx, &key, || {
        let train_ex = sft_examples(&data.sft_pairs)?;
        let val_ex = sft_examples(&data.val)?;
        train_phase(init_params, &train_ex, &val_ex, &train_cfg)
    })
}

/// Greedy-decodes the test set in both directions and scores each with
/// add-one-smoothed corpus BLEU (tiny models earn legitimate zeros otherwise;
/// the smoothing is recorded in the per-report metadata as always).
fn evaluate_params(
    ctx: &RunCtx,
    data: &SeedData,
    params: &ModelParams<f32>,
    shots: usize,
) -> Result<BTreeMap<String, f64>> {
    let tokenizer = ByteTokenizer;
    let bleu_cfg = BleuConfig {
        smoothing: Smoothing::AddOne,
        pre_tokenizer: PreTokenizer::Whitespace,
    };
    let mut out = BTreeMap::new();
    for backward in [false, true] {
        let (test, val);
        if backward {
            test = invert_direction(&data.test);
            val = invert_direction(&data.val);
        } else {
            test = data.test.clone();
            val = data.val.clone();
        }
        let template = matrix_template(test.direction().clone());
        let examples: Vec<ParallelPair> = val.pairs()[..shots].to_vec();
        let mut hyps = Vec::with_capacity(test.len());
        let mut refs = Vec::with_capacity(test.len());
        for pair in test.iter() {
            let prompt = few_shot_prompt(&examples, pair, &template)?;
            let prompt_ids = tokenizer.encode(&prompt)?;
            let generated =
                greedy_decode(params, &prompt_ids, tokenizer.eos_id(), ctx.spec.eval.max_new)?;
            let text = tokenizer.decode(&generated)?;
            // Few-shot continuations run past the answer; keep the first line.
            let first_line = text.split('\n').next().unwrap_or("").trim().to_string();
            hyps.push(first_line);
            refs.push(pair.target_text.clone());
        }
        let report = corpus_bleu(&hyps, &refs, bleu_cfg)?;
        out.insert(test.direction().to_string(), report.score);
    }
    Ok(out)
}

fn run_cell_seed(ctx: &RunCtx, cell: &CellSpec, seed: u64) -> Result<BTreeMap<String, f64>> {
    let data = &ctx.data[&seed];
    let model_cfg = ctx.spec.model_config(seed);
    let mut params = ModelParams::<f32>::init(model_cfg.clone())?;
    let mut tag = "random".to_string();
    if let Some(phase) = &cell.cpt {
        (tag, params) = cpt_stage(ctx, data, &model_cfg, phase, None, seed, &tag, params)?;
    }
    if let Some(phase) = &cell.cpt2 {
        (tag, params) = cpt_stage(
            ctx,
            data,
            &model_cfg,
            phase,
            cell.cpt.as_ref(),
            seed,
            &tag,
            params,
        )?;
    }
    if cell.sft {
        (_, params) = sft_stage(ctx, data, &model_cfg, seed, &tag, params)?;
    }
    let shots = cell
        .shots
        .unwrap_or(if cell.sft { 0 } else { ctx.spec.eval.shots });
    evaluate_params(ctx, data, &params, shots)
}

fn panic_text(payload: Box<dyn Any + Send>) -> String {
    if let Some(s) = payload.downcast_ref::<&str>() {
        (*s).to_string()
    } else if let Some(s) = payload.downcast_ref::<String>() {
        s.clone()
    } else {
        "panic with non-text payload".to_string()
    }
}

fn outcome_path(ctx: &RunCtx, cell: &CellSpec, seed: u64) -> PathBuf {
    ctx.cells_dir.join(format!("{}--s{seed}.json", cell.name))
}

/// Digest of every spec section that can change a job's scores. Seeds are
/// excluded: the seed is part of the outcome file's name.
fn job_digest(spec: &ExperimentSpec, cell: &CellSpec) -> String {
    #[derive(Serialize)]
    struct JobKey<'a> {
        task: &'a TaskSection,
        model: &'a ModelSection,
        cpt: &'a CptSection,
        sft: &'a SftSection,
        eval: &'a EvalSection,
        cell: &'a CellSpec,
    }
    let key = JobKey {
        task: &spec.task,
        model: &spec.model,
        cpt: &spec.cpt,
        sft: &spec.sft,
        eval: &spec.eval,
        cell,
    };
    let bytes = serde_json::to_vec(&key).expect("spec sections serialize to JSON");
    hex_digest(&bytes)
}

/// Runs one job, reusing its persisted outcome when present. Only successes
/// are persisted: failures are reported in the matrix and retried on re-run.
fn run_one(ctx: &RunCtx, cell: &CellSpec, seed: u64) -> SeedOutcome {
    let path = outcome_path(ctx, cell, seed);
    let digest = job_digest(ctx.spec, cell);
    if let Ok(text) = fs::read_to_string(&path) {
        if let Ok(outcome) = serde_json::from_str::<SeedOutcome>(&text) {
            if outcome.config == digest {
                return outcome;
            }
        }
    }
    let run = catch_unwind(AssertUnwindSafe(|| run_cell_seed(ctx, cell, seed)));
    let result = match run {
        Ok(r) => r,
        Err(payload) => Err(Error::Config(format!(
            "cell {:?} seed {seed} panicked: {}",
            cell.name,
            panic_text(payload)
        ))),
    };
    match result {
        Ok(bleu) => {
            let outcome = SeedOutcome {
                seed,
                bleu,
                config: digest,
                error: None,
            };
            if let Ok(mut bytes) = serde_json::to_vec_pretty(&outcome) {
                bytes.push(b'\n');
                let _ = fs::write(&path, bytes);
            }
            outcome
        }
        Err(e) => SeedOutcome {
            seed,
            bleu: BTreeMap::new(),
            config: digest,
            error: Some(e.to_string()),
        },
    }
}

/// Runs every (cell, seed) job and writes `matrix.json` plus an aligned
/// `matrix.txt` under `out_dir`. Failures are recorded per cell; siblings
/// keep running.
pub fn run_experiment_matrix(
    spec: &ExperimentSpec,
    out_dir: &Path,
    workers: usize,
) -> Result<ExperimentMatrix> {
    spec.validate()?;
    if workers == 0 {
        return Err(Error::Config("worker count must be at least 1".into()));
    }
    let cache_dir = out_dir.join("cache");
    let cells_dir = out_dir.join("cells");
    fs::create_dir_all(&cache_dir).map_err(Error::io(&cache_dir))?;
    fs::create_dir_all(&cells_dir).map_err(Error::io(&cells_dir))?;

    let mut data = BTreeMap::new();
    for &seed in &spec.seeds {
        data.insert(seed, Arc::new(seed_data(spec, seed)?));
    }
    let ctx = RunCtx {
        spec,
        cache_dir,
        cells_dir,
        data,
        locks: Mutex::new(HashMap::new()),
    };

    let queue: Mutex<VecDeque<(usize, u64)>> = Mutex::new(
        (0..spec.cells.len())
            .flat_map(|ci| spec.seeds.iter().map(move |&s| (ci, s)))
            .collect(),
    );
    let results: Mutex<BTreeMap<(usize, u64), SeedOutcome>> = Mutex::new(BTreeMap::new());
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = queue.lock().unwrap_or_else(PoisonError::into_inner).pop_front();
                let Some((ci, seed)) = job else { break };
                let outcome = run_one(&ctx, &spec.cells[ci], seed);
                results
                    .lock()
                    .unwrap_or_else(PoisonError::into_inner)
                    .insert((ci, seed), outcome);
            });
        }
    });
    let results = results.into_inner().unwrap_or_else(PoisonError::into_inner);

    let mut cells = Vec::with_capacity(spec.cells.len());
    for (ci, cell) in spec.cells.iter().enumerate() {
        let seeds: Vec<SeedOutcome> = spec.seeds.iter().map(|&s| results[&(ci, s)].clone()).collect();
        let failed = seeds.iter().any(|s| s.error.is_some());
        let mut sums: BTreeMap<String, (f64, usize)> = BTreeMap::new();
        for outcome in seeds.iter().filter(|s| s.error.is_none()) {
            for (dir, &bleu) in &outcome.bleu {
                let entry = sums.entry(dir.clone()).or_insert((0.0, 0));
                entry.0 += bleu;
                entry.1 += 1;
            }
        }
        let means = sums
            .into_iter()
            .map(|(dir, (sum, n))| (dir, sum / n as f64))
            .collect();
        cells.push(CellResult {
            name: cell.name.clone(),
            pipeline: cell.pipeline(),
            seeds,
            means,
            failed,
        });
    }
    let matrix = ExperimentMatrix {
        seeds: spec.seeds.clone(),
        cells,
    };
    matrix.save(&out_dir.join("matrix.json"))?;
    let table_path = out_dir.join("matrix.txt");
    fs::write(&table_path, matrix.render_table()).map_err(Error::io(&table_path))?;
    Ok(matrix)
}
