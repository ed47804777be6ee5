//! Command-line front end for the bilingual-pretraining toolkit: corpus
//! synthesis and filtering, pretraining-document construction, window
//! packing, fine-tuning data, training, translation, scoring, and full
//! experiment matrices.

mod args;

use std::fs;
use std::path::PathBuf;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};

use bitextlm_core::corpus::{load_pairs_auto, save_pairs, ParallelPair};
use bitextlm_core::eval::{corpus_bleu, paired_bootstrap, BleuConfig, PreTokenizer, Smoothing};
use bitextlm_core::experiment::{load_spec, run_experiment_matrix};
use bitextlm_core::filter::{
    band_filter, score_corpus, EmbeddingProvider, HashNgramEmbedder, PrecomputedEmbeddings,
    SimilarityBand,
};
use bitextlm_core::formats::{
    build_cpt_corpus, load_documents, replay_mix, save_documents, FormatSpec, MarkerFormat,
    MarkerKind, OrderingScheme,
};
use bitextlm_core::model::decode::greedy_decode;
use bitextlm_core::model::net::TrainExample;
use bitextlm_core::model::{ModelConfig, ModelParams};
use bitextlm_core::sft::{build_sft_example, few_shot_prompt, load_sft, save_sft, SftExample};
use bitextlm_core::synthetic::{cv_vocab, generate, invert_direction, SyntheticTask, SyntheticTaskSpec};
use bitextlm_core::tokenize::{encode_stream, load_packed, pack_windows, save_packed, BYTE_VOCAB_SIZE};
use bitextlm_core::train::{train_phase, Checkpoint, ScheduleKind, TrainConfig};

use crate::args::{AdapterArg, InitArg, ShotsArg, TemplateArg, TokenizerArg};

#[derive(Parser)]
#[command(name = "bitextlm", version, about = "Two-phase bilingual LM training toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic bilingual task corpus (both directions).
    Synth(SynthArgs),
    /// Keep pairs whose similarity falls inside a band.
    Filter(FilterArgs),
    /// Render parallel pairs into pretraining documents.
    BuildCpt(BuildCptArgs),
    /// Tokenize documents and pack fixed-length training windows.
    Pack(PackArgs),
    /// Tokenize prompt-masked fine-tuning examples.
    BuildSft(BuildSftArgs),
    /// Train one phase and write the best checkpoint.
    Train(TrainArgs),
    /// Greedy-decode translations for a pair file's source sides.
    Translate(TranslateArgs),
    /// Score hypotheses with corpus BLEU, optionally against a baseline.
    Evaluate(EvaluateArgs),
    /// Run a full experiment matrix from a TOML spec.
    Experiment(ExperimentArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum TaskChoice {
    SubstitutionCipher,
    WordReversal,
    CipherPlusReversal,
}

impl From<TaskChoice> for SyntheticTask {
    fn from(c: TaskChoice) -> Self {
        match c {
            TaskChoice::SubstitutionCipher => SyntheticTask::SubstitutionCipher,
            TaskChoice::WordReversal => SyntheticTask::WordReversal,
            TaskChoice::CipherPlusReversal => SyntheticTask::CipherPlusReversal,
        }
    }
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long)]
    task: TaskChoice,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out_dir: PathBuf,
    /// Vocabulary size (consonant-vowel words).
    #[arg(long, default_value_t = 32)]
    vocab: usize,
    #[arg(long, default_value_t = 3)]
    len_min: usize,
    #[arg(long, default_value_t = 8)]
    len_max: usize,
    #[arg(long, default_value_t = 20_000)]
    n_train: usize,
    #[arg(long, default_value_t = 500)]
    n_val: usize,
    #[arg(long, default_value_t = 500)]
    n_test: usize,
}

#[derive(clap::Args)]
struct FilterArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.4)]
    low: f64,
    #[arg(long, default_value_t = 0.95)]
    high: f64,
    /// Precomputed id->vector file; defaults to the built-in hashing embedder.
    #[arg(long)]
    vectors: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum FormatChoice {
    Interleaved,
    Prefixed,
    Tagged,
    Json,
}

impl From<FormatChoice> for MarkerKind {
    fn from(c: FormatChoice) -> Self {
        match c {
            FormatChoice::Interleaved => MarkerKind::Interleaved,
            FormatChoice::Prefixed => MarkerKind::Prefixed,
            FormatChoice::Tagged => MarkerKind::Tagged,
            FormatChoice::Json => MarkerKind::JsonWrapped,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum OrderingChoice {
    Mono,
    Ab,
    Ba,
    Mix,
}

#[derive(clap::Args)]
struct BuildCptArgs {
    #[arg(long)]
    format: FormatChoice,
    #[arg(long)]
    ordering: OrderingChoice,
    #[arg(long, default_value_t = 0.5)]
    mix_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Documents to replay into the output.
    #[arg(long)]
    replay: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01, requires = "replay")]
    replay_fraction: f64,
    #[arg(long)]
    in_ab: PathBuf,
    /// Reverse-direction pair file; derived by inverting --in-ab when omitted.
    #[arg(long)]
    in_ba: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct PackArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Window length in tokens.
    #[arg(long, default_value_t = 64)]
    context: usize,
    #[arg(long, default_value = "byte")]
    tokenizer: TokenizerArg,
}

#[derive(clap::Args)]
struct BuildSftArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    template: TemplateArg,
    #[arg(long, default_value = "byte")]
    tokenizer: TokenizerArg,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum PhaseChoice {
    Cpt,
    Sft,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ScheduleChoice {
    Cosine,
    InverseSqrt,
}

impl From<ScheduleChoice> for ScheduleKind {
    fn from(c: ScheduleChoice) -> Self {
        match c {
            ScheduleChoice::Cosine => ScheduleKind::Cosine,
            ScheduleChoice::InverseSqrt => ScheduleKind::InverseSqrt,
        }
    }
}

#[derive(clap::Args)]
struct TrainArgs {
    #[arg(long)]
    phase: PhaseChoice,
    /// Packed windows (cpt) or fine-tuning examples (sft).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    val: PathBuf,
    #[arg(long, default_value = "random")]
    init: InitArg,
    /// Peak learning rate; defaults to the phase's standard value.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    schedule: Option<ScheduleChoice>,
    #[arg(long)]
    warmup_ratio: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    grad_clip: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    validate_every: Option<usize>,
    /// Stop after this fraction of the schedule, keeping the full-horizon
    /// learning-rate curve; captures a mid-run checkpoint.
    #[arg(long)]
    stop_fraction: Option<f64>,
    /// Low-rank adapter settings, e.g. `r=16,alpha=32,dropout=0.05`.
    #[arg(long)]
    adapter: Option<AdapterArg>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Model shape for --init random (ignored when starting from a checkpoint).
    #[arg(long, default_value_t = 256)]
    context: usize,
    #[arg(long, default_value_t = 64)]
    embed: usize,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 256)]
    ffn: usize,
    #[arg(long, default_value_t = BYTE_VOCAB_SIZE)]
    vocab_size: usize,
}

#[derive(clap::Args)]
struct TranslateArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    template: TemplateArg,
    /// `0` or `K:PATH` taking the first K pairs of PATH as in-context examples.
    #[arg(long, default_value = "0")]
    shots: ShotsArg,
    /// Pair file whose source sides are translated.
    #[arg(long = "in")]
    input: PathBuf,
    /// Hypothesis output, one line per input pair.
    #[arg(long)]
    out: PathBuf,
    /// Also write the input's reference sides, line-aligned with --out.
    #[arg(long)]
    refs_out: Option<PathBuf>,
    #[arg(long, default_value = "byte")]
    tokenizer: TokenizerArg,
    #[arg(long, default_value_t = 128)]
    max_new: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum SmoothingChoice {
    None,
    AddOne,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum PreTokenizerChoice {
    Whitespace,
    Punct,
}

#[derive(clap::Args)]
struct EvaluateArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Second hypothesis file to test the first against.
    #[arg(long)]
    baseline: Option<PathBuf>,
    /// Bootstrap resamples for the significance test.
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = SmoothingChoice::None)]
    smoothing: SmoothingChoice,
    #[arg(long, value_enum, default_value_t = PreTokenizerChoice::Whitespace)]
    pre_tokenizer: PreTokenizerChoice,
}

#[derive(clap::Args)]
struct ExperimentArgs {
    #[arg(long)]
    spec: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Parallel cell jobs; defaults to the available CPU count.
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Synth(a) => run_synth(a),
        Command::Filter(a) => run_filter(a),
        Command::BuildCpt(a) => run_build_cpt(a),
        Command::Pack(a) => run_pack(a),
        Command::BuildSft(a) => run_build_sft(a),
        Command::Train(a) => run_train(a),
        Command::Translate(a) => run_translate(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Experiment(a) => run_experiment(a),
    }
}

fn run_synth(a: SynthArgs) -> anyhow::Result<()> {
    let spec = SyntheticTaskSpec {
        task: a.task.into(),
        vocab: cv_vocab(a.vocab),
        sentence_len_range: (a.len_min, a.len_max),
        n_train: a.n_train,
        n_val: a.n_val,
        n_test: a.n_test,
        seed: a.seed,
    };
    let data = generate(&spec)?;
    fs::create_dir_all(&a.out_dir)
        .with_context(|| format!("creating {}", a.out_dir.display()))?;
    for (split, corpus) in [("train", &data.train), ("val", &data.val), ("test", &data.test)] {
        let inverted = invert_direction(corpus);
        for view in [corpus, &inverted] {
            let path = a.out_dir.join(format!("{split}.{}.jsonl", view.direction()));
            save_pairs(view, &path)?;
            println!("{} pairs -> {}", view.len(), path.display());
        }
    }
    Ok(())
}

fn run_filter(a: FilterArgs) -> anyhow::Result<()> {
    let mut corpus = load_pairs_auto(&a.input)?;
    let provider: Box<dyn EmbeddingProvider> = match &a.vectors {
        Some(path) => Box::new(PrecomputedEmbeddings::load(path)?),
        None => Box::new(HashNgramEmbedder::new(128, 1, 3)?),
    };
    score_corpus(&mut corpus, provider.as_ref())?;
    let kept = band_filter(&corpus, SimilarityBand::new(a.low, a.high)?)?;
    save_pairs(&kept, &a.out)?;
    println!(
        "kept {} of {} pairs in [{}, {}) -> {}",
        kept.len(),
        corpus.len(),
        a.low,
        a.high,
        a.out.display()
    );
    Ok(())
}

fn run_build_cpt(a: BuildCptArgs) -> anyhow::Result<()> {
    let ab = load_pairs_auto(&a.in_ab)?;
    let ba = match &a.in_ba {
        Some(path) => load_pairs_auto(path)?,
        None => invert_direction(&ab),
    };
    let marker = MarkerFormat::auto(
        a.format.into(),
        &[ab.direction().clone(), ba.direction().clone()],
    );
    let ordering = match a.ordering {
        OrderingChoice::Mono => OrderingScheme::Mono,
        OrderingChoice::Ab => OrderingScheme::SingleDirection(ab.direction().clone()),
        OrderingChoice::Ba => OrderingScheme::SingleDirection(ba.direction().clone()),
        OrderingChoice::Mix => OrderingScheme::Mix {
            fraction: a.mix_fraction,
            seed: a.seed,
        },
    };
    let spec = FormatSpec::with_default_separator(ordering, marker)?;
    let mut docs = build_cpt_corpus(&ab, &ba, &spec)?;
    if let Some(replay_path) = &a.replay {
        let pool = load_documents(replay_path)?;
        docs = replay_mix(&docs, &pool, a.replay_fraction, a.seed)?;
    }
    save_documents(&docs, &a.out)?;
    println!("wrote {} documents -> {}", docs.len(), a.out.display());
    Ok(())
}

fn run_pack(a: PackArgs) -> anyhow::Result<()> {
    let docs = load_documents(&a.input)?;
    let tokenizer = a.tokenizer.build()?;
    let stream = encode_stream(&docs, tokenizer.as_ref())?;
    let windows = pack_windows(&stream, a.context)?;
    if windows.is_empty() {
        bail!(
            "stream of {} tokens yields no windows of length {}",
            stream.ids.len(),
            a.context
        );
    }
    save_packed(&windows, a.context as u32, &a.out)?;
    println!(
        "packed {} tokens into {} windows of {} -> {}",
        stream.ids.len(),
        windows.len(),
        a.context,
        a.out.display()
    );
    Ok(())
}

fn run_build_sft(a: BuildSftArgs) -> anyhow::Result<()> {
    let corpus = load_pairs_auto(&a.input)?;
    let template = a.template.load()?;
    let tokenizer = a.tokenizer.build()?;
    let examples: Vec<SftExample> = corpus
        .iter()
        .map(|pair| build_sft_example(pair, &template, tokenizer.as_ref()))
        .collect::<bitextlm_core::Result<_>>()?;
    save_sft(&examples, &a.out)?;
    println!("wrote {} examples -> {}", examples.len(), a.out.display());
    Ok(())
}

fn run_train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = match a.phase {
        PhaseChoice::Cpt => TrainConfig::cpt_default(),
        PhaseChoice::Sft => TrainConfig::sft_default(),
    };
    cfg.seed = a.seed;
    if let Some(lr) = a.lr {
        cfg.peak_lr = lr;
    }
    if let Some(s) = a.schedule {
        cfg.schedule = s.into();
    }
    if let Some(x) = a.warmup_ratio {
        cfg.warmup_ratio = x;
    }
    if let Some(x) = a.weight_decay {
        cfg.weight_decay = x;
    }
    if let Some(x) = a.grad_clip {
        cfg.grad_clip = x;
    }
    if let Some(x) = a.batch_size {
        cfg.batch_size = x;
    }
    if let Some(x) = a.epochs {
        cfg.epochs = x;
    }
    if let Some(x) = a.validate_every {
        cfg.validate_every = x;
    }
    if let Some(x) = a.stop_fraction {
        cfg.stop_fraction = x;
    }
    cfg.adapter = a.adapter.map(|arg| arg.0);

    let (data, val) = match a.phase {
        PhaseChoice::Cpt => {
            let load = |path: &PathBuf| -> anyhow::Result<Vec<TrainExample>> {
                let (_, windows) = load_packed(path)?;
                Ok(windows
                    .iter()
                    .map(TrainExample::from_window)
                    .collect::<bitextlm_core::Result<_>>()?)
            };
            (load(&a.data)?, load(&a.val)?)
        }
        PhaseChoice::Sft => {
            let load = |path: &PathBuf| -> anyhow::Result<Vec<TrainExample>> {
                Ok(load_sft(path)?
                    .iter()
                    .map(TrainExample::from_sft)
                    .collect::<bitextlm_core::Result<_>>()?)
            };
            (load(&a.data)?, load(&a.val)?)
        }
    };

    let params = match &a.init {
        InitArg::Random => {
            let model_cfg = ModelConfig {
                vocab_size: a.vocab_size,
                context_len: a.context,
                embed_dim: a.embed,
                n_layers: a.layers,
                n_heads: a.heads,
                ffn_dim: a.ffn,
                seed: a.seed,
            };
            ModelParams::<f32>::init(model_cfg)?
        }
        InitArg::Ckpt(path) => Checkpoint::load(path)?.params,
    };

    let checkpoint = train_phase(params, &data, &val, &cfg)?;
    checkpoint.save(&a.out)?;
    println!(
        "best checkpoint at step {} with validation loss {:.6} -> {}",
        checkpoint.step,
        checkpoint.validation_loss,
        a.out.display()
    );
    Ok(())
}

fn run_translate(a: TranslateArgs) -> anyhow::Result<()> {
    let params = Checkpoint::load(&a.ckpt)?.params;
    let template = a.template.load()?;
    let tokenizer = a.tokenizer.build()?;
    let corpus = load_pairs_auto(&a.input)?;
    let examples: Vec<ParallelPair> = match &a.shots {
        ShotsArg::Zero => Vec::new(),
        ShotsArg::Few(k, path) => {
            let shot_corpus = load_pairs_auto(path)?;
            if shot_corpus.len() < *k {
                bail!(
                    "asked for {k} shots but {} has only {} pairs",
                    path.display(),
                    shot_corpus.len()
                );
            }
            shot_corpus.pairs()[..*k].to_vec()
        }
    };
    let mut hyp_lines = String::new();
    let mut ref_lines = String::new();
    for pair in corpus.iter() {
        let prompt = few_shot_prompt(&examples, pair, &template)?;
        let prompt_ids = tokenizer.encode(&prompt)?;
        let generated = greedy_decode(&params, &prompt_ids, tokenizer.eos_id(), a.max_new)?;
        let text = tokenizer.decode(&generated)?;
        // Few-shot continuations run past the answer; keep the first line.
        hyp_lines.push_str(text.split('\n').next().unwrap_or("").trim());
        hyp_lines.push('\n');
        ref_lines.push_str(&pair.target_text);
        ref_lines.push('\n');
    }
    fs::write(&a.out, hyp_lines).with_context(|| format!("writing {}", a.out.display()))?;
    println!("translated {} pairs -> {}", corpus.len(), a.out.display());
    if let Some(path) = &a.refs_out {
        fs::write(path, ref_lines).with_context(|| format!("writing {}", path.display()))?;
        println!("references -> {}", path.display());
    }
    Ok(())
}

fn read_lines(path: &PathBuf) -> anyhow::Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text.lines().map(str::to_string).collect())
}

fn run_evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let hyp = read_lines(&a.hyp)?;
    let refs = read_lines(&a.reference)?;
    let cfg = BleuConfig {
        smoothing: match a.smoothing {
            SmoothingChoice::None => Smoothing::None,
            SmoothingChoice::AddOne => Smoothing::AddOne,
        },
        pre_tokenizer: match a.pre_tokenizer {
            PreTokenizerChoice::Whitespace => PreTokenizer::Whitespace,
            PreTokenizerChoice::Punct => PreTokenizer::Punct,
        },
    };
    let report = corpus_bleu(&hyp, &refs, cfg)?;
    let output = match &a.baseline {
        None => serde_json::to_string_pretty(&report)?,
        Some(path) => {
            let baseline = read_lines(path)?;
            let baseline_report = corpus_bleu(&baseline, &refs, cfg)?;
            let significance = paired_bootstrap(&hyp, &baseline, &refs, cfg, a.bootstrap, a.seed)?;
            serde_json::to_string_pretty(&serde_json::json!({
                "system": report,
                "baseline": baseline_report,
                "significance": significance,
                "significant_at_0.05": significance.significant(0.05),
            }))?
        }
    };
    println!("{output}");
    Ok(())
}

fn run_experiment(a: ExperimentArgs) -> anyhow::Result<()> {
    let spec = load_spec(&a.spec)?;
    let workers = a.workers.unwrap_or_else(|| {
        std::thread::available_parallelism().map_or(1, usize::from)
    });
    let matrix = run_experiment_matrix(&spec, &a.out, workers)?;
    print!("{}", matrix.render_table());
    let failed: Vec<&str> = matrix
        .cells
        .iter()
        .filter(|c| c.failed)
        .map(|c| c.name.as_str())
        .collect();
    if !failed.is_empty() {
        bail!("cells failed: {}", failed.join(", "));
    }
    Ok(())
}
