//! Two-phase training: the pre-training phase consumes packed windows, the
//! fine-tuning phase consumes masked examples, and both run the same loop:
//! decoupled-weight-decay Adam with bias correction, global gradient-norm
//! clipping, linear warmup into a cosine or inverse-square-root decay, and
//! periodic validation with minimum-validation-loss checkpoint selection.
//!
//! Per-batch gradients are computed per example (in parallel chunks) and
//! reduced in a fixed order, so a training run is bit-identical for a given
//! seed regardless of thread count.
//!
//! Checkpoint file layout (little-endian): magic `BFCK`, version u16, step
//! u64, validation loss f64, config JSON (u32 length + bytes), adapter flag
//! u8 (1 = adapter JSON follows, same framing), then every parameter as f32
//! in declared order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::net::{example_grad, mean_nll, TrainExample};
use crate::model::{AdapterConfig, ModelConfig, ModelParams};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BFCK";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Examples per parallel gradient chunk; chunk results are summed in order.
const GRAD_CHUNK: usize = 4;
/// Mixes the epoch number into the shuffle seed.
const EPOCH_SEED_MIX: u64 = 0x9E37_79B9_7F4A_7C15;
/// Distinguishes per-example dropout streams from other seeded streams.
const DROPOUT_SEED_MIX: u64 = 0xD1B5_4A32_D192_ED03;

/// Desk-scale default peak learning rates (tiny models tolerate larger steps).
pub const DESK_CPT_LR: f64 = 1.5e-3;
pub const DESK_SFT_LR: f64 = 3e-4;
/// Production-scale reference values, selectable via `peak_lr`.
pub const FULL_SCALE_CPT_LR: f64 = 1.5e-4;
pub const FULL_SCALE_SFT_LR: f64 = 3e-5;
pub const FULL_SCALE_SFT_ADAPTER_LR: f64 = 2e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Cpt,
    Sft,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Cosine,
    InverseSqrt,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase: Phase,
    pub peak_lr: f64,
    pub warmup_ratio: f64,
    pub schedule: ScheduleKind,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this fraction of the schedule, keeping the full-horizon
    /// learning-rate curve. Values below 1 capture a mid-run checkpoint: the
    /// result is bit-identical to the same run interrupted at that step.
    #[serde(default = "full_run")]
    pub stop_fraction: f64,
    pub validate_every: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adapter: Option<AdapterConfig>,
    pub seed: u64,
}

fn full_run() -> f64 {
    1.0
}

impl TrainConfig {
    /// Pre-training defaults: one epoch, cosine decay, 1% warmup.
    pub fn cpt_default() -> Self {
        TrainConfig {
            phase: Phase::Cpt,
            peak_lr: DESK_CPT_LR,
            warmup_ratio: 0.01,
            schedule: ScheduleKind::Cosine,
            weight_decay: 0.1,
            grad_clip: 1.0,
            batch_size: 8,
            epochs: 1,
            stop_fraction: 1.0,
            validate_every: 100,
            beta1: 0.9,
            beta2: 0.95,
            adapter: None,
            seed: 0,
        }
    }

    /// Fine-tuning defaults: more epochs over less data, slower second moment.
    pub fn sft_default() -> Self {
        TrainConfig {
            phase: Phase::Sft,
            peak_lr: DESK_SFT_LR,
            epochs: 3,
            beta2: 0.999,
            ..TrainConfig::cpt_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak_lr > 0.0) {
            return Err(Error::Config(format!("peak_lr {} must be > 0", self.peak_lr)));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio {} outside [0, 1)",
                self.warmup_ratio
            )));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::Config(format!(
                "grad_clip {} must be > 0",
                self.grad_clip
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(Error::Config(format!(
                "weight_decay {} must be >= 0",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 || self.validate_every == 0 {
            return Err(Error::Config(
                "batch_size and validate_every must be at least 1".into(),
            ));
        }
        if !(self.stop_fraction > 0.0 && self.stop_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "stop_fraction {} outside (0, 1]",
                self.stop_fraction
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} {b} outside [0, 1)")));
            }
        }
        if let Some(a) = &self.adapter {
            a.validate()?;
        }
        Ok(())
    }
}

/// Learning-rate schedule: linear warmup to `peak` at step `warmup_steps`,
/// then the configured decay over the remaining steps.
#[derive(Debug, Clone)]
pub struct Schedule {
    pub kind: ScheduleKind,
    pub peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl Schedule {
    pub fn new(kind: ScheduleKind, peak: f64, warmup_ratio: f64, total_steps: usize) -> Self {
        let warmup_steps = (warmup_ratio * total_steps as f64).ceil() as usize;
        Schedule {
            kind,
            peak,
            warmup_steps,
            total_steps,
        }
    }

    /// Learning rate at a zero-based step index.
    pub fn lr(&self, step: usize) -> f64 {
        let w = self.warmup_steps;
        if w > 0 && step < w {
            return self.peak * step as f64 / w as f64;
        }
        match self.kind {
            ScheduleKind::Cosine => {
                if self.total_steps <= w {
                    return self.peak;
                }
                let progress = (step - w) as f64 / (self.total_steps - w) as f64;
                self.peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
            }
            ScheduleKind::InverseSqrt => {
                let w = w.max(1) as f64;
                let t = (step as f64).max(w);
                self.peak * (w / t).sqrt()
            }
        }
    }
}

/// A training snapshot: parameters plus the validation loss they achieved.
#[derive(Debug, Clone)]
pub struct Checkpoint<F> {
    pub params: ModelParams<F>,
    pub step: u64,
    pub validation_loss: f64,
}

fn write_json_block(w: &mut impl Write, value: &impl Serialize, path: &Path) -> Result<()> {
    let bytes = serde_json::to_vec(value).map_err(|e| Error::file(path, e.to_string()))?;
    w.write_all(&(bytes.len() as u32).to_le_bytes()).map_err(Error::io(path))?;
    w.write_all(&bytes).map_err(Error::io(path))
}

fn read_json_block<T: serde::de::DeserializeOwned>(r: &mut impl Read, path: &Path) -> Result<T> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(Error::io(path))?;
    let mut bytes = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut bytes).map_err(Error::io(path))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::file(path, format!("bad header: {e}")))
}

impl<F: Scalar> Checkpoint<F> {
    /// Writes the checkpoint; parameters are stored as f32 regardless of the
    /// in-memory precision.
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(Error::io(path))?;
        let mut w = BufWriter::new(file);
        w.write_all(CHECKPOINT_MAGIC).map_err(Error::io(path))?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(Error::io(path))?;
        w.write_all(&self.step.to_le_bytes()).map_err(Error::io(path))?;
        w.write_all(&self.validation_loss.to_le_bytes()).map_err(Error::io(path))?;
        write_json_block(&mut w, &self.params.config, path)?;
        match &self.params.adapter {
            Some(a) => {
                w.write_all(&[1]).map_err(Error::io(path))?;
                write_json_block(&mut w, a, path)?;
            }
            None => w.write_all(&[0]).map_err(Error::io(path))?,
        }
        w.write_all(&(self.params.data.len() as u64).to_le_bytes())
            .map_err(Error::io(path))?;
        for &v in &self.params.data {
            w.write_all(&(v.to_f64() as f32).to_le_bytes()).map_err(Error::io(path))?;
        }
        w.flush().map_err(Error::io(path))
    }
}

impl Checkpoint<f32> {
    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(Error::io(path))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(Error::io(path))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::file(path, format!("bad magic {magic:?}, want BFCK")));
        }
        let mut buf2 = [0u8; 2];
        r.read_exact(&mut buf2).map_err(Error::io(path))?;
        let version = u16::from_le_bytes(buf2);
        if version != CHECKPOINT_VERSION {
            return Err(Error::file(
                path,
                format!("unsupported version {version}, want {CHECKPOINT_VERSION}"),
            ));
        }
        let mut buf8 = [0u8; 8];
        r.read_exact(&mut buf8).map_err(Error::io(path))?;
        let step = u64::from_le_bytes(buf8);
        r.read_exact(&mut buf8).map_err(Error::io(path))?;
        let validation_loss = f64::from_le_bytes(buf8);
        let config: ModelConfig = read_json_block(&mut r, path)?;
        config.validate().map_err(|e| Error::file(path, e.to_string()))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag).map_err(Error::io(path))?;
        let adapter: Option<AdapterConfig> = match flag[0] {
            0 => None,
            1 => Some(read_json_block(&mut r, path)?),
            other => return Err(Error::file(path, format!("bad adapter flag {other}"))),
        };
        let index = crate::model::ParamIndex::build(&config, adapter.as_ref());
        r.read_exact(&mut buf8).map_err(Error::io(path))?;
        let count = u64::from_le_bytes(buf8) as usize;
        if count != index.total {
            return Err(Error::file(
                path,
                format!("{count} parameters stored, layout wants {}", index.total),
            ));
        }
        let mut raw = vec![0u8; count * 4];
        r.read_exact(&mut raw).map_err(Error::io(path))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::file(path, "non-finite parameter value"));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(Error::io(path))? != 0 {
            return Err(Error::file(path, "trailing data after parameters"));
        }
        Ok(Checkpoint {
            params: ModelParams {
                config,
                adapter,
                index,
                data,
            },
            step,
            validation_loss,
        })
    }
}

fn dropout_rng_for(seed: u64, step: u64, slot: u64) -> ChaCha8Rng {
    let mixed = seed
        ^ step.wrapping_mul(EPOCH_SEED_MIX)
        ^ slot.wrapping_mul(DROPOUT_SEED_MIX).wrapping_add(1);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Runs one training phase and returns the minimum-validation-loss snapshot
/// (validation runs before the first step, every `validate_every` steps, and
/// after the last step).
pub fn train_phase<F: Scalar>(
    mut params: ModelParams<F>,
    data: &[TrainExample],
    val: &[TrainExample],
    cfg: &TrainConfig,
) -> Result<Checkpoint<F>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid {
            what: "training data",
            msg: "no examples".into(),
        });
    }
    if val.is_empty() {
        return Err(Error::Invalid {
            what: "validation data",
            msg: "no examples".into(),
        });
    }
    match (&cfg.adapter, &params.adapter) {
        (Some(want), None) => params.apply_adapters(want.clone())?,
        (Some(want), Some(have)) if want != have => {
            return Err(Error::Config(
                "checkpoint adapter configuration differs from requested".into(),
            ));
        }
        _ => {}
    }
    let accumulate_base = params.adapter.is_none();
    let use_dropout = params
        .adapter
        .as_ref()
        .is_some_and(|a| a.dropout > 0.0);

    let steps_per_epoch = data.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * steps_per_epoch;
    // The schedule always spans the full horizon so a fractional run is a
    // true prefix of the full one.
    let schedule = Schedule::new(cfg.schedule, cfg.peak_lr, cfg.warmup_ratio, total_steps);
    let stop_step = (cfg.stop_fraction * total_steps as f64).ceil() as u64;

    let trainable = params.trainable_range();
    let mut m = vec![F::zero(); trainable.len()];
    let mut v = vec![F::zero(); trainable.len()];

    let initial_loss = mean_nll(&params, val)?.to_f64();
    log::info!("step 0/{total_steps}: validation loss {initial_loss:.6}");
    let mut best = Checkpoint {
        params: params.clone(),
        step: 0,
        validation_loss: initial_loss,
    };
    if !initial_loss.is_finite() {
        return Err(Error::Diverged {
            step: 0,
            last_finite_step: 0,
            last_finite_loss: f64::NAN,
        });
    }

    let mut step = 0u64;
    let mut last_finite = (0u64, initial_loss);
    let mut order: Vec<usize> = (0..data.len()).collect();
    'train: for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (epoch as u64).wrapping_mul(EPOCH_SEED_MIX),
        );
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            // Per-example gradients in parallel chunks; dropout streams are
            // seeded by (step, batch slot), so the result is identical no
            // matter how the chunks are scheduled.
            let chunk_results: Vec<Result<(Vec<F>, F, usize)>> = batch
                .par_chunks(GRAD_CHUNK)
                .enumerate()
                .map(|(chunk_i, chunk)| {
                    let mut grad = vec![F::zero(); params.index.total];
                    let mut loss_sum = F::zero();
                    let mut count = 0usize;
                    for (j, &ex_i) in chunk.iter().enumerate() {
                        let slot = (chunk_i * GRAD_CHUNK + j) as u64;
                        let mut drng = use_dropout.then(|| dropout_rng_for(cfg.seed, step, slot));
                        let (l, c) = example_grad(
                            &params,
                            &data[ex_i],
                            &mut grad,
                            accumulate_base,
                            drng.as_mut(),
                        )?;
                        loss_sum += l;
                        count += c;
                    }
                    Ok((grad, loss_sum, count))
                })
                .collect();

            let mut grad = vec![F::zero(); params.index.total];
            let mut loss_sum = F::zero();
            let mut count = 0usize;
            for res in chunk_results {
                let (g, l, c) = res?;
                for (a, &b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
                loss_sum += l;
                count += c;
            }
            if count == 0 {
                return Err(Error::Invalid {
                    what: "training batch",
                    msg: "no supervised positions".into(),
                });
            }
            let batch_loss = loss_sum.to_f64() / count as f64;
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    step: step + 1,
                    last_finite_step: last_finite.0,
                    last_finite_loss: last_finite.1,
                });
            }
            last_finite = (step + 1, batch_loss);

            // Mean over supervised positions, then global norm clipping.
            let inv_count = F::from_f64(1.0 / count as f64);
            for g in &mut grad[trainable.clone()] {
                *g *= inv_count;
            }
            let norm = grad[trainable.clone()]
                .iter()
                .map(|&g| {
                    let g = Scalar::to_f64(g);
                    g * g
                })
                .sum::<f64>()
                .sqrt();
            if norm > cfg.grad_clip {
                let scale = F::from_f64(cfg.grad_clip / norm);
                for g in &mut grad[trainable.clone()] {
                    *g *= scale;
                }
            }

            let lr = schedule.lr(step as usize);
            step += 1;
            let t = step as i32;
            let b1 = F::from_f64(cfg.beta1);
            let b2 = F::from_f64(cfg.beta2);
            let one_m_b1 = F::one() - b1;
            let one_m_b2 = F::one() - b2;
            let bc1 = F::from_f64(1.0 - cfg.beta1.powi(t));
            let bc2 = F::from_f64(1.0 - cfg.beta2.powi(t));
            let lr_f = F::from_f64(lr);
            let wd = F::from_f64(cfg.weight_decay);
            let eps = F::from_f64(1e-8);
            for (i, off) in trainable.clone().enumerate() {
                let g = grad[off];
                m[i] = b1 * m[i] + one_m_b1 * g;
                v[i] = b2 * v[i] + one_m_b2 * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let theta = params.data[off];
                params.data[off] = theta - lr_f * (m_hat / (v_hat.sqrt() + eps) + wd * theta);
            }
            log::debug!("step {step}/{total_steps}: batch loss {batch_loss:.6}, lr {lr:.3e}");

            if step % cfg.validate_every as u64 == 0 || step == stop_step {
                let val_loss = mean_nll(&params, val)?.to_f64();
                log::info!("step {step}/{total_steps}: validation loss {val_loss:.6}");
                if !val_loss.is_finite() {
                    return Err(Error::Diverged {
                        step,
                        last_finite_step: last_finite.0,
                        last_finite_loss: last_finite.1,
                    });
                }
                if val_loss < best.validation_loss {
                    best = Checkpoint {
                        params: params.clone(),
                        step,
                        validation_loss: val_loss,
                    };
                }
            }
            if step >= stop_step {
                break 'train;
            }
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::net::logits_only;
    use crate::model::AdapterTarget;
    use crate::tokenize::PackedWindow;

    fn tiny_config(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            context_len: 16,
            embed_dim: 16,
            n_layers: 1,
            n_heads: 2,
            ffn_dim: 32,
            seed,
        }
    }

    /// Windows over the endlessly repeating sequence 1 2 3 4 5.
    fn repetitive_windows(n: usize, c: usize) -> Vec<TrainExample> {
        let stream: Vec<u32> = (0..n * c + 1).map(|i| (i % 5 + 1) as u32).collect();
        (0..n)
            .map(|k| {
                TrainExample::from_window(&PackedWindow {
                    input_ids: stream[k * c..k * c + c].to_vec(),
                    target_ids: stream[k * c + 1..k * c + c + 1].to_vec(),
                })
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn schedule_warmup_and_cosine_shape() {
        let s = Schedule::new(ScheduleKind::Cosine, 1e-3, 0.01, 200);
        assert_eq!(s.warmup_steps, 2);
        assert_eq!(s.lr(0), 0.0);
        assert_eq!(s.lr(1), 0.5e-3);
        assert_eq!(s.lr(2), 1e-3, "peak reached at ceil(0.01 * 200)");
        let mut prev = s.lr(2);
        for step in 3..200 {
            let lr = s.lr(step);
            assert!(lr <= prev + 1e-15, "cosine increased at step {step}");
            prev = lr;
        }
        assert!(s.lr(199) < 1e-4, "end of cosine near zero, got {}", s.lr(199));
    }

    #[test]
    fn schedule_inverse_sqrt_shape() {
        let s = Schedule::new(ScheduleKind::InverseSqrt, 1e-3, 0.05, 400);
        assert_eq!(s.warmup_steps, 20);
        assert_eq!(s.lr(20), 1e-3);
        assert!((s.lr(80) - 0.5e-3).abs() < 1e-12, "lr(4w) = peak/2");
        let s0 = Schedule::new(ScheduleKind::InverseSqrt, 1e-3, 0.0, 100);
        assert_eq!(s0.lr(0), 1e-3, "no warmup starts at peak");
        assert!(s0.lr(99) < s0.lr(1));
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let params = ModelParams::<f32>::init(tiny_config(1)).unwrap();
        let data = repetitive_windows(4, 8);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::cpt_default()
        };
        let ckpt = train_phase(params.clone(), &data, &data, &cfg).unwrap();
        assert_eq!(ckpt.params.data, params.data);
        assert_eq!(ckpt.step, 0);
        assert!(ckpt.validation_loss.is_finite());
    }

    #[test]
    fn loss_halves_on_repetitive_stream() {
        let params = ModelParams::<f32>::init(tiny_config(2)).unwrap();
        let data = repetitive_windows(16, 8);
        let before = mean_nll(&params, &data).unwrap();
        let cfg = TrainConfig {
            peak_lr: 3e-3,
            epochs: 100, // 2 steps per epoch at batch 8 -> 200 steps
            validate_every: 50,
            ..TrainConfig::cpt_default()
        };
        let ckpt = train_phase(params, &data, &data, &cfg).unwrap();
        let after = mean_nll(&ckpt.params, &data).unwrap();
        assert!(
            after < 0.5 * before,
            "loss went from {before} to {after}, wanted at least half"
        );
        assert!(ckpt.validation_loss <= before as f64);
    }

    #[test]
    fn same_seed_gives_bit_identical_checkpoints() {
        let data = repetitive_windows(8, 8);
        let cfg = TrainConfig {
            epochs: 4,
            validate_every: 2,
            ..TrainConfig::cpt_default()
        };
        let run = || {
            let params = ModelParams::<f32>::init(tiny_config(3)).unwrap();
            train_phase(params, &data, &data[..2], &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.params.data, b.params.data);
        assert_eq!(a.step, b.step);
        assert_eq!(a.validation_loss, b.validation_loss);

        let other = {
            let params = ModelParams::<f32>::init(tiny_config(3)).unwrap();
            let cfg = TrainConfig { seed: 99, ..cfg.clone() };
            train_phase(params, &data, &data[..2], &cfg).unwrap()
        };
        assert_ne!(a.params.data, other.params.data, "shuffle seed had no effect");
    }

    #[test]
    fn fractional_stop_captures_a_mid_run_checkpoint() {
        let data = repetitive_windows(8, 8); // 1 step per epoch at batch 8
        // Validation lands only on the forced stop-step check, so the
        // returned checkpoint is exactly the state at the stop step.
        let base = TrainConfig {
            peak_lr: 5e-3,
            epochs: 8,
            validate_every: 1000,
            ..TrainConfig::cpt_default()
        };
        let run = |stop: f64| {
            let cfg = TrainConfig {
                stop_fraction: stop,
                ..base.clone()
            };
            let params = ModelParams::<f32>::init(tiny_config(7)).unwrap();
            train_phase(params, &data, &data[..2], &cfg).unwrap()
        };
        let half = run(0.5);
        assert_eq!(half.step, 4, "stopped after half of 8 steps");
        let full = run(1.0);
        assert_eq!(full.step, 8);
        assert_ne!(half.params.data, full.params.data);
        // Same fraction, same trajectory.
        let again = run(0.5);
        assert_eq!(half.params.data, again.params.data);
        assert_eq!(half.validation_loss, again.validation_loss);

        let bad = TrainConfig {
            stop_fraction: 0.0,
            ..base
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn adapter_training_is_deterministic_under_dropout() {
        let data = repetitive_windows(8, 8);
        let cfg = TrainConfig {
            epochs: 3,
            adapter: Some(AdapterConfig {
                dropout: 0.3,
                ..AdapterConfig::default()
            }),
            ..TrainConfig::sft_default()
        };
        let run = || {
            let params = ModelParams::<f32>::init(tiny_config(4)).unwrap();
            train_phase(params, &data, &data[..2], &cfg).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.params.data, b.params.data);
    }

    #[test]
    fn adapter_training_freezes_base_bitwise() {
        let params = ModelParams::<f32>::init(tiny_config(5)).unwrap();
        let base_snapshot = params.data.clone();
        let data = repetitive_windows(8, 8);
        let cfg = TrainConfig {
            epochs: 5,
            adapter: Some(AdapterConfig::default()),
            ..TrainConfig::sft_default()
        };
        let ckpt = train_phase(params, &data, &data[..2], &cfg).unwrap();
        let split = ckpt.params.index.adapter_start;
        assert_eq!(&ckpt.params.data[..split], &base_snapshot[..]);
        assert!(
            ckpt.params.data[split..].iter().any(|&v| v != 0.0),
            "adapters never moved"
        );
        // The checkpoint must decode with its adapters applied.
        assert_eq!(
            ckpt.params.adapter.as_ref().map(|a| a.targets.clone()),
            Some(vec![AdapterTarget::Query, AdapterTarget::Key, AdapterTarget::Value])
        );
    }

    #[test]
    fn divergence_is_reported_with_last_finite_step() {
        let params = ModelParams::<f32>::init(tiny_config(6)).unwrap();
        let data = repetitive_windows(8, 8);
        let cfg = TrainConfig {
            peak_lr: 1e9,
            warmup_ratio: 0.0,
            grad_clip: 1e9,
            epochs: 50,
            ..TrainConfig::cpt_default()
        };
        match train_phase(params, &data, &data[..2], &cfg) {
            Err(Error::Diverged {
                step,
                last_finite_step,
                last_finite_loss,
            }) => {
                assert!(step > last_finite_step || last_finite_step == 0);
                assert!(last_finite_loss.is_finite() || last_finite_step == 0);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let mut params = ModelParams::<f32>::init(tiny_config(7)).unwrap();
        params.apply_adapters(AdapterConfig::default()).unwrap();
        let ckpt = Checkpoint {
            params,
            step: 123,
            validation_loss: 1.25,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.params.data, ckpt.params.data);
        assert_eq!(loaded.step, 123);
        assert_eq!(loaded.validation_loss, 1.25);
        assert_eq!(loaded.params.config, ckpt.params.config);
        assert_eq!(loaded.params.adapter, ckpt.params.adapter);

        // Loaded checkpoints produce identical logits.
        let ids = [1u32, 2, 3];
        assert_eq!(
            logits_only(&ckpt.params, &ids).unwrap().data,
            logits_only(&loaded.params, &ids).unwrap().data
        );
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let params = ModelParams::<f32>::init(tiny_config(8)).unwrap();
        let ckpt = Checkpoint {
            params,
            step: 1,
            validation_loss: 2.0,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let good = std::fs::read(&path).unwrap();

        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        assert!(Checkpoint::load(&path).is_err(), "truncated");

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(Checkpoint::load(&path).is_err(), "bad magic");

        let mut extended = good.clone();
        extended.push(0);
        std::fs::write(&path, &extended).unwrap();
        assert!(Checkpoint::load(&path).is_err(), "trailing data");
    }

    #[test]
    fn config_validation_rejects_bad_values() {
        let mut cfg = TrainConfig::cpt_default();
        cfg.peak_lr = 0.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::cpt_default();
        cfg.warmup_ratio = 1.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::cpt_default();
        cfg.grad_clip = -1.0;
        assert!(cfg.validate().is_err());
        cfg = TrainConfig::cpt_default();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        assert!(TrainConfig::cpt_default().validate().is_ok());
        assert!(TrainConfig::sft_default().validate().is_ok());
    }

    #[test]
    fn empty_data_or_validation_is_rejected() {
        let params = ModelParams::<f32>::init(tiny_config(9)).unwrap();
        let data = repetitive_windows(2, 8);
        let cfg = TrainConfig::cpt_default();
        assert!(train_phase(params.clone(), &[], &data, &cfg).is_err());
        assert!(train_phase(params, &data, &[], &cfg).is_err());
    }
}
