//! Greedy decoding with a per-layer key/value cache.
//!
//! [`forward_step`] feeds one token and reuses the cached keys and values of
//! all earlier positions, so decoding n tokens costs O(n²·d) instead of the
//! O(n³·d) of re-running the full forward pass per step. Every arithmetic
//! loop mirrors the batch forward's accumulation order, so the two paths
//! produce identical logits.

use super::math::{gelu, softmax_prefix, LN_EPS};
use super::{AdapterTarget, ModelParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Grow-only row store for cached keys and values.
#[derive(Debug, Clone)]
struct RowBuf<F> {
    cols: usize,
    data: Vec<F>,
}

impl<F: Scalar> RowBuf<F> {
    fn new(cols: usize) -> Self {
        RowBuf { cols, data: Vec::new() }
    }

    fn len(&self) -> usize {
        self.data.len() / self.cols
    }

    fn push(&mut self, row: &[F]) {
        debug_assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
    }

    fn row(&self, i: usize) -> &[F] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Incremental decoding state: cached keys and values per layer.
#[derive(Debug, Clone)]
pub struct DecodeState<F> {
    k: Vec<RowBuf<F>>,
    v: Vec<RowBuf<F>>,
}

impl<F: Scalar> DecodeState<F> {
    pub fn new(params: &ModelParams<F>) -> Self {
        let d = params.config.embed_dim;
        DecodeState {
            k: (0..params.config.n_layers).map(|_| RowBuf::new(d)).collect(),
            v: (0..params.config.n_layers).map(|_| RowBuf::new(d)).collect(),
        }
    }

    /// Number of positions already fed.
    pub fn len(&self) -> usize {
        self.k.first().map_or(0, RowBuf::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn ln_row<F: Scalar>(x: &[F], g: &[F], b: &[F]) -> Vec<F> {
    let d = F::from_f64(x.len() as f64);
    let eps = F::from_f64(LN_EPS);
    let mut mean = F::zero();
    for &v in x {
        mean += v;
    }
    mean /= d;
    let mut var = F::zero();
    for &v in x {
        let c = v - mean;
        var += c * c;
    }
    var /= d;
    let rstd = (var + eps).sqrt().recip();
    x.iter()
        .zip(g.iter().zip(b))
        .map(|(&v, (&g, &b))| g * (v - mean) * rstd + b)
        .collect()
}

fn affine_row<F: Scalar>(x: &[F], w: &[F], b: &[F], d_out: usize) -> Vec<F> {
    let d_in = x.len();
    debug_assert_eq!(w.len(), d_out * d_in);
    let mut y = Vec::with_capacity(d_out);
    for j in 0..d_out {
        let w_row = &w[j * d_in..(j + 1) * d_in];
        let mut acc = if b.is_empty() { F::zero() } else { b[j] };
        for t in 0..d_in {
            acc += x[t] * w_row[t];
        }
        y.push(acc);
    }
    y
}

/// Base affine plus adapter path (evaluation mode; no dropout).
fn adapted_row<F: Scalar>(
    params: &ModelParams<F>,
    layer: usize,
    target: AdapterTarget,
    x: &[F],
    w: &[F],
    b: &[F],
    d_out: usize,
) -> Vec<F> {
    let mut y = affine_row(x, w, b, d_out);
    if let Some(aix) = params.index.adapter_for(layer, target) {
        let cfg = params.adapter.as_ref().expect("adapter index implies config");
        let scale = F::from_f64(cfg.scale());
        let mid = affine_row(x, params.p(&aix.a), &[], cfg.r);
        let delta = affine_row(&mid, params.p(&aix.b), &[], d_out);
        for (yv, &dv) in y.iter_mut().zip(&delta) {
            *yv += scale * dv;
        }
    }
    y
}

/// Feeds the token at the next position and returns its next-token logits.
pub fn forward_step<F: Scalar>(
    params: &ModelParams<F>,
    id: u32,
    state: &mut DecodeState<F>,
) -> Result<Vec<F>> {
    let cfg = &params.config;
    let pos = state.len();
    if pos >= cfg.context_len {
        return Err(Error::Invalid {
            what: "decode step",
            msg: format!("position {pos} exceeds context {}", cfg.context_len),
        });
    }
    if id as usize >= cfg.vocab_size {
        return Err(Error::Invalid {
            what: "decode step",
            msg: format!("token id {id} outside vocabulary of {}", cfg.vocab_size),
        });
    }
    let d = cfg.embed_dim;
    let nh = cfg.n_heads;
    let hd = cfg.head_dim();
    let inv_sqrt_hd = F::from_f64(1.0 / (hd as f64).sqrt());
    let embed = params.p(&params.index.embed);
    let pos_emb = params.p(&params.index.pos);

    let mut x: Vec<F> = (0..d)
        .map(|j| embed[id as usize * d + j] + pos_emb[pos * d + j])
        .collect();

    for (l, lix) in params.index.layers.iter().enumerate() {
        let h = ln_row(&x, params.p(&lix.ln1_g), params.p(&lix.ln1_b));
        let q = adapted_row(params, l, AdapterTarget::Query, &h, params.p(&lix.wq), params.p(&lix.bq), d);
        let k = adapted_row(params, l, AdapterTarget::Key, &h, params.p(&lix.wk), params.p(&lix.bk), d);
        let v = adapted_row(params, l, AdapterTarget::Value, &h, params.p(&lix.wv), params.p(&lix.bv), d);
        state.k[l].push(&k);
        state.v[l].push(&v);

        let mut o = vec![F::zero(); d];
        let n_ctx = state.k[l].len();
        let mut scores = vec![F::zero(); n_ctx];
        for a in 0..nh {
            let qa = &q[a * hd..(a + 1) * hd];
            for (t, s) in scores.iter_mut().enumerate() {
                let kt = &state.k[l].row(t)[a * hd..(a + 1) * hd];
                let mut acc = F::zero();
                for j in 0..hd {
                    acc += qa[j] * kt[j];
                }
                *s = acc * inv_sqrt_hd;
            }
            softmax_prefix(&mut scores, n_ctx);
            let oa = &mut o[a * hd..(a + 1) * hd];
            for (t, &p) in scores.iter().enumerate() {
                let vt = &state.v[l].row(t)[a * hd..(a + 1) * hd];
                for j in 0..hd {
                    oa[j] += p * vt[j];
                }
            }
        }
        let attn = adapted_row(params, l, AdapterTarget::AttnOutput, &o, params.p(&lix.wo), params.p(&lix.bo), d);
        for (xv, &av) in x.iter_mut().zip(&attn) {
            *xv += av;
        }

        let h2 = ln_row(&x, params.p(&lix.ln2_g), params.p(&lix.ln2_b));
        let z = adapted_row(params, l, AdapterTarget::FfnUp, &h2, params.p(&lix.w_up), params.p(&lix.b_up), cfg.ffn_dim);
        let u: Vec<F> = z.into_iter().map(gelu).collect();
        let f = adapted_row(params, l, AdapterTarget::FfnDown, &u, params.p(&lix.w_down), params.p(&lix.b_down), d);
        for (xv, &fv) in x.iter_mut().zip(&f) {
            *xv += fv;
        }
    }

    let xf = ln_row(&x, params.p(&params.index.lnf_g), params.p(&params.index.lnf_b));
    Ok(affine_row(&xf, params.p(&params.index.head), &[], cfg.vocab_size))
}

/// First index of the maximum value: ties go to the lowest token id.
pub(crate) fn argmax<F: Scalar>(row: &[F]) -> usize {
    let mut best = 0;
    let mut best_v = row[0];
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Greedy continuation of `prompt`: repeatedly takes the argmax next token
/// until `eos`, `max_new` tokens, or the context limit. Returns only the
/// generated ids; `eos` is not included.
pub fn greedy_decode<F: Scalar>(
    params: &ModelParams<F>,
    prompt: &[u32],
    eos: u32,
    max_new: usize,
) -> Result<Vec<u32>> {
    if prompt.is_empty() {
        return Err(Error::Invalid {
            what: "decode prompt",
            msg: "empty prompt".into(),
        });
    }
    if prompt.len() >= params.config.context_len {
        return Err(Error::Invalid {
            what: "decode prompt",
            msg: format!(
                "prompt of {} ids leaves no room in context {}",
                prompt.len(),
                params.config.context_len
            ),
        });
    }
    let mut state = DecodeState::new(params);
    let mut logits = Vec::new();
    for &id in prompt {
        logits = forward_step(params, id, &mut state)?;
    }
    let mut out = Vec::new();
    while out.len() < max_new {
        let next = argmax(&logits) as u32;
        if next == eos {
            break;
        }
        out.push(next);
        if state.len() >= params.config.context_len {
            break;
        }
        logits = forward_step(params, next, &mut state)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::net::logits_only;
    use crate::model::ModelConfig;

    fn tiny(seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            context_len: 16,
            embed_dim: 4,
            n_layers: 2,
            n_heads: 2,
            ffn_dim: 8,
            seed,
        }
    }

    #[test]
    fn argmax_breaks_ties_toward_lowest_id() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0, 0.0]), 0);
        assert_eq!(argmax(&[-1.0, -3.0]), 0);
    }

    #[test]
    fn stepwise_logits_match_batch_forward() {
        let params = ModelParams::<f64>::init(tiny(21)).unwrap();
        let ids = [3u32, 1, 4, 1, 5, 9, 2, 6];
        let batch = logits_only(&params, &ids).unwrap();
        let mut state = DecodeState::new(&params);
        for (i, &id) in ids.iter().enumerate() {
            let row = forward_step(&params, id, &mut state).unwrap();
            assert_eq!(row.as_slice(), batch.row(i), "position {i}");
        }
    }

    #[test]
    fn stepwise_matches_batch_with_adapters() {
        use crate::model::AdapterConfig;
        use rand::{Rng, SeedableRng};
        let mut params = ModelParams::<f64>::init(tiny(22)).unwrap();
        params
            .apply_adapters(AdapterConfig {
                targets: AdapterConfig::direct_sft_targets(),
                ..AdapterConfig::default()
            })
            .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let range = params.trainable_range();
        for i in range {
            params.data[i] = rng.gen_range(-0.1..0.1);
        }
        let ids = [1u32, 2, 3, 4];
        let batch = logits_only(&params, &ids).unwrap();
        let mut state = DecodeState::new(&params);
        for (i, &id) in ids.iter().enumerate() {
            let row = forward_step(&params, id, &mut state).unwrap();
            assert_eq!(row.as_slice(), batch.row(i), "position {i}");
        }
    }

    /// A hand-built model whose next-token prediction always copies its input
    /// token: one-hot embeddings flow through zeroed layers untouched, and the
    /// head reads them back out.
    fn copy_model() -> ModelParams<f64> {
        let cfg = ModelConfig {
            vocab_size: 8,
            context_len: 8,
            embed_dim: 8,
            n_layers: 1,
            n_heads: 1,
            ffn_dim: 4,
            seed: 0,
        };
        let mut params = ModelParams::<f64>::init(cfg).unwrap();
        params.data.fill(0.0);
        let d = 8;
        for t in 0..8 {
            params.data[params.index.embed.start + t * d + t] = 10.0;
            params.data[params.index.head.start + t * d + t] = 1.0;
        }
        for i in params.index.lnf_g.clone() {
            params.data[i] = 1.0;
        }
        params
    }

    #[test]
    fn copy_model_repeats_its_prompt_token() {
        let params = copy_model();
        assert_eq!(greedy_decode(&params, &[3], 7, 4).unwrap(), vec![3, 3, 3, 3]);
        assert_eq!(greedy_decode(&params, &[5], 7, 2).unwrap(), vec![5, 5]);
    }

    #[test]
    fn max_new_zero_gives_empty_output() {
        let params = copy_model();
        assert_eq!(greedy_decode(&params, &[3], 7, 0).unwrap(), Vec::<u32>::new());
    }

    #[test]
    fn immediate_eos_gives_empty_output() {
        let params = copy_model();
        // The first generated token copies the prompt token 3; call that eos.
        assert_eq!(greedy_decode(&params, &[3], 3, 10).unwrap(), Vec::<u32>::new());
    }

    #[test]
    fn decode_stops_at_context_limit() {
        let params = copy_model();
        // Context 8, prompt 1: positions 1..7 can be fed, so 7 steps produce
        // logits but the 8th generated token cannot be fed back.
        let out = greedy_decode(&params, &[2], 7, 100).unwrap();
        assert_eq!(out.len(), 8);
        assert!(out.iter().all(|&t| t == 2));
    }

    #[test]
    fn decode_validates_prompt() {
        let params = copy_model();
        assert!(greedy_decode(&params, &[], 7, 5).is_err());
        assert!(greedy_decode(&params, &[0; 8], 7, 5).is_err(), "prompt fills context");
        assert!(greedy_decode(&params, &[99], 7, 5).is_err(), "id outside vocab");
    }

    #[test]
    fn decode_is_deterministic() {
        let params = ModelParams::<f32>::init(tiny(33)).unwrap();
        let a = greedy_decode(&params, &[1, 2, 3], 257 % 11, 8).unwrap();
        let b = greedy_decode(&params, &[1, 2, 3], 257 % 11, 8).unwrap();
        assert_eq!(a, b);
    }
}
