use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::config::{LayerKind, ModelConfig};
use super::weights::{LayerWeights, ModelWeights};
use crate::error::{Error, Result};
use crate::kernels::{output_gate, qk_norm, rms_norm, rope_apply};
use crate::linattn::{linear_attn_chunked, linear_attn_decode_step, LinearState};
use crate::real::Real;
use crate::sparseattn::{sparse_attention_decode, sparse_attention_prefill, SparseCache};
use crate::tensor::{HeadTensor, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    /// Whole prompt at once on a fresh cache.
    Prefill,
    /// Exactly one token appended to an existing cache.
    Decode,
}

#[derive(Debug, Clone)]
pub enum LayerCache<T> {
    Linear(LinearState<T>),
    Sparse(SparseCache<T>),
}

impl<T: Real> LayerCache<T> {
    pub fn kind(&self) -> LayerKind {
        match self {
            LayerCache::Linear(_) => LayerKind::Linear,
            LayerCache::Sparse(_) => LayerKind::Sparse,
        }
    }

    pub fn n_tokens(&self) -> usize {
        match self {
            LayerCache::Linear(s) => s.tokens_seen() as usize,
            LayerCache::Sparse(c) => c.n_tokens(),
        }
    }

    pub fn size_bytes(&self, bytes_per_elem: usize) -> usize {
        match self {
            LayerCache::Linear(s) => s.size_bytes(bytes_per_elem),
            LayerCache::Sparse(c) => c.kv_bytes(bytes_per_elem),
        }
    }
}

/// Per-layer inference state for one generation stream.
#[derive(Debug, Clone)]
pub struct HybridCache<T> {
    layers: Vec<LayerCache<T>>,
}

impl<T: Real> HybridCache<T> {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        let layers = cfg
            .layer_kinds
            .iter()
            .map(|kind| {
                Ok(match kind {
                    LayerKind::Linear => LayerCache::Linear(LinearState::zeros(cfg.n_heads, cfg.head_dim, cfg.head_dim)),
                    LayerKind::Sparse => LayerCache::Sparse(SparseCache::new(
                        cfg.n_kv_heads,
                        cfg.head_dim,
                        cfg.sparse.block_size,
                        cfg.sparse.pooling,
                    )?),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[LayerCache<T>] {
        &self.layers
    }

    /// Tokens absorbed so far (layer 0's count; all layers agree between
    /// complete forward calls).
    pub fn n_tokens(&self) -> usize {
        self.layers.first().map_or(0, |l| l.n_tokens())
    }

    pub fn size_bytes(&self) -> usize {
        self.layers.iter().map(|l| l.size_bytes(T::DTYPE.size_bytes())).sum()
    }
}

/// What the instrumented forward observed: per layer, whether rotary
/// embedding was applied to Q and K.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub rope_applied: Vec<bool>,
}

fn check_phase<T: Real>(entry: &LayerCache<T>, kind: LayerKind, layer: usize, n: usize, phase: Phase) -> Result<()> {
    if entry.kind() != kind {
        return Err(Error::State(format!("layer {layer} is {kind:?} but its cache entry is {:?}", entry.kind())));
    }
    match phase {
        Phase::Prefill if entry.n_tokens() != 0 => Err(Error::State(format!(
            "prefill on layer {layer} whose cache already holds {} tokens",
            entry.n_tokens()
        ))),
        Phase::Decode if n != 1 => Err(Error::State(format!("decode on layer {layer} with {n} tokens, expected 1"))),
        _ => Ok(()),
    }
}

/// Gated attention output of one block, before the residual add. `xn` is
/// the normalized block input.
fn attention<T: Real>(
    xn: &Matrix<T>,
    lw: &LayerWeights<T>,
    cfg: &ModelConfig,
    entry: &mut LayerCache<T>,
    phase: Phase,
    rope_applied: &mut bool,
) -> Result<Matrix<T>> {
    let n = xn.rows();
    let (h, hkv, hd) = (cfg.n_heads, cfg.n_kv_heads, cfg.head_dim);
    let q = qk_norm(&HeadTensor::from_matrix(xn.matmul(&lw.wq)?, h, hd)?, &lw.q_gamma, cfg.norm_eps)?;
    let k = qk_norm(&HeadTensor::from_matrix(xn.matmul(&lw.wk)?, hkv, hd)?, &lw.k_gamma, cfg.norm_eps)?;
    let v = HeadTensor::from_matrix(xn.matmul(&lw.wv)?, hkv, hd)?;
    let start = entry.n_tokens();
    let out = match entry {
        LayerCache::Linear(state) => {
            let positions: Vec<usize> = (start..start + n).collect();
            let q = rope_apply(&q, &positions, &cfg.rope)?;
            let k = rope_apply(&k, &positions, &cfg.rope)?;
            *rope_applied = true;
            match phase {
                Phase::Prefill => {
                    let (o, s) = linear_attn_chunked(&q, &k, &v, &cfg.decay, cfg.chunk_size, state)?;
                    *state = s;
                    o
                }
                Phase::Decode => {
                    let o = linear_attn_decode_step(q.token(0), k.token(0), v.token(0), &cfg.decay, state)?;
                    HeadTensor::from_parts(o, 1, h, hd)
                }
            }
        }
        LayerCache::Sparse(cache) => match phase {
            Phase::Prefill => {
                cache.extend(&k, &v)?;
                sparse_attention_prefill(&q, &k, &v, &cfg.sparse)?
            }
            Phase::Decode => {
                cache.append(k.token(0), v.token(0))?;
                let o = sparse_attention_decode(q.token(0), cache, &cfg.sparse, start)?;
                HeadTensor::from_parts(o, 1, h, hd)
            }
        },
    };
    output_gate(xn, &out.into_matrix(), &lw.gate)?.matmul(&lw.wo)
}

/// Gated MLP: `silu(x·W_gate) ⊙ (x·W_up) · W_out`.
pub fn ffn<T: Real>(xn: &Matrix<T>, lw: &LayerWeights<T>) -> Result<Matrix<T>> {
    let f = lw.ffn_out.rows();
    let mid = xn.matmul(&lw.ffn_in)?;
    let mut act = Matrix::zeros(xn.rows(), f);
    for r in 0..xn.rows() {
        let (g, u) = mid.row(r).split_at(f);
        for ((a, &g), &u) in act.row_mut(r).iter_mut().zip(g).zip(u) {
            *a = g * crate::kernels::sigmoid(g) * u;
        }
    }
    act.matmul(&lw.ffn_out)
}

/// `h = x + attn(norm(x))`, the attention half of a block.
pub fn attention_residual<T: Real>(
    x: &Matrix<T>,
    layer: usize,
    cfg: &ModelConfig,
    weights: &ModelWeights<T>,
    cache: &mut HybridCache<T>,
    phase: Phase,
) -> Result<Matrix<T>> {
    let mut flag = false;
    attention_residual_traced(x, layer, cfg, weights, cache, phase, &mut flag)
}

fn attention_residual_traced<T: Real>(
    x: &Matrix<T>,
    layer: usize,
    cfg: &ModelConfig,
    weights: &ModelWeights<T>,
    cache: &mut HybridCache<T>,
    phase: Phase,
    rope_applied: &mut bool,
) -> Result<Matrix<T>> {
    let lw = weights
        .layers
        .get(layer)
        .ok_or_else(|| Error::Input(format!("layer {layer} out of range for {} layers", weights.layers.len())))?;
    let entry = cache
        .layers
        .get_mut(layer)
        .ok_or_else(|| Error::State(format!("cache has no entry for layer {layer}")))?;
    check_phase(entry, cfg.layer_kinds[layer], layer, x.rows(), phase)?;
    let xn = rms_norm(x, &lw.attn_norm, cfg.norm_eps)?;
    let mut h = attention(&xn, lw, cfg, entry, phase, rope_applied)?;
    h.add_assign(x)?;
    Ok(h)
}

/// Pre-norm residual block: `h = x + attn(norm(x))`, `x' = h + ffn(norm(h))`.
pub fn layer_forward<T: Real>(
    x: &Matrix<T>,
    layer: usize,
    cfg: &ModelConfig,
    weights: &ModelWeights<T>,
    cache: &mut HybridCache<T>,
    phase: Phase,
) -> Result<Matrix<T>> {
    layer_forward_traced(x, layer, cfg, weights, cache, phase).map(|(y, _)| y)
}

/// [`layer_forward`] that also reports whether RoPE ran.
pub fn layer_forward_traced<T: Real>(
    x: &Matrix<T>,
    layer: usize,
    cfg: &ModelConfig,
    weights: &ModelWeights<T>,
    cache: &mut HybridCache<T>,
    phase: Phase,
) -> Result<(Matrix<T>, bool)> {
    let mut rope_applied = false;
    let mut h = attention_residual_traced(x, layer, cfg, weights, cache, phase, &mut rope_applied)?;
    let lw = &weights.layers[layer];
    let y = ffn(&rms_norm(&h, &lw.ffn_norm, cfg.norm_eps)?, lw)?;
    h.add_assign(&y)?;
    Ok((h, rope_applied))
}

pub fn embed<T: Real>(tokens: &[u32], cfg: &ModelConfig, weights: &ModelWeights<T>) -> Result<Matrix<T>> {
    let mut x = Matrix::zeros(tokens.len(), cfg.d_model);
    for (r, &tok) in tokens.iter().enumerate() {
        if tok as usize >= cfg.vocab_size {
            return Err(Error::Input(format!("token {tok} at position {r} is outside vocab of {}", cfg.vocab_size)));
        }
        x.row_mut(r).copy_from_slice(weights.embed.row(tok as usize));
    }
    Ok(x)
}

/// Final norm and unembedding.
pub fn logits<T: Real>(hidden: &Matrix<T>, cfg: &ModelConfig, weights: &ModelWeights<T>) -> Result<Matrix<T>> {
    rms_norm(hidden, &weights.final_norm, cfg.norm_eps)?.matmul(&weights.unembed)
}

/// Hidden states after every layer, starting with the embedding output.
/// `out[l]` is the input of layer `l`; `out[n_layers]` is the final hidden
/// state before the output norm.
pub fn hidden_states<T: Real>(tokens: &[u32], cfg: &ModelConfig, weights: &ModelWeights<T>) -> Result<Vec<Matrix<T>>> {
    let mut cache = HybridCache::new(cfg)?;
    let mut out = vec![embed(tokens, cfg, weights)?];
    for l in 0..cfg.n_layers {
        let y = layer_forward(&out[l], l, cfg, weights, &mut cache, Phase::Prefill)?;
        out.push(y);
    }
    Ok(out)
}

/// Logits for `tokens`. A fresh cache takes the prompt as one prefill;
/// otherwise tokens are decoded one at a time as a continuation.
pub fn model_forward<T: Real>(tokens: &[u32], cfg: &ModelConfig, weights: &ModelWeights<T>, cache: &mut HybridCache<T>) -> Result<Matrix<T>> {
    model_forward_traced(tokens, cfg, weights, cache).map(|(l, _)| l)
}

pub fn model_forward_traced<T: Real>(
    tokens: &[u32],
    cfg: &ModelConfig,
    weights: &ModelWeights<T>,
    cache: &mut HybridCache<T>,
) -> Result<(Matrix<T>, ForwardTrace)> {
    if cache.layers.len() != cfg.n_layers {
        return Err(Error::State(format!("cache has {} layers, config has {}", cache.layers.len(), cfg.n_layers)));
    }
    let x = embed(tokens, cfg, weights)?;
    let mut trace = ForwardTrace { rope_applied: vec![false; cfg.n_layers] };
    let hidden = if cache.n_tokens() == 0 {
        let mut h = x;
        for l in 0..cfg.n_layers {
            let (y, rope) = layer_forward_traced(&h, l, cfg, weights, cache, Phase::Prefill)?;
            trace.rope_applied[l] = rope;
            h = y;
        }
        h
    } else {
        let mut out = Matrix::zeros(tokens.len(), cfg.d_model);
        for r in 0..tokens.len() {
            let mut h = x.slice_rows(r, r + 1);
            for l in 0..cfg.n_layers {
                let (y, rope) = layer_forward_traced(&h, l, cfg, weights, cache, Phase::Decode)?;
                trace.rope_applied[l] = rope;
                h = y;
            }
            out.row_mut(r).copy_from_slice(h.row(0));
        }
        out
    };
    Ok((logits(&hidden, cfg, weights)?, trace))
}

fn argmax<T: Real>(row: &[T]) -> u32 {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best as u32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// Prompt followed by the generated tokens.
    pub tokens: Vec<u32>,
    /// Time to first token: the prefill wall time.
    pub ttft_seconds: f64,
    pub decode_seconds: f64,
    pub end_to_end_seconds: f64,
}

/// Greedy decoding. The first new token comes from the prefill logits; each
/// further token costs one decode step.
pub fn generate<T: Real>(prompt: &[u32], n_new: usize, cfg: &ModelConfig, weights: &ModelWeights<T>) -> Result<Generation> {
    let mut tokens = prompt.to_vec();
    if n_new == 0 {
        return Ok(Generation { tokens, ttft_seconds: 0.0, decode_seconds: 0.0, end_to_end_seconds: 0.0 });
    }
    if prompt.is_empty() {
        return Err(Error::Input("generation needs a non-empty prompt".into()));
    }
    let t0 = Instant::now();
    let mut cache = HybridCache::new(cfg)?;
    let l = model_forward(prompt, cfg, weights, &mut cache)?;
    tokens.push(argmax(l.row(l.rows() - 1)));
    let ttft = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    for _ in 1..n_new {
        let last = *tokens.last().expect("non-empty");
        let l = model_forward(&[last], cfg, weights, &mut cache)?;
        tokens.push(argmax(l.row(0)));
    }
    let decode = t1.elapsed().as_secs_f64();
    Ok(Generation { tokens, ttft_seconds: ttft, decode_seconds: decode, end_to_end_seconds: t0.elapsed().as_secs_f64() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparseattn::AttnMode;

    fn small_cfg() -> ModelConfig {
        let mut c = ModelConfig::with_dims(8, 16, 4, 2, 8, 24, 40).unwrap();
        c.chunk_size = 5;
        c.sparse.block_size = 4;
        c.sparse.top_k = 2;
        c.sparse.local_window = 6;
        c
    }

    fn tokens(n: usize, vocab: usize) -> Vec<u32> {
        (0..n).map(|i| ((i * 37 + 11) % vocab) as u32).collect()
    }

    #[test]
    fn residual_identity_with_zero_outputs() {
        let cfg = small_cfg();
        let mut w = ModelWeights::<f64>::random(&cfg, 1).unwrap();
        for lw in &mut w.layers {
            lw.wo = Matrix::zeros(lw.wo.rows(), lw.wo.cols());
            lw.ffn_out = Matrix::zeros(lw.ffn_out.rows(), lw.ffn_out.cols());
        }
        let x = embed(&tokens(7, cfg.vocab_size), &cfg, &w).unwrap();
        for l in [0, 1] {
            let mut cache = HybridCache::new(&cfg).unwrap();
            let y = layer_forward(&x, l, &cfg, &w, &mut cache, Phase::Prefill).unwrap();
            assert_eq!(y, x);
        }
    }

    #[test]
    fn rope_at_position_zero_is_identity() {
        let cfg = small_cfg();
        let w = ModelWeights::<f64>::random(&cfg, 2).unwrap();
        let x = embed(&[5], &cfg, &w).unwrap();
        let mut cache = HybridCache::new(&cfg).unwrap();
        let (with_rope, applied) = layer_forward_traced(&x, 1, &cfg, &w, &mut cache, Phase::Prefill).unwrap();
        assert!(applied);

        // Unrotated single-token oracle: S_1 = kᵀv, so o_h = (q_h·k_g) v_g.
        let lw = &w.layers[1];
        let xn = rms_norm(&x, &lw.attn_norm, cfg.norm_eps).unwrap();
        let hd = cfg.head_dim;
        let q = qk_norm(&HeadTensor::from_matrix(xn.matmul(&lw.wq).unwrap(), cfg.n_heads, hd).unwrap(), &lw.q_gamma, cfg.norm_eps).unwrap();
        let k = qk_norm(&HeadTensor::from_matrix(xn.matmul(&lw.wk).unwrap(), cfg.n_kv_heads, hd).unwrap(), &lw.k_gamma, cfg.norm_eps).unwrap();
        let v = HeadTensor::from_matrix(xn.matmul(&lw.wv).unwrap(), cfg.n_kv_heads, hd).unwrap();
        let group = cfg.n_heads / cfg.n_kv_heads;
        let mut o = Vec::new();
        for h in 0..cfg.n_heads {
            let s: f64 = q.head(0, h).iter().zip(k.head(0, h / group)).map(|(a, b)| a * b).sum();
            o.extend(v.head(0, h / group).iter().map(|x| s * x));
        }
        let attn = output_gate(&xn, &Matrix::new(1, o.len(), o).unwrap(), &lw.gate).unwrap().matmul(&lw.wo).unwrap();
        let mut h = x.clone();
        h.add_assign(&attn).unwrap();
        let mut oracle = h.clone();
        oracle.add_assign(&ffn(&rms_norm(&h, &lw.ffn_norm, cfg.norm_eps).unwrap(), lw).unwrap()).unwrap();
        assert!(with_rope.max_abs_diff(&oracle) < 1e-12);
    }

    #[test]
    fn layer_prefill_matches_decode_steps() {
        let mut cfg = small_cfg();
        let w = ModelWeights::<f64>::random(&cfg, 3).unwrap();
        let x = embed(&tokens(23, cfg.vocab_size), &cfg, &w).unwrap();
        for mode in [AttnMode::Sparse, AttnMode::Dense] {
            cfg.sparse.mode = mode;
            // 23 tokens exceed the sparse budget only in sparse mode, so use
            // a covering budget there and test both kinds.
            cfg.sparse.local_window = 32;
            for l in [0, 1] {
                let mut batch_cache = HybridCache::new(&cfg).unwrap();
                let batch = layer_forward(&x, l, &cfg, &w, &mut batch_cache, Phase::Prefill).unwrap();
                let mut cache = HybridCache::new(&cfg).unwrap();
                for t in 0..x.rows() {
                    let row = layer_forward(&x.slice_rows(t, t + 1), l, &cfg, &w, &mut cache, Phase::Decode).unwrap();
                    assert!(crate::tensor::max_abs_diff(row.row(0), batch.row(t)) < 1e-10, "layer {l} token {t}");
                }
            }
        }
    }

    #[test]
    fn phase_errors() {
        let cfg = small_cfg();
        let w = ModelWeights::<f64>::random(&cfg, 4).unwrap();
        let x = embed(&tokens(3, cfg.vocab_size), &cfg, &w).unwrap();
        let mut cache = HybridCache::new(&cfg).unwrap();
        assert!(matches!(layer_forward(&x, 1, &cfg, &w, &mut cache, Phase::Decode), Err(Error::State(_))));
        layer_forward(&x, 1, &cfg, &w, &mut cache, Phase::Prefill).unwrap();
        assert!(matches!(layer_forward(&x, 1, &cfg, &w, &mut cache, Phase::Prefill), Err(Error::State(_))));

        let mut other = cfg.clone();
        other.layer_kinds.swap(0, 1);
        other.layout = crate::stack::Layout::Uniform;
        let mut wrong = HybridCache::new(&other).unwrap();
        assert!(matches!(layer_forward(&x, 0, &cfg, &w, &mut wrong, Phase::Prefill), Err(Error::State(_))));
    }

    #[test]
    fn out_of_vocab_token() {
        let cfg = small_cfg();
        let w = ModelWeights::<f32>::random(&cfg, 5).unwrap();
        let mut cache = HybridCache::new(&cfg).unwrap();
        let err = model_forward(&[1, cfg.vocab_size as u32], &cfg, &w, &mut cache).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
    }

    #[test]
    fn hype_trace_follows_layer_kinds() {
        let cfg = small_cfg();
        let w = ModelWeights::<f32>::random(&cfg, 6).unwrap();
        let mut cache = HybridCache::new(&cfg).unwrap();
        let want: Vec<bool> = cfg.layer_kinds.iter().map(|k| *k == LayerKind::Linear).collect();
        let (_, trace) = model_forward_traced(&tokens(9, cfg.vocab_size), &cfg, &w, &mut cache).unwrap();
        assert_eq!(trace.rope_applied, want);
        let (_, trace) = model_forward_traced(&[3], &cfg, &w, &mut cache).unwrap();
        assert_eq!(trace.rope_applied, want);
    }

    #[test]
    fn zero_embedding_gives_constant_logits() {
        let cfg = small_cfg();
        let mut w = ModelWeights::<f64>::random(&cfg, 7).unwrap();
        w.embed = Matrix::zeros(cfg.vocab_size, cfg.d_model);
        let mut cache = HybridCache::new(&cfg).unwrap();
        let l = model_forward(&tokens(12, cfg.vocab_size), &cfg, &w, &mut cache).unwrap();
        for r in 1..l.rows() {
            assert_eq!(l.row(r), l.row(0));
        }
    }

    #[test]
    fn generate_edge_cases() {
        let cfg = small_cfg();
        let w = ModelWeights::<f64>::random(&cfg, 8).unwrap();
        let g = generate(&[1, 2, 3], 0, &cfg, &w).unwrap();
        assert_eq!(g.tokens, vec![1, 2, 3]);
        assert_eq!(g.decode_seconds, 0.0);
        let a = generate(&[1, 2, 3], 6, &cfg, &w).unwrap();
        let b = generate(&[1, 2, 3], 6, &cfg, &w).unwrap();
        assert_eq!(a.tokens, b.tokens);
        assert_eq!(a.tokens.len(), 9);
        assert!(matches!(generate(&[], 2, &cfg, &w), Err(Error::Input(_))));
    }
}
