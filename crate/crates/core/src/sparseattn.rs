//! Parameter-free blockwise sparse attention.
//!
//! Keys are grouped into blocks of `block_size` tokens and each complete block
//! is summarized by pooling its keys. A query attends exactly (softmax) over
//! the union of
//!
//! * the first `n_init_blocks` blocks,
//! * the `top_k` highest-scoring earlier blocks, ranked by the dot product of
//!   the pooled group query with each block summary (ties go to the more
//!   recent block),
//! * the trailing `local_window` tokens, and
//! * the tokens of its own, possibly incomplete, block up to itself.
//!
//! Selection is shared by all query heads reading the same KV head. During
//! prefill one selection is made per query block from the mean query of that
//! block; during decode each token selects with its own query.
//!
//! Keys are stored exactly as given: this layer never applies RoPE, so cached
//! keys carry no position.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::kernels::{attend, check_gqa, softmax_causal_attention, KvView};
use crate::real::{dot, Real};
use crate::tensor::HeadTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnMode {
    Dense,
    Sparse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SparseParams {
    pub block_size: usize,
    pub top_k: usize,
    pub n_init_blocks: usize,
    pub local_window: usize,
    pub mode: AttnMode,
    #[serde(default)]
    pub pooling: Pooling,
}

impl Default for SparseParams {
    fn default() -> Self {
        Self { block_size: 64, top_k: 8, n_init_blocks: 1, local_window: 128, mode: AttnMode::Sparse, pooling: Pooling::Mean }
    }
}

impl SparseParams {
    pub fn validate(&self) -> Result<()> {
        if self.block_size == 0 {
            return Err(config_err("sparse block_size must be >= 1"));
        }
        if self.top_k == 0 {
            return Err(config_err("sparse top_k must be >= 1"));
        }
        Ok(())
    }

    /// True when every query up to `n_tokens - 1` is guaranteed to see its
    /// full causal prefix.
    pub fn covers(&self, n_tokens: usize) -> bool {
        self.mode == AttnMode::Dense
            || (self.top_k + self.n_init_blocks) * self.block_size + self.local_window >= n_tokens
    }
}

fn pool_block<T: Real>(keys: &[T], n_kv_heads: usize, head_dim: usize, block: usize, block_size: usize, kv_head: usize, pooling: Pooling, out: &mut [T]) {
    let start = block * block_size;
    let key = |pos: usize| {
        let off = (pos * n_kv_heads + kv_head) * head_dim;
        &keys[off..off + head_dim]
    };
    match pooling {
        Pooling::Mean => {
            out.iter_mut().for_each(|o| *o = T::zero());
            for pos in start..start + block_size {
                for (o, &x) in out.iter_mut().zip(key(pos)) {
                    *o += x;
                }
            }
            let n = T::of(block_size as f64);
            out.iter_mut().for_each(|o| *o /= n);
        }
        Pooling::Max => {
            out.copy_from_slice(key(start));
            for pos in start + 1..start + block_size {
                for (o, &x) in out.iter_mut().zip(key(pos)) {
                    if x > *o {
                        *o = x;
                    }
                }
            }
        }
    }
}

/// Mean-pooled key of every complete block; a trailing partial block gets no
/// summary. The result is laid out `(n_blocks, n_kv_heads, head_dim)`.
pub fn block_summaries<T: Real>(k: &HeadTensor<T>, block_size: usize) -> Result<HeadTensor<T>> {
    block_summaries_with(k, block_size, Pooling::Mean)
}

pub fn block_summaries_with<T: Real>(k: &HeadTensor<T>, block_size: usize, pooling: Pooling) -> Result<HeadTensor<T>> {
    if block_size == 0 {
        return Err(config_err("block_size must be >= 1"));
    }
    let n_blocks = k.n_tokens() / block_size;
    let mut out = HeadTensor::zeros(n_blocks, k.n_heads(), k.head_dim());
    for b in 0..n_blocks {
        for g in 0..k.n_heads() {
            pool_block(k.data(), k.n_heads(), k.head_dim(), b, block_size, g, pooling, out.head_mut(b, g));
        }
    }
    Ok(out)
}

/// Key/value history of one sparse layer plus the summaries of its complete
/// blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseCache<T> {
    keys: Vec<T>,
    values: Vec<T>,
    summaries: Vec<T>,
    n_tokens: usize,
    n_kv_heads: usize,
    head_dim: usize,
    block_size: usize,
    pooling: Pooling,
}

impl<T: Real> SparseCache<T> {
    pub fn new(n_kv_heads: usize, head_dim: usize, block_size: usize, pooling: Pooling) -> Result<Self> {
        if block_size == 0 {
            return Err(config_err("block_size must be >= 1"));
        }
        Ok(Self { keys: Vec::new(), values: Vec::new(), summaries: Vec::new(), n_tokens: 0, n_kv_heads, head_dim, block_size, pooling })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn n_kv_heads(&self) -> usize {
        self.n_kv_heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn n_blocks(&self) -> usize {
        self.summaries.len() / (self.n_kv_heads * self.head_dim).max(1)
    }

    /// Summary of block `b` for KV head `g`.
    pub fn summary(&self, b: usize, g: usize) -> &[T] {
        let off = (b * self.n_kv_heads + g) * self.head_dim;
        &self.summaries[off..off + self.head_dim]
    }

    pub fn summaries(&self) -> HeadTensor<T> {
        HeadTensor::from_parts(self.summaries.clone(), self.n_blocks(), self.n_kv_heads, self.head_dim)
    }

    pub fn keys(&self) -> HeadTensor<T> {
        HeadTensor::from_parts(self.keys.clone(), self.n_tokens, self.n_kv_heads, self.head_dim)
    }

    pub(crate) fn kv_view(&self) -> KvView<'_, T> {
        KvView { keys: &self.keys, values: &self.values, n_kv_heads: self.n_kv_heads, head_dim: self.head_dim }
    }

    /// Appends one token (`n_kv_heads * head_dim` keys and values). The
    /// summary of a block is computed once, when its last token arrives.
    pub fn append(&mut self, k: &[T], v: &[T]) -> Result<()> {
        let w = self.n_kv_heads * self.head_dim;
        if k.len() != w || v.len() != w {
            return Err(shape_err(format!("append of {}/{} values into a cache of width {w}", k.len(), v.len())));
        }
        self.keys.extend_from_slice(k);
        self.values.extend_from_slice(v);
        self.n_tokens += 1;
        if self.n_tokens % self.block_size == 0 {
            let b = self.n_tokens / self.block_size - 1;
            let mut pooled = vec![T::zero(); self.head_dim];
            for g in 0..self.n_kv_heads {
                pool_block(&self.keys, self.n_kv_heads, self.head_dim, b, self.block_size, g, self.pooling, &mut pooled);
                self.summaries.extend_from_slice(&pooled);
            }
        }
        Ok(())
    }

    pub fn extend(&mut self, k: &HeadTensor<T>, v: &HeadTensor<T>) -> Result<()> {
        if k.n_tokens() != v.n_tokens() {
            return Err(shape_err("K and V token counts differ"));
        }
        for t in 0..k.n_tokens() {
            self.append(k.token(t), v.token(t))?;
        }
        Ok(())
    }

    /// Bytes of stored keys and values (summaries excluded).
    pub fn kv_bytes(&self, bytes_per_elem: usize) -> usize {
        (self.keys.len() + self.values.len()) * bytes_per_elem
    }
}

/// Ranks the candidate blocks for a query whose own block is `cur_block` and
/// whose latest position is `t_ref`, and returns the `top_k` winners.
fn rank_blocks<T: Real, F>(q_group: &[T], n_summaries: usize, summary: F, p: &SparseParams, cur_block: usize, t_ref: usize) -> Vec<usize>
where
    F: Fn(usize) -> Vec<T>,
{
    let window_start = (t_ref + 1).saturating_sub(p.local_window);
    let last = cur_block.min(n_summaries);
    let mut scored: Vec<(T, usize)> = (p.n_init_blocks.min(last)..last)
        // blocks already fully inside the local window need no slot
        .filter(|&b| b * p.block_size < window_start)
        .map(|b| (dot(q_group, &summary(b)), b))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(b.1.cmp(&a.1)));
    scored.truncate(p.top_k);
    scored.into_iter().map(|(_, b)| b).collect()
}

/// Sorted, deduplicated positions visible to query `t`.
fn positions_for(t: usize, chosen: &[usize], p: &SparseParams) -> Vec<usize> {
    let bs = p.block_size;
    let cur_block = t / bs;
    let mut spans: Vec<(usize, usize)> = Vec::with_capacity(chosen.len() + 3);
    if p.n_init_blocks > 0 {
        spans.push((0, (p.n_init_blocks * bs).min(t + 1)));
    }
    for &b in chosen {
        spans.push((b * bs, ((b + 1) * bs).min(t + 1)));
    }
    spans.push(((t + 1).saturating_sub(p.local_window), t + 1));
    spans.push((cur_block * bs, t + 1));
    spans.sort_unstable();
    let mut out = Vec::new();
    let mut next = 0;
    for (s, e) in spans {
        let s = s.max(next);
        if s < e {
            out.extend(s..e);
            next = e;
        }
    }
    out
}

/// Positions selected for query position `t` given the pooled query of its KV
/// group. `cache` must hold tokens `0..=t`.
pub fn select_blocks<T: Real>(q_group: &[T], cache: &SparseCache<T>, kv_head: usize, p: &SparseParams, t: usize) -> Result<Vec<usize>> {
    p.validate()?;
    if t >= cache.n_tokens() {
        return Err(Error::State(format!("query position {t} beyond cache of {} tokens", cache.n_tokens())));
    }
    if cache.block_size() != p.block_size {
        return Err(config_err("cache block size differs from sparse params"));
    }
    if q_group.len() != cache.head_dim() || kv_head >= cache.n_kv_heads() {
        return Err(shape_err("pooled query does not match cache heads"));
    }
    let chosen = rank_blocks(q_group, cache.n_blocks(), |b| cache.summary(b, kv_head).to_vec(), p, t / p.block_size, t);
    Ok(positions_for(t, &chosen, p))
}

fn pooled_query<T: Real>(q: &HeadTensor<T>, tokens: std::ops::Range<usize>, heads: std::ops::Range<usize>, out: &mut [T]) {
    out.iter_mut().for_each(|o| *o = T::zero());
    let count = T::of((tokens.len() * heads.len()) as f64);
    for t in tokens {
        for h in heads.clone() {
            for (o, &x) in out.iter_mut().zip(q.head(t, h)) {
                *o += x;
            }
        }
    }
    out.iter_mut().for_each(|o| *o /= count);
}

/// Causal sparse attention over a full prompt. In dense mode this is exactly
/// [`softmax_causal_attention`].
pub fn sparse_attention_prefill<T: Real>(q: &HeadTensor<T>, k: &HeadTensor<T>, v: &HeadTensor<T>, p: &SparseParams) -> Result<HeadTensor<T>> {
    p.validate()?;
    let n_kv = k.n_heads();
    if p.mode == AttnMode::Dense {
        return softmax_causal_attention(q, k, v, n_kv);
    }
    let group = check_gqa(q.n_heads(), n_kv)?;
    if v.n_heads() != n_kv || k.n_tokens() != q.n_tokens() || v.n_tokens() != q.n_tokens() {
        return Err(config_err("Q/K/V head grouping or token counts do not match"));
    }
    if k.head_dim() != q.head_dim() || v.head_dim() != q.head_dim() {
        return Err(shape_err("Q, K and V head dims differ"));
    }
    let n = q.n_tokens();
    let d = q.head_dim();
    let bs = p.block_size;
    let summaries = block_summaries_with(k, bs, p.pooling)?;
    let kv = KvView::of(k, v);
    let mut out = HeadTensor::zeros(n, q.n_heads(), d);
    let mut pooled = vec![T::zero(); d];
    let mut scores = Vec::new();
    let n_qblocks = n.div_ceil(bs);
    for g in 0..n_kv {
        let heads = g * group..(g + 1) * group;
        for qb in 0..n_qblocks {
            let tokens = qb * bs..((qb + 1) * bs).min(n);
            let t_ref = tokens.end - 1;
            pooled_query(q, tokens.clone(), heads.clone(), &mut pooled);
            let chosen = rank_blocks(&pooled, summaries.n_tokens(), |b| summaries.head(b, g).to_vec(), p, qb, t_ref);
            for t in tokens {
                let pos = positions_for(t, &chosen, p);
                debug_assert!(pos.last().is_some_and(|&x| x == t));
                for h in heads.clone() {
                    attend(q.head(t, h), &kv, g, pos.iter().copied(), &mut scores, out.head_mut(t, h));
                }
            }
        }
    }
    Ok(out)
}

/// Attention of the token at position `t` (already appended to `cache`)
/// over its selected history. `q` is `(n_heads, head_dim)` flattened.
pub fn sparse_attention_decode<T: Real>(q: &[T], cache: &SparseCache<T>, p: &SparseParams, t: usize) -> Result<Vec<T>> {
    p.validate()?;
    if cache.n_tokens() == 0 {
        return Err(Error::State(format!("decode at position {t} with an empty cache")));
    }
    if cache.n_tokens() != t + 1 {
        return Err(Error::State(format!("decode at position {t} but cache holds {} tokens", cache.n_tokens())));
    }
    let d = cache.head_dim();
    let n_kv = cache.n_kv_heads();
    if q.len() % d != 0 {
        return Err(shape_err("query width is not a multiple of head_dim"));
    }
    let n_heads = q.len() / d;
    let group = check_gqa(n_heads, n_kv)?;
    let kv = cache.kv_view();
    let mut out = vec![T::zero(); q.len()];
    let mut scores = Vec::new();
    let mut pooled = vec![T::zero(); d];
    for g in 0..n_kv {
        let pos: Vec<usize> = match p.mode {
            AttnMode::Dense => (0..=t).collect(),
            AttnMode::Sparse => {
                pooled.iter_mut().for_each(|o| *o = T::zero());
                for h in g * group..(g + 1) * group {
                    for (o, &x) in pooled.iter_mut().zip(&q[h * d..(h + 1) * d]) {
                        *o += x;
                    }
                }
                let c = T::of(group as f64);
                pooled.iter_mut().for_each(|o| *o /= c);
                select_blocks(&pooled, cache, g, p, t)?
            }
        };
        for h in g * group..(g + 1) * group {
            attend(&q[h * d..(h + 1) * d], &kv, g, pos.iter().copied(), &mut scores, &mut out[h * d..(h + 1) * d]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_heads<T: Real>(rng: &mut ChaCha8Rng, n: usize, h: usize, d: usize) -> HeadTensor<T> {
        HeadTensor::new((0..n * h * d).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect(), n, h, d).unwrap()
    }

    fn cache_of<T: Real>(k: &HeadTensor<T>, v: &HeadTensor<T>, bs: usize) -> SparseCache<T> {
        let mut c = SparseCache::new(k.n_heads(), k.head_dim(), bs, Pooling::Mean).unwrap();
        c.extend(k, v).unwrap();
        c
    }

    #[test]
    fn summaries_hand_cases() {
        let k = HeadTensor::new(vec![0.5f64, -1.0, 0.5, -1.0, 0.5, -1.0], 3, 1, 2).unwrap();
        let s = block_summaries(&k, 3).unwrap();
        assert_eq!(s.data(), &[0.5, -1.0]);

        let k = HeadTensor::new(vec![1.0f64, 3.0], 2, 1, 1).unwrap();
        assert_eq!(block_summaries(&k, 2).unwrap().data(), &[2.0]);

        let k = HeadTensor::<f64>::zeros(10, 2, 3);
        assert_eq!(block_summaries(&k, 4).unwrap().n_tokens(), 2);
        assert!(matches!(block_summaries(&k, 0), Err(Error::Config(_))));

        let k = HeadTensor::new(vec![1.0f64, 5.0, 3.0, 2.0], 4, 1, 1).unwrap();
        assert_eq!(block_summaries_with(&k, 4, Pooling::Max).unwrap().data(), &[5.0]);
    }

    #[test]
    fn incremental_summaries_match_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let k: HeadTensor<f32> = rand_heads(&mut rng, 3 * 8 + 5, 2, 4);
        let c = cache_of(&k, &k, 8);
        let batch = block_summaries(&k, 8).unwrap();
        assert_eq!(c.n_blocks(), 3);
        assert!(c.summaries().max_abs_diff(&batch) < 1e-6);
    }

    #[test]
    fn tie_goes_to_recent_block() {
        // head_dim 1, blocks of 4 constant keys scoring [0.1, 0.9, 0.9, 0.2]
        let keys: Vec<f64> = [0.1, 0.9, 0.9, 0.2].iter().flat_map(|&s| [s; 4]).chain([0.0]).collect();
        let k = HeadTensor::new(keys, 17, 1, 1).unwrap();
        let c = cache_of(&k, &k, 4);
        let p = SparseParams { block_size: 4, top_k: 1, n_init_blocks: 0, local_window: 0, mode: AttnMode::Sparse, pooling: Pooling::Mean };
        let sel = select_blocks(&[1.0], &c, 0, &p, 16).unwrap();
        assert_eq!(sel, vec![8, 9, 10, 11, 16]);
    }

    #[test]
    fn window_swallows_short_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let k: HeadTensor<f64> = rand_heads(&mut rng, 20, 1, 4);
        let c = cache_of(&k, &k, 4);
        let p = SparseParams { block_size: 4, top_k: 1, n_init_blocks: 0, local_window: 16, mode: AttnMode::Sparse, pooling: Pooling::Mean };
        for t in 0..16 {
            let sel = select_blocks(k.head(t, 0), &c, 0, &p, t).unwrap();
            assert_eq!(sel, (0..=t).collect::<Vec<_>>());
        }
    }

    #[test]
    fn covering_selection_is_full_prefix() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k: HeadTensor<f64> = rand_heads(&mut rng, 50, 1, 4);
        let c = cache_of(&k, &k, 4);
        let p = SparseParams { block_size: 4, top_k: 13, n_init_blocks: 0, local_window: 0, mode: AttnMode::Sparse, pooling: Pooling::Mean };
        for t in 0..50 {
            assert_eq!(select_blocks(k.head(t, 0), &c, 0, &p, t).unwrap(), (0..=t).collect::<Vec<_>>());
        }
    }

    #[test]
    fn dense_mode_is_bitwise_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q: HeadTensor<f32> = rand_heads(&mut rng, 37, 4, 8);
        let k = rand_heads(&mut rng, 37, 2, 8);
        let v = rand_heads(&mut rng, 37, 2, 8);
        let p = SparseParams { mode: AttnMode::Dense, ..SparseParams::default() };
        let a = sparse_attention_prefill(&q, &k, &v, &p).unwrap();
        let b = softmax_causal_attention(&q, &k, &v, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn covering_prefill_equals_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q: HeadTensor<f32> = rand_heads(&mut rng, 8, 2, 4);
        let k = rand_heads(&mut rng, 8, 1, 4);
        let v = rand_heads(&mut rng, 8, 1, 4);
        let p = SparseParams { block_size: 4, top_k: 2, n_init_blocks: 0, local_window: 0, mode: AttnMode::Sparse, pooling: Pooling::Mean };
        let a = sparse_attention_prefill(&q, &k, &v, &p).unwrap();
        let b = softmax_causal_attention(&q, &k, &v, 1).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-6);
    }

    #[test]
    fn decode_first_token_and_covering() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let n = 40;
        let q: HeadTensor<f32> = rand_heads(&mut rng, n, 4, 8);
        let k = rand_heads(&mut rng, n, 2, 8);
        let v = rand_heads(&mut rng, n, 2, 8);
        let p = SparseParams { block_size: 8, top_k: 5, n_init_blocks: 0, local_window: 0, mode: AttnMode::Sparse, pooling: Pooling::Mean };
        let dense = softmax_causal_attention(&q, &k, &v, 2).unwrap();
        let mut c = SparseCache::new(2, 8, 8, Pooling::Mean).unwrap();
        for t in 0..n {
            c.append(k.token(t), v.token(t)).unwrap();
            let o = sparse_attention_decode(q.token(t), &c, &p, t).unwrap();
            if t == 0 {
                for h in 0..4 {
                    assert_eq!(&o[h * 8..(h + 1) * 8], v.head(0, h / 2));
                }
            }
            assert!(crate::tensor::max_abs_diff(&o, dense.token(t)) < 1e-6);
        }
    }

    #[test]
    fn decode_state_errors() {
        let c = SparseCache::<f64>::new(1, 2, 4, Pooling::Mean).unwrap();
        let p = SparseParams::default();
        assert!(matches!(sparse_attention_decode(&[0.0, 0.0], &c, &p, 3), Err(Error::State(_))));
        assert!(matches!(sparse_attention_decode(&[0.0, 0.0], &c, &p, 0), Err(Error::State(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]

        #[test]
        fn selection_is_causal_sorted_and_monotone(seed in 0u64..10_000, n in 1usize..120, bs in 1usize..9, w in 0usize..20, init in 0usize..3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k: HeadTensor<f64> = rand_heads(&mut rng, n, 1, 3);
            let c = cache_of(&k, &k, bs);
            let t = rng.gen_range(0..n);
            let q = k.head(rng.gen_range(0..n), 0).to_vec();
            let mut prev: Vec<usize> = Vec::new();
            for top_k in 1..6 {
                let p = SparseParams { block_size: bs, top_k, n_init_blocks: init, local_window: w, mode: AttnMode::Sparse, pooling: Pooling::Mean };
                let sel = select_blocks(&q, &c, 0, &p, t).unwrap();
                prop_assert_eq!(*sel.last().unwrap(), t);
                prop_assert!(sel.windows(2).all(|x| x[0] < x[1]));
                prop_assert!(prev.iter().all(|x| sel.binary_search(x).is_ok()));
                prop_assert_eq!(&sel, &select_blocks(&q, &c, 0, &p, t).unwrap());
                if p.covers(t + 1) {
                    prop_assert_eq!(sel.len(), t + 1);
                }
                prev = sel;
            }
        }
    }
}
