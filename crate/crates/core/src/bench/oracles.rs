//! Brute-force reference implementations. Each is written directly from the
//! defining formula, in f64, without sharing code with the fast paths.

use crate::linattn::DecaySchedule;
use crate::sparseattn::SparseParams;
use crate::tensor::HeadTensor;

fn dot64(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn to64<T: crate::Real>(x: &HeadTensor<T>) -> HeadTensor<f64> {
    x.cast::<f64>()
}

/// `o_t = Σ_{s<=t} λ^(t-s) (q_t·k_s) v_s` from a zero state.
pub fn linear_attention<T: crate::Real>(q: &HeadTensor<T>, k: &HeadTensor<T>, v: &HeadTensor<T>, decay: &DecaySchedule) -> HeadTensor<f64> {
    let (q, k, v) = (to64(q), to64(k), to64(v));
    let (n, h, _) = q.shape();
    let group = h / k.n_heads();
    let dv = v.head_dim();
    let mut out = HeadTensor::zeros(n, h, dv);
    for head in 0..h {
        let lambda = decay.lambdas()[head];
        for t in 0..n {
            let mut acc = vec![0.0; dv];
            for s in 0..=t {
                let w = lambda.powi((t - s) as i32) * dot64(q.head(t, head), k.head(s, head / group));
                for (a, x) in acc.iter_mut().zip(v.head(s, head / group)) {
                    *a += w * x;
                }
            }
            out.head_mut(t, head).copy_from_slice(&acc);
        }
    }
    out
}

/// Scaled softmax attention under an explicit `allowed(head, t, s)` mask.
pub fn masked_softmax<T: crate::Real>(
    q: &HeadTensor<T>,
    k: &HeadTensor<T>,
    v: &HeadTensor<T>,
    allowed: impl Fn(usize, usize, usize) -> bool,
) -> HeadTensor<f64> {
    let (q, k, v) = (to64(q), to64(k), to64(v));
    let (n, h, d) = q.shape();
    let group = h / k.n_heads();
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = HeadTensor::zeros(n, h, v.head_dim());
    for head in 0..h {
        let g = head / group;
        for t in 0..n {
            let scores: Vec<Option<f64>> =
                (0..n).map(|s| allowed(head, t, s).then(|| dot64(q.head(t, head), k.head(s, g)) * scale)).collect();
            let max = scores.iter().flatten().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |x| (x - max).exp())).collect();
            let z: f64 = weights.iter().sum();
            let o = out.head_mut(t, head);
            for (s, w) in weights.iter().enumerate() {
                for (oi, x) in o.iter_mut().zip(v.head(s, g)) {
                    *oi += w / z * x;
                }
            }
        }
    }
    out
}

/// Full causal softmax attention.
pub fn causal_softmax<T: crate::Real>(q: &HeadTensor<T>, k: &HeadTensor<T>, v: &HeadTensor<T>) -> HeadTensor<f64> {
    masked_softmax(q, k, v, |_, t, s| s <= t)
}

/// Blocks chosen for query block `qb` of KV group `g` in prefill: the pooled
/// block query scores the mean key of every complete earlier block that is
/// neither a sink block nor wholly inside the local window of the block's
/// last token; the `top_k` best win, ties to the later block.
pub fn prefill_selection(q: &HeadTensor<f64>, k: &HeadTensor<f64>, p: &SparseParams, g: usize, qb: usize) -> Vec<usize> {
    let (n, h, d) = q.shape();
    let group = h / k.n_heads();
    let bs = p.block_size;
    let tokens: Vec<usize> = (qb * bs..((qb + 1) * bs).min(n)).collect();
    let t_ref = *tokens.last().expect("non-empty block");
    let mut pooled = vec![0.0; d];
    for &t in &tokens {
        for head in g * group..(g + 1) * group {
            for (a, x) in pooled.iter_mut().zip(q.head(t, head)) {
                *a += x;
            }
        }
    }
    pooled.iter_mut().for_each(|a| *a /= (tokens.len() * group) as f64);
    let mut scored = Vec::new();
    for b in p.n_init_blocks..qb {
        let inside_window = b * bs + p.local_window >= t_ref + 1;
        if inside_window {
            continue;
        }
        let mut mean = vec![0.0; d];
        for s in b * bs..(b + 1) * bs {
            for (m, x) in mean.iter_mut().zip(k.head(s, g)) {
                *m += x / bs as f64;
            }
        }
        scored.push((dot64(&pooled, &mean), b));
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    scored.into_iter().take(p.top_k).map(|(_, b)| b).collect()
}

/// Sparse prefill computed as dense attention under the selection mask.
pub fn sparse_prefill<T: crate::Real>(q: &HeadTensor<T>, k: &HeadTensor<T>, v: &HeadTensor<T>, p: &SparseParams) -> HeadTensor<f64> {
    let (q64, k64) = (to64(q), to64(k));
    let n = q.n_tokens();
    let group = q.n_heads() / k.n_heads();
    let bs = p.block_size;
    let n_qblocks = n.div_ceil(bs);
    let chosen: Vec<Vec<Vec<usize>>> = (0..k.n_heads())
        .map(|g| (0..n_qblocks).map(|qb| prefill_selection(&q64, &k64, p, g, qb)).collect())
        .collect();
    masked_softmax(q, k, v, |head, t, s| {
        if s > t {
            return false;
        }
        let (bt, b) = (t / bs, s / bs);
        b < p.n_init_blocks || b == bt || s + p.local_window > t || chosen[head / group][bt].contains(&b)
    })
}
