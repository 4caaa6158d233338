//! Decay-gated linear attention in three interchangeable forms.
//!
//! Per query head `h` with decay `λ_h`:
//!
//! ```text
//! S_t = λ_h · S_{t-1} + k_tᵀ v_t
//! o_t = q_t · S_t
//! ```
//!
//! [`linear_attn_recurrent`] is the ground truth. [`linear_attn_chunked`]
//! splits the sequence into chunks and computes a masked intra-chunk product
//! plus a decayed contribution from the state entering the chunk.
//! [`linear_attn_decode_step`] advances a single token and runs the exact
//! same per-head update as the recurrent form.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::kernels::check_gqa;
use crate::real::{dot, Real};
use crate::tensor::HeadTensor;

/// Per-head decay constants, each in `(0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct DecaySchedule {
    lambda: Vec<f64>,
}

impl DecaySchedule {
    pub fn new(lambda: Vec<f64>) -> Result<Self> {
        if lambda.is_empty() {
            return Err(config_err("decay schedule needs at least one head"));
        }
        for (h, &l) in lambda.iter().enumerate() {
            if !(l > 0.0 && l <= 1.0) {
                return Err(config_err(format!("decay[{h}] = {l} is outside (0, 1]")));
            }
        }
        Ok(Self { lambda })
    }

    pub fn lambdas(&self) -> &[f64] {
        &self.lambda
    }

    pub fn n_heads(&self) -> usize {
        self.lambda.len()
    }
}

impl TryFrom<Vec<f64>> for DecaySchedule {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<DecaySchedule> for Vec<f64> {
    fn from(d: DecaySchedule) -> Self {
        d.lambda
    }
}

/// `λ_h = exp(-2^(-8(h+1)/n_heads))`.
pub fn decay_rates(n_heads: usize) -> Result<DecaySchedule> {
    if n_heads == 0 {
        return Err(config_err("decay_rates needs n_heads >= 1"));
    }
    let lambda = (0..n_heads)
        .map(|h| (-(2f64).powf(-8.0 * (h + 1) as f64 / n_heads as f64)).exp())
        .collect();
    DecaySchedule::new(lambda)
}

/// Recurrent memory: one `head_dim_k x head_dim_v` matrix per query head.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearState<T> {
    s: Vec<T>,
    n_heads: usize,
    dk: usize,
    dv: usize,
    tokens_seen: u64,
}

impl<T: Real> LinearState<T> {
    pub fn zeros(n_heads: usize, dk: usize, dv: usize) -> Self {
        Self { s: vec![T::zero(); n_heads * dk * dv], n_heads, dk, dv, tokens_seen: 0 }
    }

    pub fn from_parts(s: Vec<T>, n_heads: usize, dk: usize, dv: usize, tokens_seen: u64) -> Result<Self> {
        if s.len() != n_heads * dk * dv {
            return Err(shape_err(format!("state length {} for {n_heads}x{dk}x{dv}", s.len())));
        }
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite state entry".into()));
        }
        Ok(Self { s, n_heads, dk, dv, tokens_seen })
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.dk, self.dv)
    }

    pub fn tokens_seen(&self) -> u64 {
        self.tokens_seen
    }

    pub fn head(&self, h: usize) -> &[T] {
        let n = self.dk * self.dv;
        &self.s[h * n..(h + 1) * n]
    }

    pub fn data(&self) -> &[T] {
        &self.s
    }

    pub fn frobenius_norm(&self, h: usize) -> f64 {
        self.head(h).iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt()
    }

    fn head_mut(&mut self, h: usize) -> &mut [T] {
        let n = self.dk * self.dv;
        &mut self.s[h * n..(h + 1) * n]
    }

    /// Bytes held by the state at the given element width.
    pub fn size_bytes(&self, bytes_per_elem: usize) -> usize {
        self.s.len() * bytes_per_elem
    }
}

struct Dims {
    n: usize,
    n_heads: usize,
    group: usize,
    dv: usize,
}

fn check_shapes<T: Real>(
    q: &HeadTensor<T>,
    k: &HeadTensor<T>,
    v: &HeadTensor<T>,
    decay: &DecaySchedule,
    state: &LinearState<T>,
) -> Result<Dims> {
    let n = q.n_tokens();
    if k.n_tokens() != n || v.n_tokens() != n {
        return Err(shape_err("Q, K and V token counts differ"));
    }
    if k.n_heads() != v.n_heads() {
        return Err(shape_err("K and V head counts differ"));
    }
    let group = check_gqa(q.n_heads(), k.n_heads())?;
    if q.head_dim() != k.head_dim() {
        return Err(shape_err("Q and K head dims differ"));
    }
    if decay.n_heads() != q.n_heads() {
        return Err(shape_err(format!(
            "decay schedule has {} heads, queries have {}",
            decay.n_heads(),
            q.n_heads()
        )));
    }
    if state.n_heads != q.n_heads() || state.dk != k.head_dim() || state.dv != v.head_dim() {
        return Err(shape_err(format!(
            "state {}x{}x{} does not match heads {} with dims {}x{}",
            state.n_heads,
            state.dk,
            state.dv,
            q.n_heads(),
            k.head_dim(),
            v.head_dim()
        )));
    }
    Ok(Dims { n, n_heads: q.n_heads(), group, dv: v.head_dim() })
}

/// One recurrent update of a single head followed by the readout `q · S`.
#[inline]
fn step_head<T: Real>(s: &mut [T], lambda: T, q: &[T], k: &[T], v: &[T], out: &mut [T], flops: &mut u64) {
    let dv = v.len();
    for (i, &ki) in k.iter().enumerate() {
        let row = &mut s[i * dv..(i + 1) * dv];
        for (sij, &vj) in row.iter_mut().zip(v) {
            *sij = lambda * *sij + ki * vj;
        }
    }
    out.iter_mut().for_each(|o| *o = T::zero());
    for (i, &qi) in q.iter().enumerate() {
        let row = &s[i * dv..(i + 1) * dv];
        for (o, &sij) in out.iter_mut().zip(row) {
            *o += qi * sij;
        }
    }
    *flops += (k.len() * dv * 3 + q.len() * dv * 2) as u64;
}

fn recurrent_impl<T: Real>(
    q: &HeadTensor<T>,
    k: &HeadTensor<T>,
    v: &HeadTensor<T>,
    decay: &DecaySchedule,
    s0: &LinearState<T>,
    flops: &mut u64,
) -> Result<(HeadTensor<T>, LinearState<T>)> {
    let d = check_shapes(q, k, v, decay, s0)?;
    let mut state = s0.clone();
    let mut out = HeadTensor::zeros(d.n, d.n_heads, d.dv);
    let lambdas: Vec<T> = decay.lambdas().iter().map(|&l| T::of(l)).collect();
    for t in 0..d.n {
        for h in 0..d.n_heads {
            let g = h / d.group;
            step_head(state.head_mut(h), lambdas[h], q.head(t, h), k.head(t, g), v.head(t, g), out.head_mut(t, h), flops);
        }
    }
    state.tokens_seen += d.n as u64;
    Ok((out, state))
}

/// Token-by-token recurrence starting from `s0`. Returns every output and the
/// final state.
pub fn linear_attn_recurrent<T: Real>(
    q: &HeadTensor<T>,
    k: &HeadTensor<T>,
    v: &HeadTensor<T>,
    decay: &DecaySchedule,
    s0: &LinearState<T>,
) -> Result<(HeadTensor<T>, LinearState<T>)> {
    let mut flops = 0;
    recurrent_impl(q, k, v, decay, s0, &mut flops)
}

/// Same as [`linear_attn_recurrent`], also returning the number of
/// floating-point operations executed.
pub fn linear_attn_recurrent_counted<T: Real>(
    q: &HeadTensor<T>,
    k: &HeadTensor<T>,
    v: &HeadTensor<T>,
    decay: &DecaySchedule,
    s0: &LinearState<T>,
) -> Result<(HeadTensor<T>, LinearState<T>, u64)> {
    let mut flops = 0;
    let (o, s) = recurrent_impl(q, k, v, decay, s0, &mut flops)?;
    Ok((o, s, flops))
}

/// Additive perturbation of one intra-chunk mask entry. Only used to confirm
/// that the equivalence checks catch a corrupted mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskTamper {
    pub row: usize,
    pub col: usize,
    pub delta: f64,
}

/// Chunked form: within a chunk starting at `s`, local index `i`,
///
/// ```text
/// o_t = Σ_{j<=i} λ^(i-j) (q_t·k_{s+j}) v_{s+j}  +  λ^(i+1) q_t·S_pre
/// S_post = λ^C S_pre + Σ_j λ^(C-1-j) k_jᵀ v_j
/// ```
///
/// The last chunk may be shorter than `chunk_size`; its mask is simply
/// smaller.
pub fn linear_attn_chunked<T: Real>(
    q: &HeadTensor<T>,
    k: &HeadTensor<T>,
    v: &HeadTensor<T>,
    decay: &DecaySchedule,
    chunk_size: usize,
    s0: &LinearState<T>,
) -> Result<(HeadTensor<T>, LinearState<T>)> {
    linear_attn_chunked_tampered(q, k, v, decay, chunk_size, s0, None)
}

#[doc(hidden)]
pub fn linear_attn_chunked_tampered<T: Real>(
    q: &HeadTensor<T>,
    k: &HeadTensor<T>,
    v: &HeadTensor<T>,
    decay: &DecaySchedule,
    chunk_size: usize,
    s0: &LinearState<T>,
    tamper: Option<MaskTamper>,
) -> Result<(HeadTensor<T>, LinearState<T>)> {
    if chunk_size == 0 {
        return Err(config_err("chunk_size must be >= 1"));
    }
    let d = check_shapes(q, k, v, decay, s0)?;
    let mut state = s0.clone();
    let mut out = HeadTensor::zeros(d.n, d.n_heads, d.dv);
    let c_max = chunk_size.min(d.n.max(1));
    let mut mask = vec![T::zero(); c_max * c_max];
    let mut scores = vec![T::zero(); c_max * c_max];
    let mut pow = vec![T::zero(); c_max + 1];
    let mut qs = vec![T::zero(); d.dv];

    for h in 0..d.n_heads {
        let g = h / d.group;
        let lambda = T::of(decay.lambdas()[h]);
        let mut start = 0;
        while start < d.n {
            let end = (start + chunk_size).min(d.n);
            let c = end - start;
            for (e, p) in pow.iter_mut().enumerate().take(c + 1) {
                *p = lambda.powi(e as i32);
            }
            // decay mask M[i][j] = λ^(i-j) for j <= i
            for i in 0..c {
                for j in 0..c {
                    mask[i * c + j] = if j <= i { pow[i - j] } else { T::zero() };
                }
            }
            if let Some(tm) = tamper {
                if tm.row < c && tm.col < c {
                    mask[tm.row * c + tm.col] += T::of(tm.delta);
                }
            }
            // (Q_c K_cᵀ) ⊙ M
            for i in 0..c {
                let qi = q.head(start + i, h);
                for j in 0..c {
                    let m = mask[i * c + j];
                    scores[i * c + j] = if m == T::zero() { T::zero() } else { dot(qi, k.head(start + j, g)) * m };
                }
            }
            let s_pre = state.head(h).to_vec();
            for i in 0..c {
                let t = start + i;
                let qi = q.head(t, h);
                // inter-chunk: q · S_pre
                qs.iter_mut().for_each(|x| *x = T::zero());
                for (a, &qa) in qi.iter().enumerate() {
                    for (x, &sv) in qs.iter_mut().zip(&s_pre[a * d.dv..(a + 1) * d.dv]) {
                        *x += qa * sv;
                    }
                }
                let o = out.head_mut(t, h);
                let inter = pow[i + 1];
                for (oj, &x) in o.iter_mut().zip(&qs) {
                    *oj = inter * x;
                }
                for j in 0..c {
                    let w = scores[i * c + j];
                    if w == T::zero() {
                        continue;
                    }
                    for (oj, &vj) in o.iter_mut().zip(v.head(start + j, g)) {
                        *oj += w * vj;
                    }
                }
            }
            // state handed to the next chunk
            let st = state.head_mut(h);
            let decay_all = pow[c];
            st.iter_mut().for_each(|x| *x *= decay_all);
            for j in 0..c {
                let w = pow[c - 1 - j];
                let kj = k.head(start + j, g);
                let vj = v.head(start + j, g);
                for (a, &ka) in kj.iter().enumerate() {
                    let coef = w * ka;
                    for (x, &vb) in st[a * d.dv..(a + 1) * d.dv].iter_mut().zip(vj) {
                        *x += coef * vb;
                    }
                }
            }
            start = end;
        }
    }
    state.tokens_seen += d.n as u64;
    Ok((out, state))
}

/// Advances `state` by one token and returns the per-head outputs, laid out
/// `(n_heads, head_dim_v)`. `q` is `(n_heads, dk)`, `k` is `(n_kv_heads, dk)`
/// and `v` is `(n_kv_heads, dv)`, all flattened.
pub fn linear_attn_decode_step<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    decay: &DecaySchedule,
    state: &mut LinearState<T>,
) -> Result<Vec<T>> {
    let (n_heads, dk, dv) = (state.n_heads, state.dk, state.dv);
    if decay.n_heads() != n_heads {
        return Err(shape_err("decay schedule and state head counts differ"));
    }
    if q.len() != n_heads * dk || k.len() % dk != 0 || v.len() % dv != 0 || k.len() / dk != v.len() / dv {
        return Err(shape_err(format!(
            "decode inputs q={}, k={}, v={} do not fit state {n_heads}x{dk}x{dv}",
            q.len(),
            k.len(),
            v.len()
        )));
    }
    let n_kv = k.len() / dk;
    let group = check_gqa(n_heads, n_kv)?;
    if q.iter().chain(k).chain(v).any(|x| !x.is_finite()) {
        return Err(Error::Numeric("non-finite decode input".into()));
    }
    let mut out = vec![T::zero(); n_heads * dv];
    let mut flops = 0;
    for h in 0..n_heads {
        let g = h / group;
        let lambda = T::of(decay.lambdas()[h]);
        let n = dk * dv;
        step_head(
            &mut state.s[h * n..(h + 1) * n],
            lambda,
            &q[h * dk..(h + 1) * dk],
            &k[g * dk..(g + 1) * dk],
            &v[g * dv..(g + 1) * dv],
            &mut out[h * dv..(h + 1) * dv],
            &mut flops,
        );
    }
    state.tokens_seen += 1;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_heads(rng: &mut ChaCha8Rng, n: usize, h: usize, d: usize) -> HeadTensor<f64> {
        let s = 1.0 / (d as f64).sqrt();
        HeadTensor::new((0..n * h * d).map(|_| rng.gen_range(-1.0..1.0) * s).collect(), n, h, d).unwrap()
    }

    fn scalar(v: f64) -> HeadTensor<f64> {
        HeadTensor::new(vec![v], 1, 1, 1).unwrap()
    }

    #[test]
    fn decay_formula() {
        let d = decay_rates(1).unwrap();
        assert!((d.lambdas()[0] - (-0.00390625f64).exp()).abs() < 1e-15);
        assert!((d.lambdas()[0] - 0.996101).abs() < 1e-6);
        let d8 = decay_rates(8).unwrap();
        for w in d8.lambdas().windows(2) {
            assert!(w[0] < w[1]);
        }
        assert!(d8.lambdas().iter().all(|&l| l > 0.0 && l < 1.0));
        assert!(matches!(decay_rates(0), Err(Error::Config(_))));
        assert!(DecaySchedule::new(vec![0.0]).is_err());
        assert!(DecaySchedule::new(vec![1.5]).is_err());
    }

    #[test]
    fn single_scalar_step() {
        let d = DecaySchedule::new(vec![0.9]).unwrap();
        let (o, s) = linear_attn_recurrent(&scalar(2.0), &scalar(3.0), &scalar(5.0), &d, &LinearState::zeros(1, 1, 1)).unwrap();
        assert_eq!(o.data(), &[30.0]);
        assert_eq!(s.data(), &[15.0]);
        assert_eq!(s.tokens_seen(), 1);
    }

    #[test]
    fn two_step_hand_recurrence() {
        let d = DecaySchedule::new(vec![0.5]).unwrap();
        let ones = HeadTensor::new(vec![1.0; 2], 2, 1, 1).unwrap();
        let (o, s) = linear_attn_recurrent(&ones, &ones, &ones, &d, &LinearState::zeros(1, 1, 1)).unwrap();
        assert_eq!(o.data(), &[1.0, 1.5]);
        assert_eq!(s.data(), &[1.5]);
    }

    #[test]
    fn zero_decay_is_memoryless() {
        // λ = 0 lies outside the public schedule's domain; build it directly.
        let d = DecaySchedule { lambda: vec![0.0] };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = rand_heads(&mut rng, 6, 1, 3);
        let k = rand_heads(&mut rng, 6, 1, 3);
        let v = rand_heads(&mut rng, 6, 1, 3);
        let (o, _) = linear_attn_recurrent(&q, &k, &v, &d, &LinearState::zeros(1, 3, 3)).unwrap();
        for t in 0..6 {
            let qk = dot(q.head(t, 0), k.head(t, 0));
            for c in 0..3 {
                assert!((o.head(t, 0)[c] - qk * v.head(t, 0)[c]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn chunked_degenerate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 40;
        let q = rand_heads(&mut rng, n, 4, 8);
        let k = rand_heads(&mut rng, n, 2, 8);
        let v = rand_heads(&mut rng, n, 2, 8);
        let d = decay_rates(4).unwrap();
        let s0 = LinearState::zeros(4, 8, 8);
        let (ro, rs) = linear_attn_recurrent(&q, &k, &v, &d, &s0).unwrap();
        for c in [1, n] {
            let (co, cs) = linear_attn_chunked(&q, &k, &v, &d, c, &s0).unwrap();
            assert!(co.max_abs_diff(&ro) < 1e-12, "chunk {c}");
            assert!(crate::tensor::max_abs_diff(cs.data(), rs.data()) < 1e-12);
            assert_eq!(cs.tokens_seen(), rs.tokens_seen());
        }
        assert!(matches!(linear_attn_chunked(&q, &k, &v, &d, 0, &s0), Err(Error::Config(_))));
    }

    #[test]
    fn chunked_ragged_matches_recurrent() {
        let d = decay_rates(2).unwrap();
        for seed in 0..3 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 257;
            let q = rand_heads(&mut rng, n, 2, 16);
            let k = rand_heads(&mut rng, n, 1, 16);
            let v = rand_heads(&mut rng, n, 1, 16);
            let s0 = LinearState::from_parts((0..2 * 256).map(|i| (i as f64 * 0.01).sin()).collect(), 2, 16, 16, 0).unwrap();
            let (ro, rs) = linear_attn_recurrent(&q, &k, &v, &d, &s0).unwrap();
            for c in [7, 16, 64] {
                let (co, cs) = linear_attn_chunked(&q, &k, &v, &d, c, &s0).unwrap();
                assert!(co.max_abs_diff(&ro) < 1e-10);
                assert!(crate::tensor::max_abs_diff(cs.data(), rs.data()) < 1e-10);
            }
        }
    }

    #[test]
    fn chunked_f32_tolerance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 200;
        let q = rand_heads(&mut rng, n, 2, 8);
        let k = rand_heads(&mut rng, n, 2, 8);
        let v = rand_heads(&mut rng, n, 2, 8);
        let d = decay_rates(2).unwrap();
        let (ro, _) = linear_attn_recurrent(&q, &k, &v, &d, &LinearState::zeros(2, 8, 8)).unwrap();
        let (co, _) = linear_attn_chunked(&q.cast::<f32>(), &k.cast(), &v.cast(), &d, 64, &LinearState::zeros(2, 8, 8)).unwrap();
        assert!(co.cast::<f64>().max_abs_diff(&ro) < 2e-3);
    }

    #[test]
    fn tampered_mask_breaks_equivalence() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = rand_heads(&mut rng, 32, 1, 4);
        let k = rand_heads(&mut rng, 32, 1, 4);
        let v = rand_heads(&mut rng, 32, 1, 4);
        let d = decay_rates(1).unwrap();
        let s0 = LinearState::zeros(1, 4, 4);
        let (ro, _) = linear_attn_recurrent(&q, &k, &v, &d, &s0).unwrap();
        let tm = MaskTamper { row: 3, col: 1, delta: 0.25 };
        let (co, _) = linear_attn_chunked_tampered(&q, &k, &v, &d, 16, &s0, Some(tm)).unwrap();
        assert!(co.max_abs_diff(&ro) > 1e-6);
    }

    #[test]
    fn decode_loop_is_bitwise_recurrent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 128;
        let q = rand_heads(&mut rng, n, 4, 8);
        let k = rand_heads(&mut rng, n, 2, 8);
        let v = rand_heads(&mut rng, n, 2, 8);
        let d = decay_rates(4).unwrap();
        let (ro, rs) = linear_attn_recurrent(&q, &k, &v, &d, &LinearState::zeros(4, 8, 8)).unwrap();
        let mut st = LinearState::zeros(4, 8, 8);
        for t in 0..n {
            let o = linear_attn_decode_step(q.token(t), k.token(t), v.token(t), &d, &mut st).unwrap();
            assert_eq!(o.as_slice(), ro.token(t));
        }
        assert_eq!(st, rs);
    }

    #[test]
    fn decode_zero_value_gives_zero() {
        let d = decay_rates(1).unwrap();
        let mut st = LinearState::zeros(1, 2, 2);
        let o = linear_attn_decode_step(&[1.0, 2.0], &[3.0, 4.0], &[0.0, 0.0], &d, &mut st).unwrap();
        assert_eq!(o, vec![0.0, 0.0]);
        assert_eq!(st.tokens_seen(), 1);
        let bad = linear_attn_decode_step(&[f64::NAN, 0.0], &[0.0, 0.0], &[0.0, 0.0], &d, &mut st);
        assert!(matches!(bad, Err(Error::Numeric(_))));
    }

    #[test]
    fn state_shape_mismatch() {
        let q = HeadTensor::<f64>::zeros(2, 1, 4);
        let d = decay_rates(1).unwrap();
        let r = linear_attn_recurrent(&q, &q, &q, &d, &LinearState::zeros(1, 3, 4));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn flop_count_is_affine_in_length() {
        let d = decay_rates(2).unwrap();
        let counts: Vec<u64> = [64usize, 128, 256, 512]
            .iter()
            .map(|&n| {
                let z = HeadTensor::<f64>::zeros(n, 2, 8);
                linear_attn_recurrent_counted(&z, &z, &z, &d, &LinearState::zeros(2, 8, 8)).unwrap().2
            })
            .collect();
        let per_token = (counts[1] - counts[0]) / 64;
        for (i, &n) in [64u64, 128, 256, 512].iter().enumerate() {
            assert_eq!(counts[i], per_token * n);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn chunked_equals_recurrent(n in 1usize..160, chunk in prop::sample::select(vec![1usize, 7, 16, 64]), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let q = rand_heads(&mut rng, n, 2, 4);
            let k = rand_heads(&mut rng, n, 1, 4);
            let v = rand_heads(&mut rng, n, 1, 4);
            let d = decay_rates(2).unwrap();
            let s0 = LinearState::zeros(2, 4, 4);
            let (ro, rs) = linear_attn_recurrent(&q, &k, &v, &d, &s0).unwrap();
            let (co, cs) = linear_attn_chunked(&q, &k, &v, &d, chunk, &s0).unwrap();
            prop_assert!(co.max_abs_diff(&ro) < 1e-10);
            prop_assert!(crate::tensor::max_abs_diff(cs.data(), rs.data()) < 1e-10);
        }

        #[test]
        fn state_stays_bounded(seed in 0u64..1000, lam in 0.5f64..0.99) {
            // unit-norm keys and values: ‖k vᵀ‖ = 1, so ‖S‖_F <= 1 / (1 - λ)
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 300;
            let unit = |rng: &mut ChaCha8Rng| {
                let x: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let nrm = x.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-9);
                x.into_iter().map(|a| a / nrm).collect::<Vec<_>>()
            };
            let k: Vec<f64> = (0..n).flat_map(|_| unit(&mut rng)).collect();
            let v: Vec<f64> = (0..n).flat_map(|_| unit(&mut rng)).collect();
            let d = DecaySchedule::new(vec![lam]).unwrap();
            let mut st = LinearState::zeros(1, 4, 4);
            for t in 0..n {
                linear_attn_decode_step(&k[t * 4..t * 4 + 4], &k[t * 4..t * 4 + 4], &v[t * 4..t * 4 + 4], &d, &mut st).unwrap();
                prop_assert!(st.frobenius_norm(0) <= 1.0 / (1.0 - lam) + 1e-9);
            }
        }
    }
}
