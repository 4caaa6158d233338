//! Numeric primitives shared by every attention variant: RoPE, RMS and QK
//! normalization, causal softmax attention and the sigmoid output gate.
//!
//! `softmax_causal_attention` is the reference every sparse path is checked
//! against. The sparse module calls the same [`attend`] routine, so a dense
//! selection reproduces it bit for bit.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::real::{dot, Real};
use crate::tensor::{HeadTensor, Matrix};

pub const DEFAULT_THETA_BASE: f64 = 10_000.0;
pub const DEFAULT_QK_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RopeParams {
    pub theta_base: f64,
    pub head_dim: usize,
}

impl RopeParams {
    pub fn new(theta_base: f64, head_dim: usize) -> Result<Self> {
        let p = Self { theta_base, head_dim };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.head_dim == 0 || self.head_dim % 2 != 0 {
            return Err(config_err(format!("rope head_dim must be even and positive, got {}", self.head_dim)));
        }
        if !(self.theta_base > 1.0) || !self.theta_base.is_finite() {
            return Err(config_err(format!("rope theta_base must be > 1, got {}", self.theta_base)));
        }
        Ok(())
    }

    /// Angular frequency of rotation pair `i`.
    pub fn frequency(&self, pair: usize) -> f64 {
        self.theta_base.powf(-2.0 * pair as f64 / self.head_dim as f64)
    }
}

/// Rotates each consecutive pair `(x[2i], x[2i+1])` of every head by
/// `position * theta_base^(-2i/head_dim)`.
pub fn rope_apply<T: Real>(x: &HeadTensor<T>, positions: &[usize], p: &RopeParams) -> Result<HeadTensor<T>> {
    rope_rotate(x, positions, p, false)
}

/// Inverse rotation; also the transpose used when back-propagating through
/// [`rope_apply`].
pub fn rope_unapply<T: Real>(x: &HeadTensor<T>, positions: &[usize], p: &RopeParams) -> Result<HeadTensor<T>> {
    rope_rotate(x, positions, p, true)
}

fn rope_rotate<T: Real>(x: &HeadTensor<T>, positions: &[usize], p: &RopeParams, inverse: bool) -> Result<HeadTensor<T>> {
    p.validate()?;
    if x.head_dim() != p.head_dim {
        return Err(config_err(format!(
            "rope head_dim {} does not match tensor head_dim {}",
            p.head_dim,
            x.head_dim()
        )));
    }
    if positions.len() != x.n_tokens() {
        return Err(shape_err(format!(
            "{} positions for {} tokens",
            positions.len(),
            x.n_tokens()
        )));
    }
    let half = p.head_dim / 2;
    let freqs: Vec<f64> = (0..half).map(|i| p.frequency(i)).collect();
    let mut out = x.clone();
    let mut cs = vec![(T::one(), T::zero()); half];
    for (t, &m) in positions.iter().enumerate() {
        for (c, &f) in cs.iter_mut().zip(&freqs) {
            let angle = m as f64 * f;
            let s = if inverse { -angle.sin() } else { angle.sin() };
            *c = (T::of(angle.cos()), T::of(s));
        }
        for h in 0..x.n_heads() {
            let row = out.head_mut(t, h);
            for (i, &(cos, sin)) in cs.iter().enumerate() {
                let a = row[2 * i];
                let b = row[2 * i + 1];
                row[2 * i] = a * cos - b * sin;
                row[2 * i + 1] = a * sin + b * cos;
            }
        }
    }
    Ok(out)
}

fn inv_rms<T: Real>(v: &[T], eps: T) -> T {
    let mut ss = T::zero();
    for &x in v {
        ss += x * x;
    }
    T::one() / (ss / T::of(v.len() as f64) + eps).sqrt()
}

/// Per token and head: `x / sqrt(mean(x²) + eps) ⊙ gamma`.
pub fn qk_norm<T: Real>(x: &HeadTensor<T>, gamma: &[T], eps: f64) -> Result<HeadTensor<T>> {
    if x.head_dim() == 0 {
        return Err(shape_err("qk_norm on zero-length heads"));
    }
    if gamma.len() != x.head_dim() {
        return Err(shape_err(format!("gamma length {} for head_dim {}", gamma.len(), x.head_dim())));
    }
    if !(eps > 0.0) {
        return Err(config_err(format!("qk_norm eps must be positive, got {eps}")));
    }
    let eps = T::of(eps);
    let mut out = x.clone();
    for t in 0..x.n_tokens() {
        for h in 0..x.n_heads() {
            let row = out.head_mut(t, h);
            let r = inv_rms(row, eps);
            for (v, &g) in row.iter_mut().zip(gamma) {
                *v = *v * r * g;
            }
        }
    }
    Ok(out)
}

/// Row-wise RMS normalization of a hidden-state matrix.
pub fn rms_norm<T: Real>(x: &Matrix<T>, gamma: &[T], eps: f64) -> Result<Matrix<T>> {
    if gamma.len() != x.cols() {
        return Err(shape_err(format!("norm scale length {} for width {}", gamma.len(), x.cols())));
    }
    let eps = T::of(eps);
    let mut out = x.clone();
    for r in 0..x.rows() {
        let row = out.row_mut(r);
        let s = inv_rms(row, eps);
        for (v, &g) in row.iter_mut().zip(gamma) {
            *v = *v * s * g;
        }
    }
    Ok(out)
}

/// Flat key/value storage with `(token, kv_head, head_dim)` layout.
#[derive(Clone, Copy)]
pub(crate) struct KvView<'a, T> {
    pub keys: &'a [T],
    pub values: &'a [T],
    pub n_kv_heads: usize,
    pub head_dim: usize,
}

impl<'a, T: Real> KvView<'a, T> {
    pub fn of(k: &'a HeadTensor<T>, v: &'a HeadTensor<T>) -> Self {
        Self { keys: k.data(), values: v.data(), n_kv_heads: k.n_heads(), head_dim: k.head_dim() }
    }

    #[inline]
    pub fn key(&self, pos: usize, kv_head: usize) -> &'a [T] {
        let off = (pos * self.n_kv_heads + kv_head) * self.head_dim;
        &self.keys[off..off + self.head_dim]
    }

    #[inline]
    pub fn value(&self, pos: usize, kv_head: usize) -> &'a [T] {
        let off = (pos * self.n_kv_heads + kv_head) * self.head_dim;
        &self.values[off..off + self.head_dim]
    }
}

/// Exact softmax attention of one query over the listed positions.
/// `out` is overwritten.
pub(crate) fn attend<T: Real, I>(q: &[T], kv: &KvView<'_, T>, kv_head: usize, positions: I, scores: &mut Vec<T>, out: &mut [T])
where
    I: Iterator<Item = usize> + Clone,
{
    let scale = T::one() / T::of(kv.head_dim as f64).sqrt();
    scores.clear();
    let mut max = T::neg_infinity();
    for j in positions.clone() {
        let s = dot(q, kv.key(j, kv_head)) * scale;
        if s > max {
            max = s;
        }
        scores.push(s);
    }
    out.iter_mut().for_each(|o| *o = T::zero());
    let mut denom = T::zero();
    for (j, s) in positions.zip(scores.iter()) {
        let w = (*s - max).exp();
        denom += w;
        for (o, &v) in out.iter_mut().zip(kv.value(j, kv_head)) {
            *o += w * v;
        }
    }
    for o in out.iter_mut() {
        *o /= denom;
    }
}

pub(crate) fn check_gqa(n_heads: usize, n_kv_heads: usize) -> Result<usize> {
    if n_kv_heads == 0 || n_kv_heads > n_heads || n_heads % n_kv_heads != 0 {
        return Err(config_err(format!(
            "n_heads {n_heads} is not a multiple of n_kv_heads {n_kv_heads}"
        )));
    }
    Ok(n_heads / n_kv_heads)
}

/// Causal scaled dot-product attention with grouped KV heads. Query head `h`
/// reads KV head `h / (n_heads / n_kv_heads)`.
pub fn softmax_causal_attention<T: Real>(
    q: &HeadTensor<T>,
    k: &HeadTensor<T>,
    v: &HeadTensor<T>,
    n_kv_heads: usize,
) -> Result<HeadTensor<T>> {
    if k.n_heads() != n_kv_heads || v.n_heads() != n_kv_heads {
        return Err(config_err(format!(
            "K/V carry {}/{} heads, expected {n_kv_heads}",
            k.n_heads(),
            v.n_heads()
        )));
    }
    let group = check_gqa(q.n_heads(), n_kv_heads)?;
    if k.n_tokens() != q.n_tokens() || v.n_tokens() != q.n_tokens() {
        return Err(shape_err("Q, K and V token counts differ"));
    }
    if k.head_dim() != q.head_dim() || v.head_dim() != q.head_dim() {
        return Err(shape_err("Q, K and V head dims differ"));
    }
    let kv = KvView::of(k, v);
    let mut out = HeadTensor::zeros(q.n_tokens(), q.n_heads(), q.head_dim());
    let mut scores = Vec::with_capacity(q.n_tokens());
    for t in 0..q.n_tokens() {
        for h in 0..q.n_heads() {
            attend(q.head(t, h), &kv, h / group, 0..t + 1, &mut scores, out.head_mut(t, h));
        }
    }
    Ok(out)
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Output gate projection; `weight` maps the block input (width d_model) to the
/// attention output width.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<T> {
    pub weight: Matrix<T>,
}

/// `attn_out ⊙ sigmoid(block_input · weight)`.
pub fn output_gate<T: Real>(block_input: &Matrix<T>, attn_out: &Matrix<T>, g: &GateParams<T>) -> Result<Matrix<T>> {
    if block_input.cols() != g.weight.rows() || attn_out.cols() != g.weight.cols() || block_input.rows() != attn_out.rows() {
        return Err(shape_err(format!(
            "gate {}x{} with input {}x{} and attention output {}x{}",
            g.weight.rows(),
            g.weight.cols(),
            block_input.rows(),
            block_input.cols(),
            attn_out.rows(),
            attn_out.cols()
        )));
    }
    let mut pre = block_input.matmul(&g.weight)?;
    for (p, &a) in pre.data_mut().iter_mut().zip(attn_out.data()) {
        *p = a * sigmoid(*p);
    }
    Ok(pre)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_heads(rng: &mut ChaCha8Rng, n: usize, h: usize, d: usize) -> HeadTensor<f64> {
        HeadTensor::new((0..n * h * d).map(|_| rng.gen_range(-1.0..1.0)).collect(), n, h, d).unwrap()
    }

    /// Rotation via an explicit 2x2 matrix per pair.
    fn rotate_oracle(x: &[f64], m: usize, base: f64) -> Vec<f64> {
        let d = x.len();
        let mut out = vec![0.0; d];
        for i in 0..d / 2 {
            let theta = m as f64 * base.powf(-2.0 * i as f64 / d as f64);
            let rot = [[theta.cos(), -theta.sin()], [theta.sin(), theta.cos()]];
            out[2 * i] = rot[0][0] * x[2 * i] + rot[0][1] * x[2 * i + 1];
            out[2 * i + 1] = rot[1][0] * x[2 * i] + rot[1][1] * x[2 * i + 1];
        }
        out
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_heads(&mut rng, 3, 2, 2);
        let p = RopeParams::new(DEFAULT_THETA_BASE, 2).unwrap();
        let y = rope_apply(&x, &[0, 0, 0], &p).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn rope_unit_rotation() {
        let x = HeadTensor::new(vec![1.0f64, 0.0], 1, 1, 2).unwrap();
        let p = RopeParams::new(DEFAULT_THETA_BASE, 2).unwrap();
        let y = rope_apply(&x, &[1], &p).unwrap();
        assert!((y.data()[0] - 0.540302).abs() < 1e-6);
        assert!((y.data()[1] - 0.841471).abs() < 1e-6);
    }

    #[test]
    fn rope_matches_rotation_matrix_and_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 16;
        let p = RopeParams::new(DEFAULT_THETA_BASE, d).unwrap();
        let q = random_heads(&mut rng, 1, 1, d);
        let k = random_heads(&mut rng, 1, 1, d);
        let (m, n) = (5usize, 17usize);
        let base_dot: f64 = {
            let a = rotate_oracle(q.data(), m, p.theta_base);
            let b = rotate_oracle(k.data(), n, p.theta_base);
            a.iter().zip(&b).map(|(x, y)| x * y).sum()
        };
        for s in 0..=32 {
            let qr = rope_apply(&q, &[m + s], &p).unwrap();
            let kr = rope_apply(&k, &[n + s], &p).unwrap();
            let oracle = rotate_oracle(q.data(), m + s, p.theta_base);
            assert!(crate::tensor::max_abs_diff(qr.data(), &oracle) < 1e-12);
            let d_s = dot(qr.data(), kr.data());
            assert!((d_s - base_dot).abs() < 1e-10, "shift {s}: {d_s} vs {base_dot}");
        }
    }

    #[test]
    fn rope_errors() {
        assert!(matches!(RopeParams::new(10_000.0, 3), Err(Error::Config(_))));
        let x = HeadTensor::<f64>::zeros(2, 1, 4);
        let p = RopeParams::new(10_000.0, 4).unwrap();
        assert!(matches!(rope_apply(&x, &[0], &p), Err(Error::Shape(_))));
    }

    #[test]
    fn rope_unapply_inverts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_heads(&mut rng, 4, 2, 8);
        let p = RopeParams::new(DEFAULT_THETA_BASE, 8).unwrap();
        let pos = [0, 3, 100, 4096];
        let back = rope_unapply(&rope_apply(&x, &pos, &p).unwrap(), &pos, &p).unwrap();
        assert!(back.max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn qk_norm_hand_values() {
        let x = HeadTensor::new(vec![3.0f64, 4.0], 1, 1, 2).unwrap();
        let y = qk_norm(&x, &[1.0, 1.0], 1e-12).unwrap();
        assert!((y.data()[0] - 0.848528).abs() < 1e-6);
        assert!((y.data()[1] - 1.131371).abs() < 1e-6);

        let z = HeadTensor::<f32>::zeros(2, 2, 4);
        let y = qk_norm(&z, &[3.0; 4], DEFAULT_QK_EPS).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn qk_norm_scale_invariance_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // entries in [-10, 10] keep eps far below mean(x²)
        let x: HeadTensor<f32> = HeadTensor::new(random_heads(&mut rng, 5, 3, 8).data().iter().map(|v| (v * 10.0) as f32).collect(), 5, 3, 8).unwrap();
        let gamma: Vec<f32> = (0..8).map(|i| 0.5 + i as f32 * 0.1).collect();
        let base = qk_norm(&x, &gamma, DEFAULT_QK_EPS).unwrap();
        for c in [0.5f32, 2.0, 10.0] {
            let scaled = HeadTensor::new(x.data().iter().map(|v| v * c).collect(), 5, 3, 8).unwrap();
            let y = qk_norm(&scaled, &gamma, DEFAULT_QK_EPS).unwrap();
            assert!(y.max_abs_diff(&base) < 1e-6, "c={c}");
        }
    }

    #[test]
    fn qk_norm_rejects_empty_heads() {
        let x = HeadTensor::<f64>::zeros(1, 1, 0);
        assert!(matches!(qk_norm(&x, &[], 1e-6), Err(Error::Shape(_))));
    }

    /// Naive O(N²) double loop in f64.
    fn naive_attention(q: &HeadTensor<f64>, k: &HeadTensor<f64>, v: &HeadTensor<f64>) -> HeadTensor<f64> {
        let (n, h, d) = q.shape();
        let group = h / k.n_heads();
        let mut out = HeadTensor::zeros(n, h, d);
        for t in 0..n {
            for hh in 0..h {
                let kvh = hh / group;
                let s: Vec<f64> = (0..=t).map(|j| dot(q.head(t, hh), k.head(j, kvh)) / (d as f64).sqrt()).collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|x| (x - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..d {
                    out.head_mut(t, hh)[c] = (0..=t).map(|j| e[j] / z * v.head(j, kvh)[c]).sum();
                }
            }
        }
        out
    }

    #[test]
    fn softmax_single_token_and_symmetric_pair() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = random_heads(&mut rng, 1, 2, 4);
        let k = random_heads(&mut rng, 1, 1, 4);
        let v = random_heads(&mut rng, 1, 1, 4);
        let o = softmax_causal_attention(&q, &k, &v, 1).unwrap();
        assert_eq!(o.head(0, 0), v.head(0, 0));
        assert_eq!(o.head(0, 1), v.head(0, 0));

        // identical keys give equal scores
        let q = HeadTensor::new(vec![0.3f64, -0.2, 0.7, 0.1], 2, 1, 2).unwrap();
        let k = HeadTensor::new(vec![1.0, 2.0, 1.0, 2.0], 2, 1, 2).unwrap();
        let v = HeadTensor::new(vec![1.0, 3.0, 5.0, -1.0], 2, 1, 2).unwrap();
        let o = softmax_causal_attention(&q, &k, &v, 1).unwrap();
        assert!((o.head(1, 0)[0] - 3.0).abs() < 1e-15);
        assert!((o.head(1, 0)[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_matches_double_loop_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = random_heads(&mut rng, 16, 4, 8);
        let k = random_heads(&mut rng, 16, 2, 8);
        let v = random_heads(&mut rng, 16, 2, 8);
        let oracle = naive_attention(&q, &k, &v);
        let o32 = softmax_causal_attention(&q.cast::<f32>(), &k.cast(), &v.cast(), 2).unwrap();
        assert!(o32.cast::<f64>().max_abs_diff(&oracle) < 1e-6);
    }

    #[test]
    fn softmax_rejects_bad_grouping() {
        let q = HeadTensor::<f64>::zeros(2, 3, 4);
        let k = HeadTensor::<f64>::zeros(2, 2, 4);
        assert!(matches!(softmax_causal_attention(&q, &k, &k, 2), Err(Error::Config(_))));
    }

    #[test]
    fn softmax_rows_are_convex_combinations() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let q = random_heads(&mut rng, 20, 2, 4);
        let k = random_heads(&mut rng, 20, 1, 4);
        let v = random_heads(&mut rng, 20, 1, 4);
        let o = softmax_causal_attention(&q, &k, &v, 1).unwrap();
        for t in 0..20 {
            for c in 0..4 {
                let lo = (0..=t).map(|j| v.head(j, 0)[c]).fold(f64::INFINITY, f64::min);
                let hi = (0..=t).map(|j| v.head(j, 0)[c]).fold(f64::NEG_INFINITY, f64::max);
                for h in 0..2 {
                    let x = o.head(t, h)[c];
                    assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn gate_limits_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Matrix::new(3, 4, (0..12).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let a = Matrix::new(3, 2, (0..6).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap();
        let zero = GateParams { weight: Matrix::zeros(4, 2) };
        let y = output_gate(&x, &a, &zero).unwrap();
        for (o, i) in y.data().iter().zip(a.data()) {
            assert_eq!(*o, 0.5 * i);
        }

        let ones = Matrix::new(1, 1, vec![1.0f32]).unwrap();
        let big = GateParams { weight: Matrix::new(1, 1, vec![30.0f32]).unwrap() };
        let small = GateParams { weight: Matrix::new(1, 1, vec![-30.0f32]).unwrap() };
        let att = Matrix::new(1, 1, vec![2.5f32]).unwrap();
        assert!((output_gate(&ones, &att, &big).unwrap().data()[0] - 2.5).abs() < 1e-6);
        assert!(output_gate(&ones, &att, &small).unwrap().data()[0].abs() < 1e-6);

        let w = GateParams { weight: Matrix::new(4, 2, (0..8).map(|_| rng.gen_range(-1.0f32..1.0)).collect()).unwrap() };
        let y = output_gate(&x, &a, &w).unwrap();
        for r in 0..3 {
            for c in 0..2 {
                let mut pre = 0.0f32;
                for i in 0..4 {
                    pre += x.get(r, i) * w.weight.get(i, c);
                }
                let want = a.get(r, c) / (1.0 + (-pre).exp());
                assert!((y.get(r, c) - want).abs() < 1e-7);
            }
        }
        assert!(matches!(output_gate(&a, &x, &w), Err(Error::Shape(_))));
    }

    proptest! {
        #[test]
        fn rope_preserves_pair_norms(vals in proptest::collection::vec(-100.0f64..100.0, 8), pos in 0usize..100_000) {
            let x = HeadTensor::new(vals, 1, 1, 8).unwrap();
            let p = RopeParams::new(DEFAULT_THETA_BASE, 8).unwrap();
            let y = rope_apply(&x, &[pos], &p).unwrap();
            for i in 0..4 {
                let a = x.data()[2 * i].hypot(x.data()[2 * i + 1]);
                let b = y.data()[2 * i].hypot(y.data()[2 * i + 1]);
                prop_assert!((a - b).abs() <= 4.0 * f64::EPSILON * a.max(1e-300));
            }
        }

        #[test]
        fn qk_norm_positive_scale_invariant(vals in proptest::collection::vec(0.1f64..10.0, 6), c in 0.01f64..100.0) {
            let x = HeadTensor::new(vals.clone(), 1, 1, 6).unwrap();
            let xs = HeadTensor::new(vals.iter().map(|v| v * c).collect(), 1, 1, 6).unwrap();
            let g = [1.0; 6];
            let a = qk_norm(&x, &g, 1e-12).unwrap();
            let b = qk_norm(&xs, &g, 1e-12).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-9);
        }
    }
}
