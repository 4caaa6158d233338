//! Converting an all-softmax stack into a hybrid one: probe which layers
//! matter, keep those sparse, and distill the rest into linear attention
//! layer by layer with the teacher's activations as inputs.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::kernels::{check_gqa, qk_norm, rms_norm, rope_apply, rope_unapply, sigmoid};
use crate::linattn::{linear_attn_recurrent, DecaySchedule, LinearState};
use crate::real::Real;
use crate::sparseattn::AttnMode;
use crate::stack::{attention_residual, hidden_states, layer_forward, select_layers, HybridCache, LayerKind, Layout, ModelConfig, ModelWeights, Phase};
use crate::tensor::{HeadTensor, Matrix};

/// Longest calibration sequence accepted.
pub const MAX_CALIB_LEN: usize = 512;
pub const FD_EPS: f64 = 1e-5;

/// `|a - n| / max(|a|, |n|, 1e-3)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads<T> {
    pub dq: HeadTensor<T>,
    pub dk: HeadTensor<T>,
    pub dv: HeadTensor<T>,
    /// One entry per query head.
    pub dlambda: Vec<f64>,
}

/// Reverse-mode gradients of [`linear_attn_recurrent`] started from a zero
/// state. With `G_t = ∂L/∂S_t`:
///
/// ```text
/// G_t  = q_tᵀ dO_t + λ G_{t+1}
/// dq_t = dO_t S_tᵀ      dk_t = G_t v_t      dv_t = k_t G_t
/// dλ   = Σ_t <G_t, S_{t-1}>
/// ```
///
/// Key and value gradients of a shared KV head sum over its query heads.
pub fn grad_linear_attn<T: Real>(
    q: &HeadTensor<T>,
    k: &HeadTensor<T>,
    v: &HeadTensor<T>,
    decay: &DecaySchedule,
    d_out: &HeadTensor<T>,
) -> Result<LinearGrads<T>> {
    let (n, h, dk) = q.shape();
    let dv = v.head_dim();
    if k.n_tokens() != n || v.n_tokens() != n || k.n_heads() != v.n_heads() || k.head_dim() != dk {
        return Err(shape_err("grad_linear_attn: Q, K and V shapes do not agree"));
    }
    if d_out.shape() != (n, h, dv) {
        return Err(shape_err(format!("upstream gradient {:?} for output {:?}", d_out.shape(), (n, h, dv))));
    }
    if decay.n_heads() != h {
        return Err(shape_err(format!("decay schedule has {} heads, queries have {h}", decay.n_heads())));
    }
    let group = check_gqa(h, k.n_heads())?;
    let mut dq = HeadTensor::zeros(n, h, dk);
    let mut dkt = HeadTensor::zeros(n, k.n_heads(), dk);
    let mut dvt = HeadTensor::zeros(n, k.n_heads(), dv);
    let mut dlambda = vec![0.0; h];
    let m = dk * dv;
    let mut states = vec![T::zero(); (n + 1) * m];
    let mut g = vec![T::zero(); m];
    for head in 0..h {
        let kv = head / group;
        let lambda = T::of(decay.lambdas()[head]);
        for t in 0..n {
            let (prev, cur) = states.split_at_mut((t + 1) * m);
            let prev = &prev[t * m..];
            let cur = &mut cur[..m];
            let (kt, vt) = (k.head(t, kv), v.head(t, kv));
            for i in 0..dk {
                for j in 0..dv {
                    cur[i * dv + j] = lambda * prev[i * dv + j] + kt[i] * vt[j];
                }
            }
        }
        g.iter_mut().for_each(|x| *x = T::zero());
        let mut dl = T::zero();
        for t in (0..n).rev() {
            let (qt, kt, vt, dot) = (q.head(t, head), k.head(t, kv), v.head(t, kv), d_out.head(t, head));
            for i in 0..dk {
                for j in 0..dv {
                    g[i * dv + j] = lambda * g[i * dv + j] + qt[i] * dot[j];
                }
            }
            let s_t = &states[(t + 1) * m..(t + 2) * m];
            let s_prev = &states[t * m..(t + 1) * m];
            let dq_t = dq.head_mut(t, head);
            for i in 0..dk {
                dq_t[i] = crate::real::dot(&s_t[i * dv..(i + 1) * dv], dot);
            }
            let dk_t = dkt.head_mut(t, kv);
            for i in 0..dk {
                dk_t[i] += crate::real::dot(&g[i * dv..(i + 1) * dv], vt);
            }
            let dv_t = dvt.head_mut(t, kv);
            for i in 0..dk {
                for j in 0..dv {
                    dv_t[j] += kt[i] * g[i * dv + j];
                }
            }
            dl += crate::real::dot(&g, s_prev);
        }
        dlambda[head] = dl.as_f64();
    }
    Ok(LinearGrads { dq, dk: dkt, dv: dvt, dlambda })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConversionPlan {
    pub teacher_kinds: Vec<LayerKind>,
    pub target_kinds: Vec<LayerKind>,
    pub calib_sequences: Vec<Vec<u32>>,
    /// Sequences never trained on; losses on them are reported separately.
    #[serde(default)]
    pub held_out: Vec<Vec<u32>>,
    pub steps: usize,
    pub lr: f64,
}

impl ConversionPlan {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.teacher_kinds.len() != cfg.n_layers || self.target_kinds.len() != cfg.n_layers {
            return Err(config_err("plan layer kinds do not match n_layers"));
        }
        for (l, (t, s)) in self.teacher_kinds.iter().zip(&self.target_kinds).enumerate() {
            if t != s && *s != LayerKind::Linear {
                return Err(config_err(format!("plan changes layer {l} to {s:?}; only conversions to linear are allowed")));
            }
        }
        if self.calib_sequences.is_empty() {
            return Err(Error::Input("empty calibration set".into()));
        }
        for s in self.calib_sequences.iter().chain(&self.held_out) {
            if s.is_empty() || s.len() > MAX_CALIB_LEN {
                return Err(Error::Input(format!(
                    "calibration sequence length {} outside 1..={MAX_CALIB_LEN}",
                    s.len()
                )));
            }
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config_err(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    pub layer: usize,
    pub steps: usize,
    pub lr: f64,
    /// Calibration MSE before each update.
    pub loss_curve: Vec<f64>,
    pub initial_mse: f64,
    /// Calibration MSE after the last update.
    pub final_mse: f64,
    pub held_out_initial_mse: Option<f64>,
    pub held_out_final_mse: Option<f64>,
    /// Worst relative error of sampled loss gradients against central
    /// differences, at the initial parameters.
    pub grad_check_max_rel_err: f64,
}

/// Config the teacher runs under: every sparse layer computes exact softmax.
fn teacher_config(cfg: &ModelConfig, kinds: &[LayerKind]) -> ModelConfig {
    let mut t = cfg.clone();
    t.layer_kinds = kinds.to_vec();
    t.layout = Layout::Uniform;
    t.sparse.mode = AttnMode::Dense;
    t
}

/// Layers `from..` of `cfg` applied to `x`.
fn run_from(x: &Matrix<f64>, from: usize, cfg: &ModelConfig, w: &ModelWeights<f64>) -> Result<Matrix<f64>> {
    let mut cache = HybridCache::new(cfg)?;
    let mut h = x.clone();
    for l in from..cfg.n_layers {
        h = layer_forward(&h, l, cfg, w, &mut cache, Phase::Prefill)?;
    }
    Ok(h)
}

fn mse(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    let n = a.data().len().max(1) as f64;
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Damage done by removing each layer's attention: the mean squared change
/// of the final hidden state when layer `l`'s attention is replaced by a
/// zero-initialized linear layer (whose output is exactly zero). Sparse
/// layers are evaluated in dense mode.
pub fn probe_importance<T: Real>(cfg: &ModelConfig, weights: &ModelWeights<T>, calib: &[Vec<u32>]) -> Result<Vec<f64>> {
    if calib.is_empty() {
        return Err(Error::Input("empty calibration set".into()));
    }
    let tcfg = teacher_config(cfg, &cfg.layer_kinds);
    let mut w = weights.cast::<f64>();
    let mut importance = vec![0.0; cfg.n_layers];
    for seq in calib {
        let hs = hidden_states(seq, &tcfg, &w)?;
        let reference = &hs[cfg.n_layers];
        for (l, imp) in importance.iter_mut().enumerate() {
            let saved = std::mem::replace(&mut w.layers[l].wo, Matrix::zeros(cfg.attn_width(), cfg.d_model));
            let ablated = run_from(&hs[l], l, &tcfg, &w);
            w.layers[l].wo = saved;
            *imp += mse(&ablated?, reference) / calib.len() as f64;
        }
    }
    Ok(importance)
}

/// Trainable projections of one layer.
#[derive(Debug, Clone)]
struct Proj {
    wq: Matrix<f64>,
    wk: Matrix<f64>,
    wv: Matrix<f64>,
    wo: Matrix<f64>,
}

impl Proj {
    fn mats_mut(&mut self) -> [&mut Matrix<f64>; 4] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }

    fn mats(&self) -> [&Matrix<f64>; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }
}

/// Frozen per-sequence inputs and the teacher's block output.
struct Sample {
    x: Matrix<f64>,
    xn: Matrix<f64>,
    gate: Matrix<f64>,
    target: Matrix<f64>,
    positions: Vec<usize>,
}

/// Frozen parts of the student layer.
struct Student<'a> {
    cfg: &'a ModelConfig,
    q_gamma: &'a [f64],
    k_gamma: &'a [f64],
}

struct Tape {
    q_raw: HeadTensor<f64>,
    k_raw: HeadTensor<f64>,
    qr: HeadTensor<f64>,
    kr: HeadTensor<f64>,
    v: HeadTensor<f64>,
    z: Matrix<f64>,
    h: Matrix<f64>,
}

impl Student<'_> {
    fn forward(&self, s: &Sample, p: &Proj) -> Result<Tape> {
        let c = self.cfg;
        let q_raw = HeadTensor::from_matrix(s.xn.matmul(&p.wq)?, c.n_heads, c.head_dim)?;
        let k_raw = HeadTensor::from_matrix(s.xn.matmul(&p.wk)?, c.n_kv_heads, c.head_dim)?;
        let v = HeadTensor::from_matrix(s.xn.matmul(&p.wv)?, c.n_kv_heads, c.head_dim)?;
        let qr = rope_apply(&qk_norm(&q_raw, self.q_gamma, c.norm_eps)?, &s.positions, &c.rope)?;
        let kr = rope_apply(&qk_norm(&k_raw, self.k_gamma, c.norm_eps)?, &s.positions, &c.rope)?;
        let s0 = LinearState::zeros(c.n_heads, c.head_dim, c.head_dim);
        let (o, _) = linear_attn_recurrent(&qr, &kr, &v, &c.decay, &s0)?;
        let mut z = o.into_matrix();
        for (zi, &g) in z.data_mut().iter_mut().zip(s.gate.data()) {
            *zi *= g;
        }
        let mut h = z.matmul(&p.wo)?;
        h.add_assign(&s.x)?;
        Ok(Tape { q_raw, k_raw, qr, kr, v, z, h })
    }

    fn loss(&self, samples: &[Sample], p: &Proj) -> Result<f64> {
        let mut total = 0.0;
        for s in samples {
            total += mse(&self.forward(s, p)?.h, &s.target);
        }
        Ok(total / samples.len() as f64)
    }

    /// Mean loss over `samples` and its gradient for each projection.
    fn loss_and_grad(&self, samples: &[Sample], p: &Proj) -> Result<(f64, [Matrix<f64>; 4])> {
        let c = self.cfg;
        let mut grads = p.mats().map(|m| Matrix::zeros(m.rows(), m.cols()));
        let mut total = 0.0;
        for s in samples {
            let tape = self.forward(s, p)?;
            total += mse(&tape.h, &s.target);
            let scale = 2.0 / (tape.h.data().len() as f64 * samples.len() as f64);
            let mut dh = tape.h.clone();
            for (d, &t) in dh.data_mut().iter_mut().zip(s.target.data()) {
                *d = (*d - t) * scale;
            }
            grads[3].add_assign(&tape.z.t_matmul(&dh)?)?;
            let mut dz = dh.matmul_t(&p.wo)?;
            for (d, &g) in dz.data_mut().iter_mut().zip(s.gate.data()) {
                *d *= g;
            }
            let d_out = HeadTensor::from_matrix(dz, c.n_heads, c.head_dim)?;
            let lg = grad_linear_attn(&tape.qr, &tape.kr, &tape.v, &c.decay, &d_out)?;
            let dq = qk_norm_backward(&tape.q_raw, self.q_gamma, c.norm_eps, &rope_unapply(&lg.dq, &s.positions, &c.rope)?);
            let dk = qk_norm_backward(&tape.k_raw, self.k_gamma, c.norm_eps, &rope_unapply(&lg.dk, &s.positions, &c.rope)?);
            grads[0].add_assign(&s.xn.t_matmul(&dq.into_matrix())?)?;
            grads[1].add_assign(&s.xn.t_matmul(&dk.into_matrix())?)?;
            grads[2].add_assign(&s.xn.t_matmul(&lg.dv.into_matrix())?)?;
        }
        Ok((total / samples.len() as f64, grads))
    }
}

/// Backward of `y = gamma ⊙ x / r`, `r = sqrt(mean(x²) + eps)`, per head.
fn qk_norm_backward(x: &HeadTensor<f64>, gamma: &[f64], eps: f64, dy: &HeadTensor<f64>) -> HeadTensor<f64> {
    let (n, h, d) = x.shape();
    let mut dx = HeadTensor::zeros(n, h, d);
    for t in 0..n {
        for hh in 0..h {
            let xs = x.head(t, hh);
            let r = (xs.iter().map(|v| v * v).sum::<f64>() / d as f64 + eps).sqrt();
            let gdy: Vec<f64> = dy.head(t, hh).iter().zip(gamma).map(|(a, b)| a * b).collect();
            let proj: f64 = gdy.iter().zip(xs).map(|(a, b)| a * b).sum();
            for ((o, &g), &xi) in dx.head_mut(t, hh).iter_mut().zip(&gdy).zip(xs) {
                *o = g / r - xi * proj / (d as f64 * r * r * r);
            }
        }
    }
    dx
}

/// Worst relative error of sampled gradient entries (a few per matrix)
/// against central differences of the loss.
fn grad_check(student: &Student<'_>, samples: &[Sample], p: &Proj) -> Result<f64> {
    let (_, grads) = student.loss_and_grad(samples, p)?;
    let mut worst: f64 = 0.0;
    for (m, g) in grads.iter().enumerate() {
        let len = g.data().len();
        for idx in [0, len / 3, (2 * len) / 3, len - 1] {
            let mut plus = p.clone();
            plus.mats_mut()[m].data_mut()[idx] += FD_EPS;
            let mut minus = p.clone();
            minus.mats_mut()[m].data_mut()[idx] -= FD_EPS;
            let numeric = (student.loss(samples, &plus)? - student.loss(samples, &minus)?) / (2.0 * FD_EPS);
            worst = worst.max(relative_error(g.data()[idx], numeric));
        }
    }
    Ok(worst)
}

/// Teacher activations for one layer: inputs (teacher-forced) and block
/// outputs `x + attn(norm(x))`.
fn teacher_samples(l: usize, tcfg: &ModelConfig, teacher: &ModelWeights<f64>, seqs: &[Vec<u32>]) -> Result<Vec<Sample>> {
    let lw = &teacher.layers[l];
    seqs.iter()
        .map(|seq| {
            let x = hidden_states(seq, tcfg, teacher)?.swap_remove(l);
            let mut cache = HybridCache::new(tcfg)?;
            let target = attention_residual(&x, l, tcfg, teacher, &mut cache, Phase::Prefill)?;
            let xn = rms_norm(&x, &lw.attn_norm, tcfg.norm_eps)?;
            let mut gate = xn.matmul(&lw.gate.weight)?;
            gate.data_mut().iter_mut().for_each(|g| *g = sigmoid(*g));
            Ok(Sample { positions: (0..x.rows()).collect(), x, xn, gate, target })
        })
        .collect()
}

/// Distills layer `l` of `student` into a linear-attention layer matching the
/// teacher's block output. Only that layer's Wq, Wk, Wv and Wo change.
pub fn distill_layer<T: Real>(
    l: usize,
    plan: &ConversionPlan,
    cfg: &ModelConfig,
    teacher: &ModelWeights<T>,
    student: &ModelWeights<T>,
) -> Result<(ModelWeights<T>, DistillReport)> {
    plan.validate(cfg)?;
    if plan.target_kinds.get(l) != Some(&LayerKind::Linear) {
        return Err(config_err(format!("layer {l} is not linear in the target plan")));
    }
    let tcfg = teacher_config(cfg, &plan.teacher_kinds);
    let teacher64 = teacher.cast::<f64>();
    let calib = teacher_samples(l, &tcfg, &teacher64, &plan.calib_sequences)?;
    let held = teacher_samples(l, &tcfg, &teacher64, &plan.held_out)?;
    distill_with(l, plan, cfg, &calib, &held, student)
}

fn distill_with<T: Real>(
    l: usize,
    plan: &ConversionPlan,
    cfg: &ModelConfig,
    calib: &[Sample],
    held: &[Sample],
    student: &ModelWeights<T>,
) -> Result<(ModelWeights<T>, DistillReport)> {
    let sw = &student.layers[l];
    let to64 = |m: &Matrix<T>| Matrix::from_parts(m.rows(), m.cols(), m.data().iter().map(|v| v.as_f64()).collect());
    let q_gamma: Vec<f64> = sw.q_gamma.iter().map(|v| v.as_f64()).collect();
    let k_gamma: Vec<f64> = sw.k_gamma.iter().map(|v| v.as_f64()).collect();
    let st = Student { cfg, q_gamma: &q_gamma, k_gamma: &k_gamma };
    let mut p = Proj { wq: to64(&sw.wq), wk: to64(&sw.wk), wv: to64(&sw.wv), wo: to64(&sw.wo) };

    let grad_err = grad_check(&st, &calib[..1], &p)?;
    let held_initial = if held.is_empty() { None } else { Some(st.loss(held, &p)?) };
    let mut curve = Vec::with_capacity(plan.steps);
    for step in 0..plan.steps {
        let (loss, grads) = st.loss_and_grad(calib, &p).map_err(|e| match e {
            Error::Numeric(message) => Error::Training { step, message },
            e => e,
        })?;
        if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training { step, message: format!("loss became {loss}") });
        }
        curve.push(loss);
        if plan.lr == 0.0 {
            continue;
        }
        for (m, g) in p.mats_mut().into_iter().zip(&grads) {
            for (w, &d) in m.data_mut().iter_mut().zip(g.data()) {
                *w -= plan.lr * d;
            }
        }
    }
    let final_mse = st.loss(calib, &p).map_err(|e| match e {
        Error::Numeric(message) => Error::Training { step: plan.steps, message },
        e => e,
    })?;
    if !final_mse.is_finite() {
        return Err(Error::Training { step: plan.steps, message: format!("loss became {final_mse}") });
    }
    let initial_mse = curve.first().copied().unwrap_or(final_mse);
    let held_final = if held.is_empty() { None } else { Some(st.loss(held, &p)?) };

    let mut out = student.clone();
    let back = |m: &Matrix<f64>| Matrix::from_parts(m.rows(), m.cols(), m.data().iter().map(|&v| T::of(v)).collect());
    if plan.lr != 0.0 && plan.steps > 0 {
        let ow = &mut out.layers[l];
        ow.wq = back(&p.wq);
        ow.wk = back(&p.wk);
        ow.wv = back(&p.wv);
        ow.wo = back(&p.wo);
    }
    let report = DistillReport {
        layer: l,
        steps: plan.steps,
        lr: plan.lr,
        loss_curve: curve,
        initial_mse,
        final_mse,
        held_out_initial_mse: held_initial,
        held_out_final_mse: held_final,
        grad_check_max_rel_err: grad_err,
    };
    Ok((out, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvertOptions {
    pub sparse_ratio: f64,
    pub steps: usize,
    pub lr: f64,
    #[serde(default)]
    pub held_out: Vec<Vec<u32>>,
}

impl Default for ConvertOptions {
    fn default() -> Self {
        Self { sparse_ratio: crate::stack::DEFAULT_SPARSE_RATIO, steps: 200, lr: 1e-2, held_out: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConversionReport {
    pub importance: Vec<f64>,
    pub layer_kinds: Vec<LayerKind>,
    pub converted_layers: Vec<usize>,
    pub layers: Vec<DistillReport>,
}

#[derive(Debug, Clone)]
pub struct Conversion<T> {
    pub config: ModelConfig,
    pub weights: ModelWeights<T>,
    pub report: ConversionReport,
}

/// Probe, select, then distill each converted layer in order. `cfg` must
/// describe an all-sparse teacher; the result uses `cfg`'s sparse settings.
pub fn convert_model<T: Real>(cfg: &ModelConfig, weights: &ModelWeights<T>, calib: &[Vec<u32>], opts: &ConvertOptions) -> Result<Conversion<T>> {
    cfg.validate()?;
    if cfg.layer_kinds.iter().any(|k| *k != LayerKind::Sparse) {
        return Err(config_err("conversion needs an all-softmax teacher (every layer sparse)"));
    }
    let importance = probe_importance(cfg, weights, calib)?;
    let kinds = select_layers(&importance, opts.sparse_ratio)?;
    let plan = ConversionPlan {
        teacher_kinds: cfg.layer_kinds.clone(),
        target_kinds: kinds.clone(),
        calib_sequences: calib.to_vec(),
        held_out: opts.held_out.clone(),
        steps: opts.steps,
        lr: opts.lr,
    };
    plan.validate(cfg)?;
    let mut out_cfg = cfg.clone();
    out_cfg.layer_kinds = kinds.clone();
    out_cfg.sparse_ratio = opts.sparse_ratio;
    out_cfg.layout = Layout::Hybrid;
    out_cfg.validate()?;

    let tcfg = teacher_config(cfg, &plan.teacher_kinds);
    let teacher64 = weights.cast::<f64>();
    let converted: Vec<usize> = (0..cfg.n_layers).filter(|&l| kinds[l] == LayerKind::Linear).collect();
    let mut student = weights.clone();
    let mut reports = Vec::new();
    for &l in &converted {
        let calib_s = teacher_samples(l, &tcfg, &teacher64, &plan.calib_sequences)?;
        let held_s = teacher_samples(l, &tcfg, &teacher64, &plan.held_out)?;
        let (next, report) = distill_with(l, &plan, &out_cfg, &calib_s, &held_s, &student)?;
        student = next;
        reports.push(report);
    }
    Ok(Conversion {
        config: out_cfg,
        weights: student,
        report: ConversionReport { importance, layer_kinds: kinds, converted_layers: converted, layers: reports },
    })
}
