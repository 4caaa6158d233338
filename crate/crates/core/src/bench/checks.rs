use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{oracles, Outcome, SuiteOptions};
use crate::convert::{convert_model, distill_layer, grad_linear_attn, relative_error, ConversionPlan, ConvertOptions, FD_EPS};
use crate::error::Result;
use crate::kernels::{rope_apply, RopeParams};
use crate::linattn::{
    decay_rates, linear_attn_chunked_tampered, linear_attn_decode_step, linear_attn_recurrent, DecaySchedule, LinearState,
};
use crate::memlat::{decode_step_times, kv_cache_bytes, median, run_latency_sweep, SweepOptions, SweepPhase};
use crate::real::{Dtype, Real};
use crate::sparseattn::{sparse_attention_prefill, AttnMode, SparseParams};
use crate::stack::{
    generate, manifest, model_forward, model_forward_traced, select_layers, HybridCache, LayerKind, ModelConfig, ModelWeights,
};
use crate::tensor::{max_abs_diff, HeadTensor};

fn heads<T: Real>(rng: &mut ChaCha8Rng, n: usize, h: usize, d: usize) -> HeadTensor<T> {
    HeadTensor::new((0..n * h * d).map(|_| T::of(rng.gen_range(-1.0..1.0))).collect(), n, h, d).expect("finite")
}

fn tokens(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

pub(super) fn chunked_equiv(_: &ModelConfig, opts: &SuiteOptions) -> Result<Outcome> {
    let (h, hkv, d) = (4, 2, 16);
    let decay = decay_rates(h)?;
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(seed));
        for n in [63, 256, 257] {
            let (q, k, v) = (heads::<f64>(&mut rng, n, h, d), heads(&mut rng, n, hkv, d), heads(&mut rng, n, hkv, d));
            let s0 = LinearState::from_parts((0..h * d * d).map(|_| rng.gen_range(-1.0..1.0)).collect(), h, d, d, 0)?;
            let (reference, s_ref) = linear_attn_recurrent(&q, &k, &v, &decay, &s0)?;
            for chunk in [1, 16, 64] {
                let (o, s) = linear_attn_chunked_tampered(&q, &k, &v, &decay, chunk, &s0, opts.faults.chunked_mask)?;
                worst = worst.max(o.max_abs_diff(&reference)).max(max_abs_diff(s.data(), s_ref.data()));
            }
        }
    }
    Ok(Outcome::new(worst, "max |chunked - recurrent| over outputs and final states; N in {63,256,257}, chunk in {1,16,64}, 10 seeds"))
}

pub(super) fn streaming_equiv(_: &ModelConfig, opts: &SuiteOptions) -> Result<Outcome> {
    let (n, h, hkv, d) = (128, 4, 2, 16);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (q, k, v) = (heads::<f64>(&mut rng, n, h, d), heads(&mut rng, n, hkv, d), heads(&mut rng, n, hkv, d));
    let decay = decay_rates(h)?;
    let zero = LinearState::zeros(h, d, d);
    let (batch, _) = linear_attn_recurrent(&q, &k, &v, &decay, &zero)?;
    let mut state = zero;
    let mut worst: f64 = 0.0;
    for t in 0..n {
        let o = linear_attn_decode_step(q.token(t), k.token(t), v.token(t), &decay, &mut state)?;
        worst = worst.max(max_abs_diff(&o, batch.token(t)));
    }
    Ok(Outcome::new(worst, "max |decode loop - batch recurrent|, N=128, f64"))
}

pub(super) fn sparse_dense_equiv(_: &ModelConfig, opts: &SuiteOptions) -> Result<Outcome> {
    let (h, hkv, d) = (4, 2, 16);
    let dense = SparseParams { mode: AttnMode::Dense, ..SparseParams::default() };
    let covering = SparseParams { block_size: 16, top_k: 16, n_init_blocks: 1, local_window: 16, ..SparseParams::default() };
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(100 + seed));
        for n in [1, 37, 128, 256] {
            let (q, k, v) = (heads::<f32>(&mut rng, n, h, d), heads(&mut rng, n, hkv, d), heads(&mut rng, n, hkv, d));
            let oracle = oracles::causal_softmax(&q, &k, &v);
            for p in [&dense, &covering] {
                debug_assert!(p.covers(n));
                let o = sparse_attention_prefill(&q, &k, &v, p)?;
                worst = worst.max(max_abs_diff(o.cast::<f64>().data(), oracle.data()));
            }
        }
    }
    Ok(Outcome::new(worst, "f32 sparse prefill (dense mode and covering budget) vs f64 softmax oracle, N<=256, 10 seeds"))
}

pub(super) fn sparse_oracle(_: &ModelConfig, opts: &SuiteOptions) -> Result<Outcome> {
    let (n, h, hkv, d) = (64, 4, 2, 16);
    let p = SparseParams { block_size: 8, top_k: 2, n_init_blocks: 1, local_window: 16, ..SparseParams::default() };
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(200 + seed));
        let (q, k, v) = (heads::<f32>(&mut rng, n, h, d), heads(&mut rng, n, hkv, d), heads(&mut rng, n, hkv, d));
        let o = sparse_attention_prefill(&q, &k, &v, &p)?;
        let oracle = oracles::sparse_prefill(&q, &k, &v, &p);
        worst = worst.max(max_abs_diff(o.cast::<f64>().data(), oracle.data()));
    }
    Ok(Outcome::new(worst, format!("N=64, B=8, top_k=2, window 16 (covering: {}), 10 seeds", p.covers(n))))
}

pub(super) fn rope_relative(_: &ModelConfig, opts: &SuiteOptions) -> Result<Outcome> {
    let d = 32;
    let p = RopeParams::new(10_000.0, d)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let q = heads::<f64>(&mut rng, 1, 1, d);
    let k = heads::<f64>(&mut rng, 1, 1, d);
    let at = |x: &HeadTensor<f64>, m: usize| rope_apply(x, &[m], &p);
    let mut worst: f64 = 0.0;
    for (m, n) in [(0, 0), (3, 1), (7, 20), (40, 5), (100, 99)] {
        let base = crate::real::dot(at(&q, m)?.data(), at(&k, n)?.data());
        for s in 0..=32 {
            let shifted = crate::real::dot(at(&q, m + s)?.data(), at(&k, n + s)?.data());
            worst = worst.max((shifted - base).abs());
        }
    }
    let identity = at(&q, 0)? == q && at(&k, 0)? == k;
    let measured = if identity { worst } else { f64::INFINITY };
    Ok(Outcome::new(measured, format!("max shift error over shifts 0..32; position-0 identity exact: {identity}")))
}

pub(super) fn hype_policy(cfg: &ModelConfig, opts: &SuiteOptions) -> Result<Outcome> {
    let mut variants = vec![cfg.clone(), cfg.clone().uniform(LayerKind::Linear)];
    if let Ok(kinds) = select_layers(&(0..cfg.n_layers).map(|l| ((l * 7) % 5) as f64).collect::<Vec<_>>(), cfg.sparse_ratio) {
        let mut c = cfg.clone();
        c.layer_kinds = kinds;
        variants.push(c);
    }
    let (mut agree, mut total) = (0usize, 0usize);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    for c in &variants {
        let w = ModelWeights::<f32>::random(c, opts.seed)?;
        let want: Vec<bool> = c.layer_kinds.iter().map(|k| *k == LayerKind::Linear).collect();
        let mut cache = HybridCache::new(c)?;
        let prompt = tokens(&mut rng, 16, c.vocab_size);
        let mut traces = vec![model_forward_traced(&prompt, c, &w, &mut cache)?.1];
        for _ in 0..2 {
            traces.push(model_forward_traced(&tokens(&mut rng, 1, c.vocab_size), c, &w, &mut cache)?.1);
        }
        for t in traces {
            total += want.len();
            agree += t.rope_applied.iter().zip(&want).filter(|(a, b)| a == b).count();
        }
    }
    Ok(Outcome::new(agree as f64 / total as f64, format!("{agree}/{total} layer records match (kind == linear)")))
}

pub(super) fn layer_census(cfg: &ModelConfig, _: &SuiteOptions) -> Result<Outcome> {
    let mut violations = 0;
    let n = cfg.n_layers;
    let quota = (cfg.sparse_ratio * n as f64).round() as usize;
    violations += usize::from(cfg.n_sparse() != quota);
    violations += usize::from(cfg.layer_kinds[0] != LayerKind::Sparse);
    violations += usize::from(cfg.layer_kinds[n - 1] != LayerKind::Sparse);
    for layers in 8..=40 {
        let importance: Vec<f64> = (0..layers).map(|l| ((l * 13 + 5) % 11) as f64).collect();
        let kinds = select_layers(&importance, 0.25)?;
        let count = kinds.iter().filter(|k| **k == LayerKind::Sparse).count();
        violations += usize::from(count != (0.25 * layers as f64).round() as usize);
        violations += usize::from(kinds[0] != LayerKind::Sparse || kinds[layers - 1] != LayerKind::Sparse);
    }
    Ok(Outcome::new(
        violations as f64,
        format!("config: {} of {n} layers sparse (ratio {}); select_layers at 0.25 for 8..=40 layers", cfg.n_sparse(), cfg.sparse_ratio),
    ))
}

pub(super) fn grad_check(_: &ModelConfig, opts: &SuiteOptions) -> Result<Outcome> {
    let mut worst: f64 = 0.0;
    for inst in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(300 + inst));
        let (n, h, d) = (16, 2, 4);
        let hkv = if inst % 2 == 0 { 1 } else { 2 };
        let (q, k, v, dout) = (heads::<f64>(&mut rng, n, h, d), heads(&mut rng, n, hkv, d), heads(&mut rng, n, hkv, d), heads(&mut rng, n, h, d));
        let decay = DecaySchedule::new((0..h).map(|_| rng.gen_range(0.5..0.99)).collect())?;
        let zero = LinearState::zeros(h, d, d);
        let loss = |q: &HeadTensor<f64>, k: &HeadTensor<f64>, v: &HeadTensor<f64>, decay: &DecaySchedule| -> Result<f64> {
            let (o, _) = linear_attn_recurrent(q, k, v, decay, &zero)?;
            Ok(crate::real::dot(o.data(), dout.data()))
        };
        let g = grad_linear_attn(&q, &k, &v, &decay, &dout)?;
        for (which, analytic) in [(0, &g.dq), (1, &g.dk), (2, &g.dv)] {
            for i in 0..analytic.data().len() {
                let mut args = [q.clone(), k.clone(), v.clone()];
                args[which].data_mut()[i] += FD_EPS;
                let plus = loss(&args[0], &args[1], &args[2], &decay)?;
                args[which].data_mut()[i] -= 2.0 * FD_EPS;
                let minus = loss(&args[0], &args[1], &args[2], &decay)?;
                worst = worst.max(relative_error(analytic.data()[i], (plus - minus) / (2.0 * FD_EPS)));
            }
        }
        for head in 0..h {
            let shifted = |delta: f64| {
                let mut l = decay.lambdas().to_vec();
                l[head] += delta;
                DecaySchedule::new(l)
            };
            let num = (loss(&q, &k, &v, &shifted(FD_EPS)?)? - loss(&q, &k, &v, &shifted(-FD_EPS)?)?) / (2.0 * FD_EPS);
            worst = worst.max(relative_error(g.dlambda[head], num));
        }
    }
    Ok(Outcome::new(worst, "20 instances, N=16, dQ/dK/dV/dλ vs central differences (eps 1e-5)"))
}

/// 8-layer all-softmax toy teacher and its calibration data.
fn toy_teacher(seed: u64) -> Result<(ModelConfig, ModelWeights<f32>, Vec<Vec<u32>>)> {
    let cfg = ModelConfig::with_dims(8, 16, 2, 1, 8, 24, 32)?.uniform(LayerKind::Sparse);
    let w = ModelWeights::random(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let calib = (0..2).map(|_| tokens(&mut rng, 32, cfg.vocab_size)).collect();
    Ok((cfg, w, calib))
}

pub(super) fn frozen_params(_: &ModelConfig, opts: &SuiteOptions) -> Result<Outcome> {
    let (cfg, w, calib) = toy_teacher(opts.seed)?;
    let conv = convert_model(&cfg, &w, &calib, &ConvertOptions { steps: 20, ..Default::default() })?;
    let before = w.tensor_hashes();
    let after = conv.weights.tensor_hashes();
    let trainable = |name: &str| {
        conv.report.converted_layers.iter().any(|l| ["wq", "wk", "wv", "wo"].iter().any(|t| name == format!("layers.{l}.{t}")))
    };
    let changed_frozen = before.iter().filter(|(name, h)| !trainable(name) && after.get(*name) != Some(*h)).count();
    let changed_trainable = before.iter().filter(|(name, h)| trainable(name) && after.get(*name) != Some(*h)).count();
    let wrong_count = usize::from(conv.report.converted_layers.len() != 6);
    Ok(Outcome::new(
        (changed_frozen + wrong_count) as f64,
        format!(
            "{} layers converted {:?}; frozen tensors changed: {changed_frozen}; trainable tensors changed: {changed_trainable}",
            conv.report.converted_layers.len(),
            conv.report.converted_layers
        ),
    ))
}

pub(super) fn distill_progress(_: &ModelConfig, opts: &SuiteOptions) -> Result<Outcome> {
    let (cfg, w, calib) = toy_teacher(opts.seed)?;
    let conv = convert_model(&cfg, &w, &calib, &ConvertOptions { steps: 50, ..Default::default() })?;
    let worst_layer = conv.report.layers.iter().map(|r| r.final_mse / r.initial_mse).fold(0.0, f64::max);

    let toy = ModelConfig::with_dims(2, 32, 2, 2, 16, 64, 64)?.uniform(LayerKind::Sparse);
    let tw = ModelWeights::<f64>::random(&toy, opts.seed.wrapping_add(42))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(7));
    let plan = ConversionPlan {
        teacher_kinds: toy.layer_kinds.clone(),
        target_kinds: vec![LayerKind::Sparse, LayerKind::Linear],
        calib_sequences: (0..4).map(|_| tokens(&mut rng, 64, toy.vocab_size)).collect(),
        held_out: vec![tokens(&mut rng, 64, toy.vocab_size)],
        steps: 200,
        lr: 1e-2,
    };
    let (_, r) = distill_layer(1, &plan, &toy, &tw, &tw)?;
    let calib_ratio = r.final_mse / r.initial_mse;
    let held_ratio = r.held_out_final_mse.unwrap_or(f64::NAN) / r.held_out_initial_mse.unwrap_or(f64::NAN);
    let measured = worst_layer.max(calib_ratio / 0.5).max(held_ratio / 0.5);
    Ok(Outcome::new(
        measured,
        format!(
            "max of: worst final/initial over 6 converted layers {worst_layer:.3e}; toy recipe calib ratio {calib_ratio:.3e} / 0.5; held-out ratio {held_ratio:.3e} / 0.5"
        ),
    ))
}

pub(super) fn kv_ratio(_: &ModelConfig, _: &SuiteOptions) -> Result<Outcome> {
    let mut c = ModelConfig::with_dims(36, 4096, 32, 8, 128, 64, 64)?;
    let importance: Vec<f64> = (0..36).map(|l| (l % 9) as f64).collect();
    c.layer_kinds = select_layers(&importance, 0.25)?;
    let hybrid = kv_cache_bytes(&c, 1_000_000, 2);
    Ok(Outcome::new(
        hybrid.ratio.unwrap_or(f64::NAN),
        format!(
            "36 layers, {} sparse, 8 KV heads, head_dim 128, 2 bytes, N=1e6: hybrid {} B vs full {} B",
            hybrid.n_sparse_layers, hybrid.total_bytes, hybrid.total_full_equivalent
        ),
    ))
}

pub(super) fn decode_o1(_: &ModelConfig, opts: &SuiteOptions) -> Result<Outcome> {
    let cfg = ModelConfig::with_dims(4, 32, 2, 1, 16, 64, 64)?.uniform(LayerKind::Linear);
    let w = ModelWeights::<f32>::random(&cfg, opts.seed)?;
    decode_step_times(&cfg, &w, 1024, 100, opts.seed)?;
    let short = median(&decode_step_times(&cfg, &w, 1024, 500, opts.seed)?);
    let long = median(&decode_step_times(&cfg, &w, 16_384, 500, opts.seed)?);
    Ok(Outcome::new(long / short, format!("median decode step {long:.3e}s at 16K history vs {short:.3e}s at 1K, 500 steps each")))
}

pub(super) fn slope_separation(_: &ModelConfig, opts: &SuiteOptions) -> Result<Outcome> {
    let base = ModelConfig::with_dims(4, 16, 1, 1, 8, 32, 64)?;
    let linear = base.clone().uniform(LayerKind::Linear);
    let mut dense = base.clone().uniform(LayerKind::Sparse);
    dense.sparse.mode = AttnMode::Dense;
    let mut hybrid = base.clone();
    hybrid.layer_kinds = vec![LayerKind::Sparse, LayerKind::Linear, LayerKind::Linear, LayerKind::Sparse];
    hybrid.sparse_ratio = 0.5;
    hybrid.sparse.mode = AttnMode::Dense;
    let sweep = SweepOptions { lengths: vec![2048, 4096, 8192, 16_384, 32_768], n_decode: 0, repeats: 3, seed: opts.seed, byte_budget: None };
    let slope = |c: &ModelConfig| -> Result<f64> {
        let r = run_latency_sweep(c, &sweep)?;
        Ok(r.slopes.get(&SweepPhase::Prefill).copied().unwrap_or(f64::NAN))
    };
    let (sl, sh, sd) = (slope(&linear)?, slope(&hybrid)?, slope(&dense)?);
    let margin = (1.3 - sl).min(sd - 1.7).min(sh - sl).min(sd - sh);
    Ok(Outcome::new(
        margin,
        format!("prefill slopes: linear {sl:.3} (<1.3), hybrid {sh:.3}, dense {sd:.3} (>1.7); measured = smallest margin"),
    ))
}

pub(super) fn prefix_consistency(cfg: &ModelConfig, opts: &SuiteOptions) -> Result<Outcome> {
    let mut c = cfg.clone();
    c.dtype = Dtype::F64;
    let w = ModelWeights::<f64>::random(&c, opts.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let prompt = tokens(&mut rng, 128, c.vocab_size);
    let batch = model_forward(&prompt, &c, &w, &mut HybridCache::new(&c)?)?;
    let mut cache = HybridCache::new(&c)?;
    let mut worst: f64 = 0.0;
    for (t, &tok) in prompt.iter().enumerate() {
        let row = model_forward(&[tok], &c, &w, &mut cache)?;
        worst = worst.max(max_abs_diff(row.row(0), batch.row(t)));
    }
    let mut outs = Vec::new();
    for chunk in [16, 64] {
        let mut cc = c.clone();
        cc.chunk_size = chunk;
        outs.push(generate(&prompt[..32], 16, &cc, &w)?.tokens);
    }
    let same = outs[0] == outs[1];
    let measured = if same { worst } else { f64::INFINITY };
    Ok(Outcome::new(measured, format!("max |prefill - streaming| logits at N=128 (f64); greedy tokens equal for chunk 16 vs 64: {same}")))
}

pub(super) fn manifest_roundtrip(cfg: &ModelConfig, opts: &SuiteOptions) -> Result<Outcome> {
    fn roundtrip<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<usize> {
        let (text, bytes) = manifest::encode(cfg, &ModelWeights::<T>::random(cfg, seed)?)?;
        let (c2, w2) = manifest::decode::<T>(&text, &bytes)?;
        let (text2, bytes2) = manifest::encode(&c2, &w2)?;
        let diff = |a: &[u8], b: &[u8]| a.iter().zip(b).filter(|(x, y)| x != y).count() + a.len().abs_diff(b.len());
        Ok(diff(text.as_bytes(), text2.as_bytes()) + diff(&bytes, &bytes2))
    }
    let mut total = 0;
    for dtype in [Dtype::F32, Dtype::F64] {
        let mut c = cfg.clone();
        c.dtype = dtype;
        total += match dtype {
            Dtype::F32 => roundtrip::<f32>(&c, opts.seed)?,
            Dtype::F64 => roundtrip::<f64>(&c, opts.seed)?,
        };
    }
    Ok(Outcome::new(total as f64, "differing bytes after write -> read -> write, f32 and f64"))
}
