//! Memory accounting for KV caches and linear states, wall-clock latency
//! sweeps, and log-log slope fitting.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::real::{Dtype, Real};
use crate::stack::{model_forward, HybridCache, LayerKind, ModelConfig, ModelWeights};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryBreakdown {
    pub n_tokens: u64,
    pub bytes_per_elem: usize,
    pub n_sparse_layers: usize,
    pub n_linear_layers: usize,
    /// KV cache of all sparse layers together.
    pub sparse_bytes: u64,
    /// Recurrent states of all linear layers together (independent of N).
    pub linear_bytes: u64,
    pub total_bytes: u64,
    /// KV cache if every layer kept full keys and values.
    pub total_full_equivalent: u64,
    /// `total_bytes / total_full_equivalent`; `None` when the full-attention
    /// cache is empty but linear states are not (N = 0).
    pub ratio: Option<f64>,
}

/// KV and state bytes at `n_tokens`. Weights and activations are not
/// counted.
pub fn kv_cache_bytes(cfg: &ModelConfig, n_tokens: u64, bytes_per_elem: usize) -> MemoryBreakdown {
    let b = bytes_per_elem as u64;
    let per_sparse = 2 * (cfg.n_kv_heads * cfg.head_dim) as u64 * n_tokens * b;
    let per_linear = (cfg.n_heads * cfg.head_dim * cfg.head_dim) as u64 * b;
    let n_sparse = cfg.layer_kinds.iter().filter(|k| **k == LayerKind::Sparse).count();
    let n_linear = cfg.layer_kinds.len() - n_sparse;
    let sparse_bytes = per_sparse * n_sparse as u64;
    let linear_bytes = per_linear * n_linear as u64;
    let total = sparse_bytes + linear_bytes;
    let full = per_sparse * cfg.layer_kinds.len() as u64;
    let ratio = match (full, total) {
        (0, 0) => Some(1.0),
        (0, _) => None,
        _ => Some(total as f64 / full as f64),
    };
    MemoryBreakdown {
        n_tokens,
        bytes_per_elem,
        n_sparse_layers: n_sparse,
        n_linear_layers: n_linear,
        sparse_bytes,
        linear_bytes,
        total_bytes: total,
        total_full_equivalent: full,
        ratio,
    }
}

/// Least-squares slope of `ln(seconds)` against `ln(n)`.
pub fn fit_loglog_slope(points: &[(f64, f64)]) -> Result<f64> {
    if points.len() < 3 {
        return Err(Error::Input(format!("slope fit needs at least 3 points, got {}", points.len())));
    }
    if let Some((n, s)) = points.iter().find(|(n, s)| !(*n > 0.0 && *s > 0.0 && n.is_finite() && s.is_finite())) {
        return Err(Error::Input(format!("slope fit needs positive finite values, got ({n}, {s})")));
    }
    let k = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::Input("slope fit needs at least two distinct lengths".into()));
    }
    Ok(sxy / sxx)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepPhase {
    Prefill,
    Decode,
    EndToEnd,
    /// The length did not fit the byte budget and was not run.
    Oom,
}

impl SweepPhase {
    pub fn name(self) -> &'static str {
        match self {
            SweepPhase::Prefill => "prefill",
            SweepPhase::Decode => "decode",
            SweepPhase::EndToEnd => "end_to_end",
            SweepPhase::Oom => "oom",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub phase: SweepPhase,
    pub n_tokens: usize,
    /// Median wall time; `None` for OOM rows.
    pub seconds: Option<f64>,
    pub config: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub config_hash: String,
    pub n_decode: usize,
    pub repeats: usize,
    /// Timed prefills (warm-up excluded).
    pub timed_runs: usize,
    pub rows: Vec<LatencyRow>,
    /// Fitted log-log slope per phase, when at least 3 lengths completed.
    pub slopes: BTreeMap<SweepPhase, f64>,
    pub oom: Vec<usize>,
}

impl LatencyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("phase,n_tokens,seconds,config\n");
        for r in &self.rows {
            let secs = r.seconds.map(|s| format!("{s:.9}")).unwrap_or_default();
            writeln!(out, "{},{},{},{}", r.phase.name(), r.n_tokens, secs, r.config).expect("string write");
        }
        out
    }

    pub fn seconds(&self, phase: SweepPhase) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.phase == phase)
            .filter_map(|r| r.seconds.map(|s| (r.n_tokens, s)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepOptions {
    pub lengths: Vec<usize>,
    pub n_decode: usize,
    pub repeats: usize,
    pub seed: u64,
    /// Lengths whose KV/state bytes after decoding would exceed this are
    /// reported as OOM instead of run.
    #[serde(default)]
    pub byte_budget: Option<u64>,
}

pub fn random_prompt(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect()
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

/// One prefill of `prompt` then `n_decode` greedy steps; returns
/// (prefill seconds, decode seconds).
fn timed_run<T: Real>(cfg: &ModelConfig, w: &ModelWeights<T>, prompt: &[u32], n_decode: usize) -> Result<(f64, f64)> {
    let t0 = Instant::now();
    let mut cache = HybridCache::new(cfg)?;
    let logits = model_forward(prompt, cfg, w, &mut cache)?;
    let prefill = t0.elapsed().as_secs_f64();
    let mut tok = argmax(logits.row(logits.rows() - 1));
    let t1 = Instant::now();
    for _ in 0..n_decode {
        let l = model_forward(&[tok], cfg, w, &mut cache)?;
        tok = argmax(l.row(0));
    }
    Ok((prefill, t1.elapsed().as_secs_f64()))
}

fn check_sweep(cfg: &ModelConfig, opts: &SweepOptions) -> Result<()> {
    cfg.validate()?;
    if opts.repeats < 3 {
        return Err(config_err(format!("repeats must be at least 3, got {}", opts.repeats)));
    }
    if opts.lengths.is_empty() || opts.lengths.contains(&0) {
        return Err(config_err("lengths must be non-empty and positive"));
    }
    if opts.lengths.windows(2).any(|w| w[0] >= w[1]) {
        return Err(config_err("lengths must be strictly increasing"));
    }
    Ok(())
}

/// Prefill/decode timings per length with random weights and seeded random
/// prompts. One discarded warm-up run precedes the sweep; every length is
/// timed `repeats` times and the median is reported.
pub fn run_latency_sweep(cfg: &ModelConfig, opts: &SweepOptions) -> Result<LatencyReport> {
    match cfg.dtype {
        Dtype::F32 => run_latency_sweep_with(cfg, &ModelWeights::<f32>::random(cfg, opts.seed)?, opts),
        Dtype::F64 => run_latency_sweep_with(cfg, &ModelWeights::<f64>::random(cfg, opts.seed)?, opts),
    }
}

pub fn run_latency_sweep_with<T: Real>(cfg: &ModelConfig, w: &ModelWeights<T>, opts: &SweepOptions) -> Result<LatencyReport> {
    check_sweep(cfg, opts)?;
    let id = cfg.config_hash();
    let mut rows = Vec::new();
    let mut oom = Vec::new();
    let mut timed_runs = 0;
    let mut warmed = false;
    for &n in &opts.lengths {
        let bytes = kv_cache_bytes(cfg, (n + opts.n_decode) as u64, T::DTYPE.size_bytes()).total_bytes;
        if opts.byte_budget.is_some_and(|budget| bytes > budget) {
            oom.push(n);
            rows.push(LatencyRow { phase: SweepPhase::Oom, n_tokens: n, seconds: None, config: id.clone() });
            continue;
        }
        let prompt = random_prompt(n, cfg.vocab_size, opts.seed ^ n as u64);
        if !warmed {
            timed_run(cfg, w, &prompt, opts.n_decode.min(1))?;
            warmed = true;
        }
        let mut pre = Vec::with_capacity(opts.repeats);
        let mut dec = Vec::with_capacity(opts.repeats);
        let mut e2e = Vec::with_capacity(opts.repeats);
        for _ in 0..opts.repeats {
            let (p, d) = timed_run(cfg, w, &prompt, opts.n_decode)?;
            timed_runs += 1;
            pre.push(p);
            dec.push(d);
            e2e.push(p + d);
        }
        let mut push = |phase, v: &[f64]| rows.push(LatencyRow { phase, n_tokens: n, seconds: Some(median(v)), config: id.clone() });
        push(SweepPhase::Prefill, &pre);
        if opts.n_decode > 0 {
            push(SweepPhase::Decode, &dec);
        }
        push(SweepPhase::EndToEnd, &e2e);
    }
    let mut report = LatencyReport {
        config_hash: id,
        n_decode: opts.n_decode,
        repeats: opts.repeats,
        timed_runs,
        rows,
        slopes: BTreeMap::new(),
        oom,
    };
    for phase in [SweepPhase::Prefill, SweepPhase::Decode, SweepPhase::EndToEnd] {
        let pts: Vec<(f64, f64)> = report.seconds(phase).into_iter().map(|(n, s)| (n as f64, s)).collect();
        if pts.len() >= 3 {
            if let Ok(slope) = fit_loglog_slope(&pts) {
                report.slopes.insert(phase, slope);
            }
        }
    }
    Ok(report)
}

/// Wall time of each of `n_steps` single-token decode steps after a prefill
/// of `history` tokens.
pub fn decode_step_times<T: Real>(cfg: &ModelConfig, w: &ModelWeights<T>, history: usize, n_steps: usize, seed: u64) -> Result<Vec<f64>> {
    let prompt = random_prompt(history, cfg.vocab_size, seed);
    let mut cache = HybridCache::new(cfg)?;
    let logits = model_forward(&prompt, cfg, w, &mut cache)?;
    let mut tok = argmax(logits.row(logits.rows() - 1));
    let mut times = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let t = Instant::now();
        let l = model_forward(&[tok], cfg, w, &mut cache)?;
        times.push(t.elapsed().as_secs_f64());
        tok = argmax(l.row(0));
    }
    Ok(times)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stack::ModelConfig;

    fn config_36() -> ModelConfig {
        let mut c = ModelConfig::with_dims(36, 4096, 32, 8, 128, 64, 64).unwrap();
        c.layer_kinds = vec![LayerKind::Linear; 36];
        c
    }

    #[test]
    fn all_full_at_a_million_tokens() {
        let mut c = config_36();
        c.layer_kinds = vec![LayerKind::Sparse; 36];
        let m = kv_cache_bytes(&c, 1_000_000, 2);
        assert_eq!(m.total_bytes, 147_456_000_000);
        assert_eq!(m.ratio, Some(1.0));
        assert_eq!(kv_cache_bytes(&c, 0, 2).ratio, Some(1.0));
    }

    #[test]
    fn hybrid_ratio_tends_to_sparse_share() {
        let mut c = config_36();
        for l in [0, 5, 9, 13, 17, 21, 25, 30, 35] {
            c.layer_kinds[l] = LayerKind::Sparse;
        }
        let big = kv_cache_bytes(&c, 1_000_000_000_000, 2).ratio.unwrap();
        assert!((big - 0.25).abs() < 1e-6);
        let m = kv_cache_bytes(&c, 1_000_000, 2).ratio.unwrap();
        assert!((0.25..=0.26).contains(&m), "{m}");
        let zero = kv_cache_bytes(&c, 0, 2);
        assert_eq!(zero.sparse_bytes, 0);
        assert_eq!(zero.total_bytes, zero.linear_bytes);
        assert_eq!(zero.ratio, None);
    }

    #[test]
    fn bytes_affine_in_n() {
        let c = config_36();
        let a = kv_cache_bytes(&c, 10, 4).total_bytes;
        let b = kv_cache_bytes(&c, 10_000, 4).total_bytes;
        assert_eq!(a, b);
        let mut h = c.clone();
        h.layer_kinds[0] = LayerKind::Sparse;
        h.layer_kinds[35] = LayerKind::Sparse;
        let f = |n| kv_cache_bytes(&h, n, 4).total_bytes;
        assert_eq!(f(20) - f(10), f(30) - f(20));
        assert_eq!(f(11) - f(10), 2 * 2 * 8 * 128 * 4);
    }

    #[test]
    fn exact_power_laws() {
        for p in [1.0, 2.0] {
            let pts: Vec<(f64, f64)> = [1024.0, 2048.0, 4096.0, 8192.0].iter().map(|&n: &f64| (n, 3e-9 * n.powf(p))).collect();
            assert!((fit_loglog_slope(&pts).unwrap() - p).abs() < 1e-9);
        }
    }

    #[test]
    fn slope_with_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pts: Vec<(f64, f64)> = (0..8)
            .map(|i| {
                let n = 1000.0 * 2f64.powi(i);
                (n, 1e-6 * n.powf(1.5) * (1.0 + rng.gen_range(-0.01..0.01)))
            })
            .collect();
        let s = fit_loglog_slope(&pts).unwrap();
        assert!((1.45..=1.55).contains(&s), "{s}");
    }

    #[test]
    fn slope_rejects_bad_input() {
        assert!(matches!(fit_loglog_slope(&[(1.0, 1.0), (2.0, 2.0)]), Err(Error::Input(_))));
        assert!(matches!(fit_loglog_slope(&[(1.0, 1.0), (2.0, 0.0), (3.0, 1.0)]), Err(Error::Input(_))));
    }

    fn tiny() -> ModelConfig {
        ModelConfig::with_dims(4, 16, 2, 1, 8, 16, 32).unwrap().uniform(LayerKind::Linear)
    }

    #[test]
    fn sweep_counts_runs() {
        let opts = SweepOptions { lengths: vec![64], n_decode: 2, repeats: 3, seed: 1, byte_budget: None };
        let r = run_latency_sweep(&tiny(), &opts).unwrap();
        assert_eq!(r.timed_runs, 3);
        for phase in [SweepPhase::Prefill, SweepPhase::Decode, SweepPhase::EndToEnd] {
            assert_eq!(r.seconds(phase).len(), 1);
        }
        assert!(r.rows.iter().all(|row| row.seconds.unwrap() > 0.0));
        assert!(r.to_csv().starts_with("phase,n_tokens,seconds,config\n"));
    }

    #[test]
    fn sweep_flags_oom() {
        let mut cfg = tiny();
        cfg.layer_kinds = vec![LayerKind::Sparse; 4];
        let budget = kv_cache_bytes(&cfg, 100, 4).total_bytes;
        let opts = SweepOptions { lengths: vec![16, 32, 512], n_decode: 1, repeats: 3, seed: 2, byte_budget: Some(budget) };
        let r = run_latency_sweep(&cfg, &opts).unwrap();
        assert_eq!(r.oom, vec![512]);
        assert!(r.to_csv().contains(&format!("oom,512,,{}", cfg.config_hash())));
        assert_eq!(r.timed_runs, 6);
    }

    #[test]
    fn sweep_rejects_bad_options() {
        let opts = SweepOptions { lengths: vec![32, 16], n_decode: 0, repeats: 3, seed: 0, byte_budget: None };
        assert!(run_latency_sweep(&tiny(), &opts).is_err());
        let opts = SweepOptions { lengths: vec![16], n_decode: 0, repeats: 2, seed: 0, byte_budget: None };
        assert!(run_latency_sweep(&tiny(), &opts).is_err());
    }
}
