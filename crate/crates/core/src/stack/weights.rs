use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::kernels::GateParams;
use crate::real::Real;
use crate::tensor::Matrix;

/// Parameters of one attention + FFN block. The FFN is a gated MLP whose
/// input matrix holds the gate and up projections side by side.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights<T> {
    pub attn_norm: Vec<T>,
    pub wq: Matrix<T>,
    pub wk: Matrix<T>,
    pub wv: Matrix<T>,
    pub wo: Matrix<T>,
    pub gate: GateParams<T>,
    pub q_gamma: Vec<T>,
    pub k_gamma: Vec<T>,
    pub ffn_norm: Vec<T>,
    /// `d_model x 2*ffn_hidden`: columns `[0, f)` gate, `[f, 2f)` up.
    pub ffn_in: Matrix<T>,
    pub ffn_out: Matrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    pub embed: Matrix<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub final_norm: Vec<T>,
    pub unembed: Matrix<T>,
}

/// Named tensor shapes in canonical (manifest) order.
pub fn tensor_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let a = cfg.attn_width();
    let kv = cfg.kv_width();
    let f = cfg.ffn_hidden;
    let mut out = vec![("embed".to_string(), vec![cfg.vocab_size, d])];
    for l in 0..cfg.n_layers {
        let p = |s: &str| format!("layers.{l}.{s}");
        out.extend([
            (p("attn_norm"), vec![d]),
            (p("wq"), vec![d, a]),
            (p("wk"), vec![d, kv]),
            (p("wv"), vec![d, kv]),
            (p("wo"), vec![a, d]),
            (p("gate"), vec![d, a]),
            (p("q_gamma"), vec![cfg.head_dim]),
            (p("k_gamma"), vec![cfg.head_dim]),
            (p("ffn_norm"), vec![d]),
            (p("ffn_in"), vec![d, 2 * f]),
            (p("ffn_out"), vec![f, d]),
        ]);
    }
    out.push(("final_norm".to_string(), vec![d]));
    out.push(("unembed".to_string(), vec![d, cfg.vocab_size]));
    out
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> ModelWeights<T> {
    /// Builds every tensor from `fill(name, shape)`, called in layout order.
    pub fn from_fn(cfg: &ModelConfig, mut fill: impl FnMut(&str, &[usize]) -> Result<Vec<T>>) -> Result<Self> {
        cfg.validate()?;
        let mut it = tensor_layout(cfg).into_iter();
        let mut next = |fill: &mut dyn FnMut(&str, &[usize]) -> Result<Vec<T>>| -> Result<(Vec<usize>, Vec<T>)> {
            let (name, shape) = it.next().expect("layout and builder agree");
            let data = fill(&name, &shape)?;
            if data.len() != numel(&shape) {
                return Err(shape_err(format!("tensor {name}: {} values for shape {shape:?}", data.len())));
            }
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("tensor {name}: non-finite value at index {i}")));
            }
            Ok((shape, data))
        };
        let mat = |(s, d): (Vec<usize>, Vec<T>)| Matrix::from_parts(s[0], s[1], d);
        let vec = |(_, d): (Vec<usize>, Vec<T>)| d;

        let embed = mat(next(&mut fill)?);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            layers.push(LayerWeights {
                attn_norm: vec(next(&mut fill)?),
                wq: mat(next(&mut fill)?),
                wk: mat(next(&mut fill)?),
                wv: mat(next(&mut fill)?),
                wo: mat(next(&mut fill)?),
                gate: GateParams { weight: mat(next(&mut fill)?) },
                q_gamma: vec(next(&mut fill)?),
                k_gamma: vec(next(&mut fill)?),
                ffn_norm: vec(next(&mut fill)?),
                ffn_in: mat(next(&mut fill)?),
                ffn_out: mat(next(&mut fill)?),
            });
        }
        let final_norm = vec(next(&mut fill)?);
        let unembed = mat(next(&mut fill)?);
        Ok(Self { embed, layers, final_norm, unembed })
    }

    /// Gaussian initialization scaled by fan-in; residual output projections
    /// are shrunk further with depth. Values are drawn in f64 so f32 and f64
    /// models from one seed agree up to rounding.
    pub fn random(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = (2.0 * cfg.n_layers as f64).sqrt();
        Self::from_fn(cfg, |name, shape| {
            let leaf = name.rsplit('.').next().unwrap_or(name);
            let n = numel(shape);
            let std = match leaf {
                "attn_norm" | "ffn_norm" | "final_norm" | "q_gamma" | "k_gamma" => return Ok(vec![T::one(); n]),
                "embed" => 1.0,
                "wo" | "ffn_out" => 1.0 / (shape[0] as f64).sqrt() / depth,
                _ => 1.0 / (shape[0] as f64).sqrt(),
            };
            let dist = Normal::new(0.0, std).expect("positive std");
            Ok((0..n).map(|_| T::of(dist.sample(&mut rng))).collect())
        })
    }

    /// Tensors in layout order, flattened row-major.
    pub fn named_tensors(&self) -> Vec<(String, &[T])> {
        let mut out: Vec<(String, &[T])> = vec![("embed".into(), self.embed.data())];
        for (l, w) in self.layers.iter().enumerate() {
            let p = |s: &str| format!("layers.{l}.{s}");
            out.extend([
                (p("attn_norm"), &w.attn_norm[..]),
                (p("wq"), w.wq.data()),
                (p("wk"), w.wk.data()),
                (p("wv"), w.wv.data()),
                (p("wo"), w.wo.data()),
                (p("gate"), w.gate.weight.data()),
                (p("q_gamma"), &w.q_gamma[..]),
                (p("k_gamma"), &w.k_gamma[..]),
                (p("ffn_norm"), &w.ffn_norm[..]),
                (p("ffn_in"), w.ffn_in.data()),
                (p("ffn_out"), w.ffn_out.data()),
            ]);
        }
        out.push(("final_norm".into(), &self.final_norm[..]));
        out.push(("unembed".into(), self.unembed.data()));
        out
    }

    /// SHA-256 (hex) of each tensor's little-endian bytes.
    pub fn tensor_hashes(&self) -> BTreeMap<String, String> {
        let mut buf = Vec::new();
        self.named_tensors()
            .into_iter()
            .map(|(name, data)| {
                buf.clear();
                data.iter().for_each(|v| v.write_le(&mut buf));
                (name, hex::encode(Sha256::digest(&buf)))
            })
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.named_tensors().iter().map(|(_, d)| d.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> ModelWeights<U> {
        let m = |x: &Matrix<T>| Matrix::from_parts(x.rows(), x.cols(), x.data().iter().map(|v| U::of(v.as_f64())).collect());
        let v = |x: &[T]| x.iter().map(|v| U::of(v.as_f64())).collect::<Vec<U>>();
        ModelWeights {
            embed: m(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|w| LayerWeights {
                    attn_norm: v(&w.attn_norm),
                    wq: m(&w.wq),
                    wk: m(&w.wk),
                    wv: m(&w.wv),
                    wo: m(&w.wo),
                    gate: GateParams { weight: m(&w.gate.weight) },
                    q_gamma: v(&w.q_gamma),
                    k_gamma: v(&w.k_gamma),
                    ffn_norm: v(&w.ffn_norm),
                    ffn_in: m(&w.ffn_in),
                    ffn_out: m(&w.ffn_out),
                })
                .collect(),
            final_norm: v(&self.final_norm),
            unembed: m(&self.unembed),
        }
    }
}
