use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config_err, Result};
use crate::kernels::{RopeParams, DEFAULT_THETA_BASE};
use crate::linattn::{decay_rates, DecaySchedule};
use crate::real::Dtype;
use crate::sparseattn::SparseParams;

/// Attention flavor of one layer. Sparse layers run without positional
/// encoding; linear layers rotate Q and K.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Sparse,
    Linear,
}

/// `Hybrid` enforces the sparse-layer census and sparse endpoints. `Uniform`
/// stacks (every layer the same kind) exist for teachers and for latency
/// baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    #[default]
    Hybrid,
    Uniform,
}

pub const DEFAULT_SPARSE_RATIO: f64 = 0.25;
pub const DEFAULT_CHUNK_SIZE: usize = 64;
pub const DEFAULT_NORM_EPS: f64 = 1e-6;

fn default_chunk_size() -> usize {
    DEFAULT_CHUNK_SIZE
}

fn default_norm_eps() -> f64 {
    DEFAULT_NORM_EPS
}

/// Missing fields in serialized form take their values from
/// [`ModelConfig::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub ffn_hidden: usize,
    pub vocab_size: usize,
    pub layer_kinds: Vec<LayerKind>,
    pub rope: RopeParams,
    pub decay: DecaySchedule,
    pub sparse: SparseParams,
    pub sparse_ratio: f64,
    pub dtype: Dtype,
    #[serde(default = "default_chunk_size")]
    pub chunk_size: usize,
    #[serde(default)]
    pub layout: Layout,
    #[serde(default = "default_norm_eps")]
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    /// Desk-scale hybrid: 8 layers, sparse at both ends.
    fn default() -> Self {
        let n_layers = 8;
        let mut layer_kinds = vec![LayerKind::Linear; n_layers];
        layer_kinds[0] = LayerKind::Sparse;
        layer_kinds[n_layers - 1] = LayerKind::Sparse;
        Self {
            n_layers,
            d_model: 128,
            n_heads: 4,
            n_kv_heads: 2,
            head_dim: 32,
            ffn_hidden: 256,
            vocab_size: 512,
            layer_kinds,
            rope: RopeParams { theta_base: DEFAULT_THETA_BASE, head_dim: 32 },
            decay: decay_rates(4).expect("4 heads"),
            sparse: SparseParams::default(),
            sparse_ratio: DEFAULT_SPARSE_RATIO,
            dtype: Dtype::F32,
            chunk_size: DEFAULT_CHUNK_SIZE,
            layout: Layout::Hybrid,
            norm_eps: DEFAULT_NORM_EPS,
        }
    }
}

impl ModelConfig {
    /// Config with the given dimensions; rope, decay and kinds are derived
    /// (sparse endpoints, linear interior). Stacks too small for the default
    /// ratio get the smallest ratio that keeps both endpoints sparse.
    pub fn with_dims(n_layers: usize, d_model: usize, n_heads: usize, n_kv_heads: usize, head_dim: usize, ffn_hidden: usize, vocab_size: usize) -> Result<Self> {
        if n_heads == 0 {
            return Err(config_err("n_heads must be positive"));
        }
        let default_quota = (DEFAULT_SPARSE_RATIO * n_layers as f64).round() as usize;
        let quota = default_quota.max(n_layers.min(2));
        let sparse_ratio = if quota == default_quota { DEFAULT_SPARSE_RATIO } else { quota as f64 / n_layers as f64 };
        let layer_kinds = (0..n_layers)
            .map(|i| if i == 0 || i + 1 == n_layers || i < quota.saturating_sub(1) { LayerKind::Sparse } else { LayerKind::Linear })
            .collect();
        let cfg = Self {
            n_layers,
            d_model,
            n_heads,
            n_kv_heads,
            head_dim,
            ffn_hidden,
            vocab_size,
            layer_kinds,
            rope: RopeParams { theta_base: DEFAULT_THETA_BASE, head_dim },
            decay: decay_rates(n_heads)?,
            sparse_ratio,
            ..Self::default()
        };
        Ok(cfg)
    }

    /// Every layer of one kind, sparse ratio set to match.
    pub fn uniform(mut self, kind: LayerKind) -> Self {
        self.layer_kinds = vec![kind; self.n_layers];
        self.layout = Layout::Uniform;
        self.sparse_ratio = if kind == LayerKind::Sparse { 1.0 } else { self.sparse_ratio };
        self
    }

    pub fn n_sparse(&self) -> usize {
        self.layer_kinds.iter().filter(|k| **k == LayerKind::Sparse).count()
    }

    pub fn n_linear(&self) -> usize {
        self.n_layers - self.n_sparse()
    }

    pub fn attn_width(&self) -> usize {
        self.n_heads * self.head_dim
    }

    pub fn kv_width(&self) -> usize {
        self.n_kv_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("head_dim", self.head_dim),
            ("ffn_hidden", self.ffn_hidden),
            ("vocab_size", self.vocab_size),
            ("chunk_size", self.chunk_size),
        ] {
            if v == 0 {
                return Err(config_err(format!("{name} must be positive")));
            }
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(config_err(format!(
                "n_heads ({}) must be divisible by n_kv_heads ({})",
                self.n_heads, self.n_kv_heads
            )));
        }
        self.rope.validate()?;
        if self.rope.head_dim != self.head_dim {
            return Err(config_err(format!("rope.head_dim ({}) differs from head_dim ({})", self.rope.head_dim, self.head_dim)));
        }
        if self.decay.n_heads() != self.n_heads {
            return Err(config_err(format!("decay lists {} heads, n_heads is {}", self.decay.n_heads(), self.n_heads)));
        }
        self.sparse.validate()?;
        if !(self.sparse_ratio > 0.0 && self.sparse_ratio <= 1.0) {
            return Err(config_err(format!("sparse_ratio {} is outside (0, 1]", self.sparse_ratio)));
        }
        if !(self.norm_eps > 0.0) {
            return Err(config_err("norm_eps must be positive"));
        }
        if self.layer_kinds.len() != self.n_layers {
            return Err(config_err(format!("layer_kinds has {} entries for {} layers", self.layer_kinds.len(), self.n_layers)));
        }
        match self.layout {
            Layout::Hybrid => {
                let want = (self.sparse_ratio * self.n_layers as f64).round() as usize;
                if self.n_sparse() != want {
                    return Err(config_err(format!(
                        "layer_kinds has {} sparse layers, sparse_ratio {} of {} layers requires {want}",
                        self.n_sparse(),
                        self.sparse_ratio,
                        self.n_layers
                    )));
                }
                if self.layer_kinds[0] != LayerKind::Sparse || self.layer_kinds[self.n_layers - 1] != LayerKind::Sparse {
                    return Err(config_err("layer_kinds: first and last layers must be sparse"));
                }
            }
            Layout::Uniform => {
                if self.layer_kinds.iter().any(|k| *k != self.layer_kinds[0]) {
                    return Err(config_err("layer_kinds: uniform layout needs a single layer kind"));
                }
            }
        }
        Ok(())
    }

    /// Short stable digest of the canonical JSON form.
    pub fn config_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        hex::encode(&digest[..8])
    }
}

/// Chooses which layers stay sparse. The quota `round(ratio * n)` includes
/// the first and last layers; the rest go to the most important interior
/// layers, ties toward the lower index.
pub fn select_layers(importance: &[f64], sparse_ratio: f64) -> Result<Vec<LayerKind>> {
    let n = importance.len();
    if n < 2 {
        return Err(config_err(format!("layer selection needs at least 2 layers, got {n}")));
    }
    if !(sparse_ratio > 0.0 && sparse_ratio <= 1.0) {
        return Err(config_err(format!("sparse_ratio {sparse_ratio} is outside (0, 1]")));
    }
    let quota = (sparse_ratio * n as f64).round() as usize;
    if quota < 2 {
        return Err(config_err(format!(
            "sparse quota {quota} of {n} layers cannot hold the first and last layers"
        )));
    }
    if importance.iter().any(|v| v.is_nan()) {
        return Err(config_err("importance scores contain NaN"));
    }
    let mut kinds = vec![LayerKind::Linear; n];
    kinds[0] = LayerKind::Sparse;
    kinds[n - 1] = LayerKind::Sparse;
    let mut interior: Vec<usize> = (1..n - 1).collect();
    interior.sort_by(|&a, &b| importance[b].partial_cmp(&importance[a]).expect("no NaN").then(a.cmp(&b)));
    for &l in interior.iter().take(quota - 2) {
        kinds[l] = LayerKind::Sparse;
    }
    Ok(kinds)
}
