//! Decoder-only transformer in the LLaMA layout, small enough for a desk.
//!
//! Pre-norm blocks: norm → causal multi-head attention with rotary q/k →
//! residual; norm → SiLU-gated MLP → residual; final norm; output head.
//! Everything is computed in `f64`.

pub mod generate;
pub mod linalg;
pub mod rope;
pub mod transformer;

use serde::{Deserialize, Serialize};

pub use generate::{generate_greedy, generate_greedy_batch};
pub use rope::{apply_rope, rope_inverse_frequencies};
pub use transformer::{batch_loss, cross_entropy_loss, forward, loss_and_grad, Logits, LossOutput};

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    RmsNorm,
    LayerNorm,
}

impl NormKind {
    /// Parameter vectors per norm: gain, plus bias for LayerNorm.
    pub fn vectors(self) -> usize {
        match self {
            NormKind::RmsNorm => 1,
            NormKind::LayerNorm => 2,
        }
    }
}

fn default_rope_theta() -> f64 {
    rope::DEFAULT_ROPE_THETA
}

fn default_init_std() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub intermediate_size: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub norm_kind: NormKind,
    pub norm_eps: f64,
    pub rope_fraction: f64,
    #[serde(default = "default_rope_theta")]
    pub rope_theta: f64,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    /// Reserved for a maximal-update parameterization; must stay `false`.
    #[serde(default)]
    pub mup: bool,
}

impl ModelConfig {
    /// LLaMA-7B shape used by Amber.
    pub fn amber_7b() -> Self {
        Self {
            hidden_size: 4096,
            n_layers: 32,
            n_heads: 32,
            intermediate_size: 11008,
            vocab_size: 32000,
            max_seq_len: 2048,
            norm_kind: NormKind::RmsNorm,
            norm_eps: 1e-6,
            rope_fraction: 1.0,
            rope_theta: rope::DEFAULT_ROPE_THETA,
            tie_embeddings: false,
            init_std: 0.02,
            mup: false,
        }
    }

    /// CrystalCoder variant: LayerNorm and partial rotary embedding.
    pub fn crystalcoder_7b() -> Self {
        Self {
            vocab_size: 32032,
            norm_kind: NormKind::LayerNorm,
            norm_eps: 1e-5,
            rope_fraction: 0.25,
            ..Self::amber_7b()
        }
    }

    /// Desk-scale configuration used by the toy experiments.
    pub fn toy() -> Self {
        Self {
            hidden_size: 128,
            n_layers: 2,
            n_heads: 4,
            intermediate_size: 344,
            vocab_size: crate::tokenizer::VOCAB_SIZE,
            max_seq_len: 64,
            norm_kind: NormKind::RmsNorm,
            norm_eps: 1e-6,
            rope_fraction: 1.0,
            rope_theta: rope::DEFAULT_ROPE_THETA,
            tie_embeddings: false,
            init_std: 0.02,
            mup: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_size / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let zero = [
            ("hidden_size", self.hidden_size),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("intermediate_size", self.intermediate_size),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ]
        .into_iter()
        .find(|(_, v)| *v == 0);
        if let Some((name, _)) = zero {
            return Err(Error::Invalid(format!("{name} must be positive")));
        }
        if self.hidden_size % self.n_heads != 0 {
            return Err(Error::Invalid(format!(
                "hidden_size {} not divisible by n_heads {}",
                self.hidden_size, self.n_heads
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Invalid("norm_eps must be positive".into()));
        }
        if !(self.init_std > 0.0) {
            return Err(Error::Invalid("init_std must be positive".into()));
        }
        rope::rotary_dims(self.head_dim(), self.rope_fraction)?;
        if self.mup {
            return Err(Error::Invalid("mup parameterization is not implemented".into()));
        }
        Ok(())
    }

    /// Closed-form parameter count.
    pub fn parameter_count(&self) -> u64 {
        let (h, i, v, l) = (
            self.hidden_size as u64,
            self.intermediate_size as u64,
            self.vocab_size as u64,
            self.n_layers as u64,
        );
        let nv = self.norm_kind.vectors() as u64;
        let heads = if self.tie_embeddings { 1 } else { 2 };
        heads * v * h + l * (4 * h * h + 3 * h * i + 2 * nv * h) + nv * h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TensorRole {
    Weight,
    Gain,
    Bias,
    /// Output head; initialised at `init_std / sqrt(hidden_size)`.
    Head,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub role: TensorRole,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of one norm's gain and optional bias.
#[derive(Debug, Clone, Copy)]
pub struct NormOffsets {
    pub gain: usize,
    pub bias: Option<usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerOffsets {
    pub attn_norm: NormOffsets,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub mlp_norm: NormOffsets,
    pub w_gate: usize,
    pub w_up: usize,
    pub w_down: usize,
}

/// Name, shape and position of every tensor in the flat parameter buffer.
#[derive(Debug, Clone)]
pub struct Layout {
    pub tensors: Vec<TensorSpec>,
    pub embedding: usize,
    pub layers: Vec<LayerOffsets>,
    pub final_norm: NormOffsets,
    /// Equal to `embedding` when the head is tied.
    pub head: usize,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut tensors = Vec::new();
        let mut offset = 0usize;
        let mut add = |name: String, shape: Vec<usize>, role: TensorRole| {
            let spec = TensorSpec {
                name,
                shape,
                offset,
                role,
            };
            offset += spec.len();
            let at = spec.offset;
            tensors.push(spec);
            at
        };
        let (h, i, v) = (cfg.hidden_size, cfg.intermediate_size, cfg.vocab_size);
        let ln = cfg.norm_kind == NormKind::LayerNorm;

        let embedding = add("tok_embeddings".into(), vec![v, h], TensorRole::Weight);
        let norm = |prefix: String, add: &mut dyn FnMut(String, Vec<usize>, TensorRole) -> usize| {
            let gain = add(format!("{prefix}.weight"), vec![h], TensorRole::Gain);
            let bias = ln.then(|| add(format!("{prefix}.bias"), vec![h], TensorRole::Bias));
            NormOffsets { gain, bias }
        };
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = format!("layers.{l}");
            let attn_norm = norm(format!("{p}.attn_norm"), &mut add);
            let wq = add(format!("{p}.attn.wq"), vec![h, h], TensorRole::Weight);
            let wk = add(format!("{p}.attn.wk"), vec![h, h], TensorRole::Weight);
            let wv = add(format!("{p}.attn.wv"), vec![h, h], TensorRole::Weight);
            let wo = add(format!("{p}.attn.wo"), vec![h, h], TensorRole::Weight);
            let mlp_norm = norm(format!("{p}.mlp_norm"), &mut add);
            let w_gate = add(format!("{p}.mlp.w_gate"), vec![i, h], TensorRole::Weight);
            let w_up = add(format!("{p}.mlp.w_up"), vec![i, h], TensorRole::Weight);
            let w_down = add(format!("{p}.mlp.w_down"), vec![h, i], TensorRole::Weight);
            layers.push(LayerOffsets {
                attn_norm,
                wq,
                wk,
                wv,
                wo,
                mlp_norm,
                w_gate,
                w_up,
                w_down,
            });
        }
        let final_norm = norm("final_norm".into(), &mut add);
        let head = if cfg.tie_embeddings {
            embedding
        } else {
            add("lm_head".into(), vec![v, h], TensorRole::Head)
        };
        Self {
            tensors,
            embedding,
            layers,
            final_norm,
            head,
            total: offset,
        }
    }

    pub fn find(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// All model weights in one flat buffer, addressed through [`Layout`].
#[derive(Debug, Clone)]
pub struct ParameterSet {
    pub layout: Layout,
    pub data: Vec<f64>,
}

impl PartialEq for ParameterSet {
    fn eq(&self, other: &Self) -> bool {
        self.layout.tensors == other.layout.tensors && self.data == other.data
    }
}

impl ParameterSet {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let layout = Layout::new(cfg);
        let data = vec![0.0; layout.total];
        Self { layout, data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.layout.find(name).map(|t| &self.data[t.range()])
    }

    pub fn slice(&self, offset: usize, len: usize) -> &[f64] {
        &self.data[offset..offset + len]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Bitwise equality, distinguishing `-0.0` from `0.0` and comparing NaN payloads.
    pub fn bit_identical(&self, other: &Self) -> bool {
        self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Deterministic initialisation.
///
/// Tensors are filled in layout order, elements row-major, from the
/// `"init"` stream derived from `seed`: weights ~ N(0, init_std²), the
/// output head ~ N(0, (init_std/√hidden)²), gains 1, biases 0.
pub fn init_parameters(cfg: &ModelConfig, seed: u64) -> Result<ParameterSet> {
    cfg.validate()?;
    let mut p = ParameterSet::zeros(cfg);
    let mut rng = Rng::derive(seed, "init");
    let head_std = cfg.init_std / (cfg.hidden_size as f64).sqrt();
    for spec in p.layout.tensors.clone() {
        let values = &mut p.data[spec.range()];
        match spec.role {
            TensorRole::Weight => values.iter_mut().for_each(|x| *x = cfg.init_std * rng.normal()),
            TensorRole::Head => values.iter_mut().for_each(|x| *x = head_std * rng.normal()),
            TensorRole::Gain => values.fill(1.0),
            TensorRole::Bias => values.fill(0.0),
        }
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent oracle: sum the products of every tensor shape.
    fn shape_sum(cfg: &ModelConfig) -> u64 {
        Layout::new(cfg)
            .tensors
            .iter()
            .map(|t| t.shape.iter().product::<usize>() as u64)
            .sum()
    }

    #[test]
    fn amber_count_is_six_point_seven_billion() {
        let cfg = ModelConfig::amber_7b();
        let n = cfg.parameter_count();
        assert_eq!(n, 6_738_415_616);
        assert!(((n as f64) - 6.7e9).abs() / 6.7e9 < 0.02);
    }

    #[test]
    fn toy_count_matches_shape_sum() {
        let cfg = ModelConfig::toy();
        // 2·258·128 + 2·(4·128² + 3·128·344 + 2·128) + 128
        assert_eq!(cfg.parameter_count(), 66_048 + 2 * (65_536 + 132_096 + 256) + 128);
        assert_eq!(cfg.parameter_count(), shape_sum(&cfg));
        for cfg in [
            ModelConfig::crystalcoder_7b(),
            ModelConfig {
                tie_embeddings: true,
                norm_kind: NormKind::LayerNorm,
                ..ModelConfig::toy()
            },
        ] {
            assert_eq!(cfg.parameter_count(), shape_sum(&cfg));
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = ModelConfig::toy();
        let a = init_parameters(&cfg, 7).unwrap();
        let b = init_parameters(&cfg, 7).unwrap();
        let c = init_parameters(&cfg, 8).unwrap();
        assert!(a.bit_identical(&b));
        assert!(!a.bit_identical(&c));
        assert!(a.tensor("layers.0.attn_norm.weight").unwrap().iter().all(|&x| x == 1.0));
        assert_eq!(a.len() as u64, cfg.parameter_count());
    }

    #[test]
    fn validation() {
        let mut cfg = ModelConfig::toy();
        cfg.n_heads = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.rope_fraction = 0.3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.norm_eps = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::toy();
        cfg.mup = true;
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::crystalcoder_7b().validate().is_ok());
    }
}
