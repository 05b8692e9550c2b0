//! Velocity transformer over `[z_t | z_c | M_c]` patch tokens.

mod checkpoint;
mod forward;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use forward::{
    conditioning_vector, forward, forward_batch, forward_grid, velocity_latent, AttentionCapture, BatchOutput, ParamVars, SampleInput,
};

use crate::error::{config_err, usage, Error, Result};
use crate::layout::Geometry;
use crate::numerics::{Array, ROPE_BASE};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub token_dim: usize,
    pub head_count: usize,
    pub head_dim: usize,
    pub block_count: usize,
    pub patch: usize,
    pub codec_factor: usize,
    pub n_max: usize,
    pub conditioning_dim: usize,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_rope_base")]
    pub rope_base: f32,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_rope_base() -> f32 {
    ROPE_BASE
}

impl Default for ModelConfig {
    /// 4 blocks, width 128, 4 heads of 32.
    fn default() -> Self {
        Self {
            token_dim: 128,
            head_count: 4,
            head_dim: 32,
            block_count: 4,
            patch: 2,
            codec_factor: 2,
            n_max: 512,
            conditioning_dim: 128,
            mlp_ratio: default_mlp_ratio(),
            rope_base: ROPE_BASE,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("token_dim", self.token_dim),
            ("head_count", self.head_count),
            ("head_dim", self.head_dim),
            ("block_count", self.block_count),
            ("patch", self.patch),
            ("codec_factor", self.codec_factor),
            ("n_max", self.n_max),
            ("conditioning_dim", self.conditioning_dim),
            ("mlp_ratio", self.mlp_ratio),
        ];
        if let Some((name, _)) = fields.iter().find(|(_, v)| *v == 0) {
            return Err(config_err!("model.{name} must be positive"));
        }
        if self.token_dim != self.head_count * self.head_dim {
            return Err(config_err!(
                "model.token_dim {} != head_count {} x head_dim {}",
                self.token_dim,
                self.head_count,
                self.head_dim
            ));
        }
        if !self.head_dim.is_multiple_of(4) {
            return Err(config_err!("model.head_dim {} must be divisible by 4", self.head_dim));
        }
        if !self.conditioning_dim.is_multiple_of(2) {
            return Err(config_err!("model.conditioning_dim must be even"));
        }
        if self.rope_base.is_nan() || self.rope_base <= 1.0 {
            return Err(config_err!("model.rope_base must exceed 1"));
        }
        Ok(())
    }

    pub fn latent_channels(&self) -> usize {
        3 * self.codec_factor * self.codec_factor
    }

    pub fn mask_channels(&self) -> usize {
        self.codec_factor * self.codec_factor
    }

    pub fn token_in_dim(&self) -> usize {
        self.patch * self.patch * (2 * self.latent_channels() + self.mask_channels())
    }

    pub fn token_out_dim(&self) -> usize {
        self.patch * self.patch * self.latent_channels()
    }

    pub fn mlp_dim(&self) -> usize {
        self.mlp_ratio * self.token_dim
    }

    /// Attention temperature used when no override is given. Evaluated in
    /// f64 like the scaled temperature so the neutral case matches bitwise.
    pub fn base_temperature(&self) -> f32 {
        (1.0 / self.head_dim as f64).sqrt() as f32
    }

    /// Pixel extents of a canvas half must be multiples of this.
    pub fn pixel_multiple(&self) -> usize {
        self.codec_factor * self.patch
    }

    pub fn geometry_for(&self, height: usize, half_width: usize) -> Result<Geometry> {
        let m = self.pixel_multiple();
        if !height.is_multiple_of(m) || !half_width.is_multiple_of(m) {
            return Err(config_err!("{height}x{half_width} halves must be multiples of {m}"));
        }
        let f = self.codec_factor;
        Geometry::new(height / f, 2 * half_width / f, self.latent_channels(), self.mask_channels(), self.patch)
    }

    fn check_geometry(&self, g: &Geometry) -> Result<()> {
        if g.patch != self.patch || g.latent_channels != self.latent_channels() || g.mask_channels != self.mask_channels() {
            return Err(usage!(
                "sequence geometry (patch {}, {} latent ch, {} mask ch) does not match the model",
                g.patch,
                g.latent_channels,
                g.mask_channels
            ));
        }
        Ok(())
    }
}

/// Which tensors an optimizer may update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Full,
    AttentionOnly,
    /// Every tensor of the later half of the blocks.
    SingleBlocks,
}

impl FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Strategy::Full),
            "attention_only" => Ok(Strategy::AttentionOnly),
            "single_blocks" => Ok(Strategy::SingleBlocks),
            _ => Err(usage!("unknown strategy `{s}` (expected full|attention_only|single_blocks)")),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Full => "full",
            Strategy::AttentionOnly => "attention_only",
            Strategy::SingleBlocks => "single_blocks",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    /// Layer label used for update reports, e.g. `attention.q`.
    pub label: String,
    pub value: Array,
    pub trainable: bool,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Normal(f32),
}

struct TensorSpec {
    name: String,
    label: &'static str,
    shape: Vec<usize>,
    init: Init,
}

pub(crate) const BLOCK_TENSORS: usize = 14;
pub(crate) const PRE_BLOCK_TENSORS: usize = 6;

fn tensor_specs(c: &ModelConfig) -> Vec<TensorSpec> {
    let (d, cd, md) = (c.token_dim, c.conditioning_dim, c.mlp_dim());
    let std = |fan_in: usize| Init::Normal(1.0 / (fan_in as f32).sqrt());
    let mut specs = Vec::new();
    let mut push = |name: String, label: &'static str, shape: Vec<usize>, init: Init| {
        specs.push(TensorSpec { name, label, shape, init })
    };
    push("embed.tokens.weight".into(), "embed.tokens", vec![c.token_in_dim(), d], std(c.token_in_dim()));
    push("embed.tokens.bias".into(), "embed.tokens", vec![1, d], Init::Zeros);
    push("embed.timestep.weight".into(), "embed.timestep", vec![cd, cd], std(cd));
    push("embed.timestep.bias".into(), "embed.timestep", vec![1, cd], Init::Zeros);
    push("embed.mode".into(), "embed.mode", vec![2, cd], Init::Normal(0.5));
    push("embed.category".into(), "embed.category", vec![3, cd], Init::Normal(0.5));
    for b in 0..c.block_count {
        let p = |s: &str| format!("blocks.{b}.{s}");
        push(p("modulation.weight"), "modulation", vec![cd, 4 * d], Init::Normal(0.02));
        push(p("modulation.bias"), "modulation", vec![1, 4 * d], Init::Zeros);
        for (proj, label) in [("q", "attention.q"), ("k", "attention.k"), ("v", "attention.v"), ("out", "attention.out")] {
            push(p(&format!("attention.{proj}.weight")), label, vec![d, d], std(d));
            push(p(&format!("attention.{proj}.bias")), label, vec![1, d], Init::Zeros);
        }
        push(p("mlp.in.weight"), "mlp.in", vec![d, md], std(d));
        push(p("mlp.in.bias"), "mlp.in", vec![1, md], Init::Zeros);
        push(p("mlp.out.weight"), "mlp.out", vec![md, d], std(md));
        push(p("mlp.out.bias"), "mlp.out", vec![1, d], Init::Zeros);
    }
    push("head.modulation.weight".into(), "head.modulation", vec![cd, 2 * d], Init::Normal(0.02));
    push("head.modulation.bias".into(), "head.modulation", vec![1, 2 * d], Init::Zeros);
    push("head.weight".into(), "head", vec![d, c.token_out_dim()], Init::Zeros);
    push("head.bias".into(), "head", vec![1, c.token_out_dim()], Init::Zeros);
    specs
}

/// All transformer weights with labels and trainable flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub tensors: Vec<Tensor>,
    /// Typical real-token count seen in training.
    pub n_train: usize,
}

impl ModelParams {
    /// Deterministic in `(config, seed)`; the output head starts at zero so
    /// the initial velocity prediction is identically zero.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tensors = tensor_specs(config)
            .into_iter()
            .map(|s| {
                let value = match s.init {
                    Init::Zeros => Array::zeros(&s.shape),
                    Init::Normal(std) => {
                        let dist = Normal::new(0.0f32, std).expect("positive std");
                        Array::from_fn(&s.shape, |_| dist.sample(&mut rng))
                    }
                };
                Tensor { name: s.name, label: s.label.to_string(), value, trainable: true }
            })
            .collect();
        Ok(Self { config: config.clone(), tensors, n_train: config.n_max })
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.tensors.iter().filter(|t| t.trainable).map(|t| t.value.len()).sum()
    }

    pub fn labels(&self) -> Vec<String> {
        let mut seen = Vec::new();
        for t in &self.tensors {
            if !seen.contains(&t.label) {
                seen.push(t.label.clone());
            }
        }
        seen
    }

    /// Parameter count per label.
    pub fn label_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for t in &self.tensors {
            *out.entry(t.label.clone()).or_insert(0) += t.value.len();
        }
        out
    }

    pub fn select_trainable(&mut self, strategy: Strategy) {
        let first_single = self.config.block_count / 2;
        for (i, t) in self.tensors.iter_mut().enumerate() {
            t.trainable = match strategy {
                Strategy::Full => true,
                Strategy::AttentionOnly => t.label.starts_with("attention."),
                Strategy::SingleBlocks => {
                    block_of(i, self.config.block_count).is_some_and(|b| b >= first_single)
                }
            };
        }
    }

    /// Checks that tensor names and shapes match what `config` implies.
    pub(crate) fn check_structure(&self) -> Result<()> {
        self.config.validate()?;
        let specs = tensor_specs(&self.config);
        if specs.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "expected {} tensors for this config, found {}",
                specs.len(),
                self.tensors.len()
            )));
        }
        for (s, t) in specs.iter().zip(&self.tensors) {
            if s.name != t.name || s.shape != t.value.shape() || s.label != t.label {
                return Err(Error::Format(format!(
                    "tensor `{}` {:?} [{}] does not match expected `{}` {:?} [{}]",
                    t.name,
                    t.value.shape(),
                    t.label,
                    s.name,
                    s.shape,
                    s.label
                )));
            }
        }
        Ok(())
    }
}

fn block_of(tensor_index: usize, block_count: usize) -> Option<usize> {
    let rel = tensor_index.checked_sub(PRE_BLOCK_TENSORS)?;
    let b = rel / BLOCK_TENSORS;
    (b < block_count).then_some(b)
}
