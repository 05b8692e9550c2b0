//! Rectified flow: straight-line noising, velocity targets, Euler sampling,
//! attention temperature scaling and self-corrective sampling.

mod loss;
mod optim;
mod sample;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, usage, Result};
use crate::layout::LatentGrid;

pub use loss::{draw_noise, training_loss, training_loss_with, LossOutput, LossSupport, NoiseDraw, TrainItem};
pub use optim::{AdamW, OptimizerConfig};
pub use sample::{
    initial_noise, sample, sample_with, self_corrective_sample, CorrectionMask, CorrectionPlan, CorrectionStep,
    CorrectionTrace, NetworkField, OracleField, SampleOutput, StepTrace, VelocityField,
};

/// Sampling steps used unless configured otherwise.
pub const DEFAULT_STEPS: usize = 28;

/// Linear schedule `sigma_k = k / T`, `k = 0..=T`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    sigmas: Vec<f32>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(config_err!("schedule needs at least one step"));
        }
        Ok(Self { sigmas: (0..=steps).map(|k| k as f32 / steps as f32).collect() })
    }

    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    /// `sigma_k`; `sigma(T) == 1` and `sigma(0) == 0` exactly.
    pub fn sigma(&self, k: usize) -> f32 {
        self.sigmas[k]
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(DEFAULT_STEPS).expect("positive step count")
    }
}

fn blend(a: &LatentGrid, b: &LatentGrid, what: &str, f: impl Fn(f32, f32) -> f32) -> Result<LatentGrid> {
    a.same_dims(b, what)?;
    LatentGrid::from_array(a.array().zip_map(b.array(), f)?)
}

/// `z_t = (1 - t) z0 + t z1`.
pub fn interpolate(z0: &LatentGrid, z1: &LatentGrid, t: f32) -> Result<LatentGrid> {
    if !(0.0..=1.0).contains(&t) {
        return Err(usage!("interpolation time {t} outside [0, 1]"));
    }
    blend(z0, z1, "interpolate", |a, b| (1.0 - t) * a + t * b)
}

/// `z1 - z0`, the constant time derivative of [`interpolate`].
pub fn target_velocity(z0: &LatentGrid, z1: &LatentGrid) -> Result<LatentGrid> {
    blend(z0, z1, "target_velocity", |a, b| b - a)
}

/// `z + (sigma_prev - sigma) * v`.
pub fn euler_step(z_t: &LatentGrid, v: &LatentGrid, sigma: f32, sigma_prev: f32) -> Result<LatentGrid> {
    let h = sigma_prev - sigma;
    blend(z_t, v, "euler_step", |z, v| z + h * v)
}

/// `z_t - sigma * v`.
pub fn predict_x0(z_t: &LatentGrid, v: &LatentGrid, sigma: f32) -> Result<LatentGrid> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(usage!("sigma {sigma} outside [0, 1]"));
    }
    blend(z_t, v, "predict_x0", |z, v| z - sigma * v)
}

fn default_alpha() -> f64 {
    1.0
}
fn default_beta() -> f64 {
    0.43
}
fn default_c() -> f64 {
    1.0
}

/// Constants of the resolution- and mask-aware temperature rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemperatureParams {
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default = "default_beta")]
    pub beta: f64,
    #[serde(default = "default_c")]
    pub c: f64,
}

impl Default for TemperatureParams {
    fn default() -> Self {
        Self { alpha: default_alpha(), beta: default_beta(), c: default_c() }
    }
}

impl TemperatureParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("c", self.c)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(config_err!("temperature.{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }
}

/// Token counts feeding [`temperature`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenCounts {
    pub n_infer: usize,
    pub n_train: usize,
    pub n_mask: usize,
    pub n_garment: usize,
}

/// Adjusted attention temperature
///
/// `sqrt(1/d) * sqrt(alpha ln N_infer / ln N_train) * sqrt(ln(N_mask + c) / ln(beta N_garment + c))`.
pub fn temperature(head_dim: usize, counts: TokenCounts, tp: &TemperatureParams) -> Result<f64> {
    tp.validate()?;
    let TokenCounts { n_infer, n_train, n_mask, n_garment } = counts;
    if head_dim == 0 || n_infer == 0 || n_mask == 0 {
        return Err(config_err!("temperature needs d, N_infer, N_mask >= 1 (got {head_dim}, {n_infer}, {n_mask})"));
    }
    if n_train < 2 {
        return Err(config_err!("N_train = {n_train} makes log N_train non-positive"));
    }
    let denom = tp.beta * n_garment as f64 + tp.c;
    if denom <= 1.0 {
        return Err(config_err!("beta * N_garment + c = {denom} makes the garment log non-positive"));
    }
    let resolution = tp.alpha * (n_infer as f64).ln() / (n_train as f64).ln();
    let relative = (n_mask as f64 + tp.c).ln() / denom.ln();
    Ok((1.0 / head_dim as f64).sqrt() * resolution.sqrt() * relative.sqrt())
}
