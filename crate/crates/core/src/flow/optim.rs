use serde::{Deserialize, Serialize};

use crate::error::{config_err, usage, Error, Result};
use crate::model::ModelParams;
use crate::numerics::Array;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f32,
    #[serde(default = "default_beta1")]
    pub beta1: f32,
    #[serde(default = "default_beta2")]
    pub beta2: f32,
    #[serde(default = "default_eps")]
    pub eps: f32,
    pub weight_decay: f32,
    /// Global gradient-norm ceiling; 0 disables clipping.
    #[serde(default)]
    pub grad_clip: f32,
}

fn default_beta1() -> f32 {
    0.9
}
fn default_beta2() -> f32 {
    0.999
}
fn default_eps() -> f32 {
    1e-8
}

impl OptimizerConfig {
    /// Small models trained from scratch.
    pub fn toy() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-3, grad_clip: 1.0 }
    }

    /// Fine-tuning settings of the large-scale reference run (batch 128).
    pub fn reference() -> Self {
        Self { lr: 1e-5, weight_decay: 1e-3, ..Self::toy() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "reference" => Ok(Self::reference()),
            other => Err(usage!("unknown optimizer preset `{other}` (expected toy or reference)")),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.grad_clip >= 0.0;
        if !ok {
            return Err(config_err!("optimizer settings out of range: {self:?}"));
        }
        Ok(())
    }
}

/// Adam with decoupled weight decay. Only trainable tensors are touched.
pub struct AdamW {
    config: OptimizerConfig,
    step: u32,
    m: Vec<Option<Array>>,
    v: Vec<Option<Array>>,
}

impl AdamW {
    pub fn new(config: OptimizerConfig, params: &ModelParams) -> Result<Self> {
        config.validate()?;
        let n = params.tensors.len();
        Ok(Self { config, step: 0, m: vec![None; n], v: vec![None; n] })
    }

    pub fn steps_taken(&self) -> u32 {
        self.step
    }

    /// Applies one update. Returns the pre-clip global gradient norm.
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Option<Array>]) -> Result<f64> {
        if grads.len() != params.tensors.len() {
            return Err(usage!("{} gradients for {} tensors", grads.len(), params.tensors.len()));
        }
        let norm = grads.iter().flatten().map(Array::sum_squares).sum::<f64>().sqrt();
        if !norm.is_finite() {
            return Err(Error::NumericDomain(format!("gradient norm is {norm}")));
        }
        let c = self.config;
        let clip = if c.grad_clip > 0.0 && norm > c.grad_clip as f64 { (c.grad_clip as f64 / norm) as f32 } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, (tensor, g)) in params.tensors.iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            if !tensor.trainable {
                continue;
            }
            let n = g.len();
            let m = self.m[i].get_or_insert_with(|| Array::zeros(g.shape()));
            let v = self.v[i].get_or_insert_with(|| Array::zeros(g.shape()));
            let (m, v) = (m.data_mut(), v.data_mut());
            let w = tensor.value.data_mut();
            for j in 0..n {
                let gj = g.data()[j] * clip;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + c.eps);
                w[j] -= c.lr * (update + c.weight_decay * w[j]);
            }
        }
        Ok(norm)
    }
}
