use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{interpolate, target_velocity};
use crate::error::{usage, Error, Result};
use crate::layout::{apply_mask, tokenize, Canvas, Codec, LatentGrid, MaskCanvas, TaskToken};
use crate::model::{forward_batch, velocity_latent, ModelParams, ParamVars, SampleInput};
use crate::numerics::{Array, Tape, Var};

/// One training example.
#[derive(Clone, Debug)]
pub struct TrainItem {
    pub canvas: Canvas,
    pub mask: MaskCanvas,
    pub task: TaskToken,
}

/// Which latent elements enter the regression loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossSupport {
    /// Every valid token, condition region included.
    #[default]
    All,
    /// Only tokens that carry mask mass.
    Masked,
}

/// Timestep and terminal noise for one example.
#[derive(Clone, Debug)]
pub struct NoiseDraw {
    pub t: f32,
    pub z1: LatentGrid,
}

pub fn draw_noise(rng: &mut impl Rng, height: usize, width: usize, channels: usize) -> NoiseDraw {
    let t: f32 = rng.gen();
    let data = (0..height * width * channels).map(|_| rng.sample(StandardNormal)).collect();
    NoiseDraw { t, z1: LatentGrid::new(height, width, channels, data).expect("consistent dims") }
}

pub struct LossOutput {
    /// Batch mean.
    pub loss: f32,
    pub per_sample: Vec<f32>,
    /// One entry per parameter tensor; `None` for frozen tensors.
    pub grads: Vec<Option<Array>>,
}

/// Draws `(t, z1)` per example from `rng`, then evaluates
/// [`training_loss_with`].
pub fn training_loss(params: &ModelParams, batch: &[TrainItem], rng: &mut impl Rng, support: LossSupport) -> Result<LossOutput> {
    let codec = Codec::new(params.config.codec_factor)?;
    let lc = codec.latent_channels();
    let f = codec.factor;
    let draws: Vec<NoiseDraw> =
        batch.iter().map(|it| draw_noise(rng, it.canvas.height() / f, it.canvas.width() / f, lc)).collect();
    training_loss_with(params, batch, &draws, support)
}

/// Mean squared error between the predicted and the straight-line velocity,
/// averaged per example over the loss support, then over the batch.
pub fn training_loss_with(params: &ModelParams, batch: &[TrainItem], draws: &[NoiseDraw], support: LossSupport) -> Result<LossOutput> {
    if batch.is_empty() || batch.len() != draws.len() {
        return Err(usage!("batch of {} items with {} noise draws", batch.len(), draws.len()));
    }
    let cfg = &params.config;
    let codec = Codec::new(cfg.codec_factor)?;
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, params, true);

    let mut inputs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for (item, draw) in batch.iter().zip(draws) {
        let z0 = codec.encode(&item.canvas)?;
        let z_c = codec.encode(&apply_mask(&item.canvas, &item.mask)?)?;
        let m_c = codec.downsample_mask(&item.mask)?;
        let z_t = interpolate(&z0, &draw.z1, draw.t)?;
        let seq = tokenize(&z_t, &z_c, &m_c, cfg.patch, cfg.n_max)?;
        inputs.push(SampleInput::from_sequence(&mut tape, &seq, item.task, draw.t));
        let weights = match support {
            LossSupport::All => None,
            LossSupport::Masked => Some(masked_weights(&seq.masked, &seq.geometry)),
        };
        targets.push((target_velocity(&z0, &draw.z1)?, seq.geometry, weights));
    }

    let out = forward_batch(&mut tape, params, &pv, &inputs, None, None)?;
    let mut per_sample = Vec::with_capacity(batch.len());
    let mut total: Option<Var> = None;
    for (vel, (target, geometry, weights)) in out.velocity.into_iter().zip(targets) {
        let pred = velocity_latent(&mut tape, &geometry, vel);
        let target = tape.constant(target.into_array());
        let mut diff = tape.sub(pred, target);
        let count = match weights {
            None => geometry.latent_len(),
            Some(w) => {
                let n = w.data().iter().filter(|&&v| v > 0.0).count();
                let w = tape.constant(w);
                diff = tape.mul(diff, w);
                n
            }
        };
        let sq = tape.sum_squares(diff);
        // An example without masked tokens contributes zero under `Masked`.
        let mse = tape.scale(sq, 1.0 / count.max(1) as f32);
        per_sample.push(tape.value(mse).item());
        total = Some(match total {
            None => mse,
            Some(acc) => tape.add(acc, mse),
        });
    }
    let total = tape.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f32);
    let loss = tape.value(total).item();
    if !loss.is_finite() {
        return Err(Error::NumericDomain(format!("training loss is {loss}")));
    }
    let grads = tape.backward(total)?;
    let grads = pv.vars().iter().map(|&v| grads.get(v).cloned()).collect();
    Ok(LossOutput { loss, per_sample, grads })
}

/// 1 on latent elements inside masked tokens, 0 elsewhere.
fn masked_weights(masked: &[bool], g: &crate::layout::Geometry) -> Array {
    let (p, lw, lc, cols) = (g.patch, g.latent_width, g.latent_channels, g.token_cols());
    Array::from_fn(&[g.latent_height, lw, lc], |i| {
        let cell = i / lc;
        let (y, x) = (cell / lw, cell % lw);
        if masked[(y / p) * cols + x / p] {
            1.0
        } else {
            0.0
        }
    })
}
