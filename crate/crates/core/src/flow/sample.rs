use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{euler_step, temperature, NoiseSchedule, TemperatureParams, TokenCounts};
use crate::error::{config_err, usage, Error, Result};
use crate::layout::{
    apply_mask, build_tryoff_mask, composite, tokenize, Canvas, Codec, Geometry, LatentGrid, Mask, MaskCanvas, Mode,
    TaskToken,
};
use crate::model::{forward_batch, forward_grid, velocity_latent, ModelParams, ParamVars, SampleInput};
use crate::numerics::{Array, Tape, Var};

/// Anything that predicts `dz/dt` at a noise level.
pub trait VelocityField {
    fn velocity(&mut self, z_t: &LatentGrid, sigma: f32) -> Result<LatentGrid>;
}

/// The network, with the condition latent and mask fixed.
pub struct NetworkField<'a> {
    params: &'a ModelParams,
    z_c: LatentGrid,
    m_c: LatentGrid,
    task: TaskToken,
    lambda: Option<f32>,
    counts: TokenCounts,
}

impl<'a> NetworkField<'a> {
    pub fn new(
        params: &'a ModelParams,
        condition: &Canvas,
        mask: &MaskCanvas,
        task: TaskToken,
        temperature_params: Option<&TemperatureParams>,
    ) -> Result<Self> {
        let codec = Codec::new(params.config.codec_factor)?;
        let z_c = codec.encode(&apply_mask(condition, mask)?)?;
        let m_c = codec.downsample_mask(mask)?;
        let seq = tokenize(&z_c, &z_c, &m_c, params.config.patch, params.config.n_max)?;
        let counts = TokenCounts { n_infer: seq.n_real, n_train: params.n_train, n_mask: seq.n_mask, n_garment: seq.n_garment };
        let lambda = match temperature_params {
            Some(tp) => Some(temperature(params.config.head_dim, counts, tp)? as f32),
            None => None,
        };
        Ok(Self { params, z_c, m_c, task, lambda, counts })
    }

    /// Attention temperature override, if any.
    pub fn lambda(&self) -> Option<f32> {
        self.lambda
    }

    pub fn counts(&self) -> TokenCounts {
        self.counts
    }
}

impl VelocityField for NetworkField<'_> {
    fn velocity(&mut self, z_t: &LatentGrid, sigma: f32) -> Result<LatentGrid> {
        let cfg = &self.params.config;
        let seq = tokenize(z_t, &self.z_c, &self.m_c, cfg.patch, cfg.n_max)?;
        forward_grid(self.params, &seq, self.task, sigma, self.lambda)
    }
}

/// Constant velocity, e.g. the exact `z1 - z0` of a known pair.
pub struct OracleField {
    pub velocity: LatentGrid,
}

impl VelocityField for OracleField {
    fn velocity(&mut self, z_t: &LatentGrid, _sigma: f32) -> Result<LatentGrid> {
        z_t.same_dims(&self.velocity, "oracle velocity")?;
        Ok(self.velocity.clone())
    }
}

/// Seeded standard-normal latent.
pub fn initial_noise(height: usize, width: usize, channels: usize, seed: u64) -> LatentGrid {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..height * width * channels).map(|_| rng.sample(StandardNormal)).collect();
    LatentGrid::new(height, width, channels, data).expect("consistent dims")
}

#[derive(Clone, Debug, Serialize)]
pub struct StepTrace {
    pub step: usize,
    pub sigma: f32,
    pub latent_norm: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMask {
    /// `[1 | 0]`: regenerate the whole garment half.
    FullTryoff,
    /// `[tight | 0]`: only the garment pixels.
    GarmentTight,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectionStep {
    /// Position in the schedule as a fraction of `T`.
    pub fraction: f64,
    pub mask: CorrectionMask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectionPlan {
    pub steps: Vec<CorrectionStep>,
    pub iterations: usize,
    #[serde(default = "default_eta0")]
    pub eta0: f32,
    #[serde(default = "default_halvings")]
    pub max_halvings: usize,
}

fn default_eta0() -> f32 {
    0.1
}
fn default_halvings() -> usize {
    10
}

impl Default for CorrectionPlan {
    fn default() -> Self {
        Self {
            steps: vec![
                CorrectionStep { fraction: 17.0 / 28.0, mask: CorrectionMask::FullTryoff },
                CorrectionStep { fraction: 5.0 / 28.0, mask: CorrectionMask::GarmentTight },
            ],
            iterations: 5,
            eta0: default_eta0(),
            max_halvings: default_halvings(),
        }
    }
}

impl CorrectionPlan {
    pub fn none() -> Self {
        Self { steps: Vec::new(), ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(config_err!("correction.iterations must be at least 1"));
        }
        if let Some(s) = self.steps.iter().find(|s| !(s.fraction > 0.0 && s.fraction < 1.0)) {
            return Err(config_err!("correction fraction {} outside (0, 1)", s.fraction));
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(config_err!("correction.eta0 must be positive"));
        }
        Ok(())
    }

    /// Schedule index `k` (noise level `k / T`) of every correction.
    pub fn resolve(&self, steps: usize) -> Result<Vec<(usize, CorrectionMask)>> {
        self.validate()?;
        let mut out: Vec<(usize, CorrectionMask)> = Vec::with_capacity(self.steps.len());
        for s in &self.steps {
            let k = (s.fraction * steps as f64).round() as usize;
            if k == 0 || k > steps {
                return Err(config_err!("correction fraction {} maps to no step of a {steps}-step schedule", s.fraction));
            }
            if out.iter().any(|&(j, _)| j == k) {
                return Err(config_err!("two corrections land on step {k} of {steps}"));
            }
            out.push((k, s.mask));
        }
        Ok(out)
    }
}

/// Objective values of one correction step; `objective[0]` is before the
/// first refinement.
#[derive(Clone, Debug, Serialize)]
pub struct CorrectionTrace {
    pub step: usize,
    pub sigma: f32,
    pub mask: CorrectionMask,
    pub objective: Vec<f32>,
    /// Accepted step size per iteration; 0 when no trial decreased the objective.
    pub eta: Vec<f32>,
    pub diagnostic: Option<String>,
}

pub struct SampleOutput {
    pub canvas: Canvas,
    pub latent: LatentGrid,
    pub steps: Vec<StepTrace>,
    pub corrections: Vec<CorrectionTrace>,
    pub lambda: Option<f32>,
}

trait Refiner {
    fn refine(&mut self, z_t: LatentGrid, step: usize, sigma: f32) -> Result<LatentGrid>;
}

fn integrate(
    field: &mut dyn VelocityField,
    mut z: LatentGrid,
    schedule: &NoiseSchedule,
    mut refiner: Option<&mut dyn Refiner>,
) -> Result<(LatentGrid, Vec<StepTrace>)> {
    let mut trace = Vec::with_capacity(schedule.steps());
    for k in (1..=schedule.steps()).rev() {
        let sigma = schedule.sigma(k);
        if let Some(r) = refiner.as_deref_mut() {
            z = r.refine(z, k, sigma)?;
        }
        let v = field.velocity(&z, sigma)?;
        z = euler_step(&z, &v, sigma, schedule.sigma(k - 1))?;
        if !z.array().is_finite() {
            return Err(Error::NumericDomain(format!("latent became non-finite at step {k} (sigma {sigma})")));
        }
        trace.push(StepTrace { step: k, sigma, latent_norm: z.array().norm() });
    }
    Ok((z, trace))
}

/// Integrates `field` from `z_init` at `sigma = 1` down to 0, decodes and
/// pastes the result into the masked region of `condition`.
pub fn sample_with(
    field: &mut dyn VelocityField,
    condition: &Canvas,
    mask: &MaskCanvas,
    codec: &Codec,
    schedule: &NoiseSchedule,
    z_init: LatentGrid,
) -> Result<SampleOutput> {
    let (latent, steps) = integrate(field, z_init, schedule, None)?;
    let canvas = composite(condition, &codec.decode(&latent)?, mask)?;
    Ok(SampleOutput { canvas, latent, steps, corrections: Vec::new(), lambda: None })
}

fn noise_for(params: &ModelParams, condition: &Canvas, seed: u64) -> Result<(Codec, LatentGrid)> {
    let codec = Codec::new(params.config.codec_factor)?;
    let f = codec.factor;
    params.config.geometry_for(condition.height(), condition.split())?;
    Ok((codec, initial_noise(condition.height() / f, condition.width() / f, codec.latent_channels(), seed)))
}

/// Generates the masked region of `condition` with the network.
pub fn sample(
    params: &ModelParams,
    condition: &Canvas,
    mask: &MaskCanvas,
    task: TaskToken,
    schedule: &NoiseSchedule,
    temperature_params: Option<&TemperatureParams>,
    seed: u64,
) -> Result<SampleOutput> {
    let (codec, z_init) = noise_for(params, condition, seed)?;
    let mut field = NetworkField::new(params, condition, mask, task, temperature_params)?;
    let lambda = field.lambda();
    let mut out = sample_with(&mut field, condition, mask, &codec, schedule, z_init)?;
    out.lambda = lambda;
    Ok(out)
}

/// Constants of one correction layout.
struct OffLayout {
    m_c: Array,
    /// Weight of the garment-half condition (`keep` on the left).
    left_keep: Array,
    /// Weight of the predicted person half (`keep` on the right).
    right_keep: Array,
    /// 1 on regenerated elements.
    support: Array,
    count: usize,
    lambda: Option<f32>,
}

struct Corrector<'a> {
    params: &'a ModelParams,
    geometry: Geometry,
    z_c: Array,
    m_c: Array,
    task: TaskToken,
    lambda_on: Option<f32>,
    plan: Vec<(usize, CorrectionMask)>,
    layouts: Vec<OffLayout>,
    iterations: usize,
    eta0: f32,
    max_halvings: usize,
    traces: Vec<CorrectionTrace>,
}

impl Corrector<'_> {
    fn layout_for(&self, kind: CorrectionMask) -> &OffLayout {
        &self.layouts[match kind {
            CorrectionMask::FullTryoff => 0,
            CorrectionMask::GarmentTight => 1,
        }]
    }

    /// `(objective, gradient wrt z)` of the correction loss at noise level `sigma`.
    fn objective(&self, z: &LatentGrid, sigma: f32, layout: &OffLayout, want_grad: bool) -> Result<(f32, Option<Array>)> {
        let params = self.params;
        let mut tape = Tape::new();
        let pv = ParamVars::bind(&mut tape, params, false);
        let zt = tape.leaf(z.array().clone(), want_grad);
        let zc_on = tape.constant(self.z_c.clone());
        let mc_on = tape.constant(self.m_c.clone());

        let x0 = |tape: &mut Tape, zc: Var, mc: Var, task: TaskToken, lambda: Option<f32>| -> Result<Var> {
            let input = SampleInput::from_latents(tape, &self.geometry, zt, zc, mc, task, sigma);
            let out = forward_batch(tape, params, &pv, &[input], lambda, None)?;
            let v = velocity_latent(tape, &self.geometry, out.velocity[0]);
            let sv = tape.scale(v, sigma);
            Ok(tape.sub(zt, sv))
        };

        let x0_on = x0(&mut tape, zc_on, mc_on, self.task, self.lambda_on)?;
        let lk = tape.constant(layout.left_keep.clone());
        let rk = tape.constant(layout.right_keep.clone());
        let left = tape.mul(zc_on, lk);
        let right = tape.mul(x0_on, rk);
        let zc_off = tape.add(left, right);
        let mc_off = tape.constant(layout.m_c.clone());
        let x0_off = x0(&mut tape, zc_off, mc_off, self.task.with_mode(Mode::Off), layout.lambda)?;

        let diff = tape.sub(x0_off, zc_on);
        let w = tape.constant(layout.support.clone());
        let diff = tape.mul(diff, w);
        let sq = tape.sum_squares(diff);
        let loss = tape.scale(sq, 1.0 / layout.count as f32);
        let value = tape.value(loss).item();
        let grad = if want_grad && value.is_finite() { Some(tape.grad(loss, &[zt])?.remove(0)) } else { None };
        Ok((value, grad))
    }
}

impl Refiner for Corrector<'_> {
    fn refine(&mut self, z_t: LatentGrid, step: usize, sigma: f32) -> Result<LatentGrid> {
        let Some(&(_, kind)) = self.plan.iter().find(|(k, _)| *k == step) else {
            return Ok(z_t);
        };
        let layout = self.layout_for(kind);
        let (h, w, c) = (z_t.height(), z_t.width(), z_t.channels());
        let mut z = z_t;
        let mut trace = CorrectionTrace { step, sigma, mask: kind, objective: Vec::new(), eta: Vec::new(), diagnostic: None };
        let (mut obj, mut grad) = self.objective(&z, sigma, layout, true)?;
        trace.objective.push(obj);
        for r in 0..self.iterations {
            let g = match grad.take() {
                Some(g) if g.is_finite() => g,
                _ => {
                    trace.diagnostic = Some(format!("non-finite correction gradient at iteration {r}; remaining refinements skipped"));
                    break;
                }
            };
            let mut eta = self.eta0;
            let mut accepted = 0.0;
            for _ in 0..=self.max_halvings {
                let cand = z.array().zip_map(&g, |a, b| a - eta * b)?;
                let cand = LatentGrid::new(h, w, c, cand.into_data())?;
                let (val, _) = self.objective(&cand, sigma, layout, false)?;
                if val.is_finite() && val <= obj {
                    z = cand;
                    obj = val;
                    accepted = eta;
                    break;
                }
                eta *= 0.5;
            }
            trace.objective.push(obj);
            trace.eta.push(accepted);
            if r + 1 < self.iterations {
                grad = self.objective(&z, sigma, layout, true)?.1;
            }
        }
        self.traces.push(trace);
        Ok(z)
    }
}

/// Try-on sampling that, at the planned steps, nudges `z_t` so that a
/// try-off pass conditioned on the current person estimate reconstructs the
/// input garment.
///
/// `garment_tight` is the garment-only region of the left half; it is needed
/// only when the plan uses [`CorrectionMask::GarmentTight`].
#[allow(clippy::too_many_arguments)]
pub fn self_corrective_sample(
    params: &ModelParams,
    condition: &Canvas,
    mask: &MaskCanvas,
    task: TaskToken,
    garment_tight: Option<&Mask>,
    plan: &CorrectionPlan,
    schedule: &NoiseSchedule,
    temperature_params: Option<&TemperatureParams>,
    seed: u64,
) -> Result<SampleOutput> {
    if task.mode != Mode::On {
        return Err(usage!("self-correction runs on try-on sampling"));
    }
    let resolved = plan.resolve(schedule.steps())?;
    let (codec, z_init) = noise_for(params, condition, seed)?;
    let mut field = NetworkField::new(params, condition, mask, task, temperature_params)?;
    let lambda = field.lambda();
    if resolved.is_empty() {
        let mut out = sample_with(&mut field, condition, mask, &codec, schedule, z_init)?;
        out.lambda = lambda;
        return Ok(out);
    }

    let (hh, hw) = (condition.height(), condition.split());
    let full = Mask::filled(hh, hw, true);
    let tight = match garment_tight {
        Some(m) if m.height() == hh && m.width() == hw => m.clone(),
        Some(m) => return Err(usage!("garment mask is {}x{}, expected {hh}x{hw}", m.height(), m.width())),
        None if resolved.iter().any(|&(_, k)| k == CorrectionMask::GarmentTight) => {
            return Err(usage!("correction plan uses the garment-tight mask but none was given"))
        }
        None => full.clone(),
    };
    let geometry = params.config.geometry_for(hh, hw)?;
    let lw = geometry.latent_width;
    let lc = geometry.latent_channels;
    let layouts = [&full, &tight]
        .into_iter()
        .map(|left| -> Result<OffLayout> {
            let mc = build_tryoff_mask(left)?;
            let m_c = codec.downsample_mask(&mc)?;
            let keep = codec.keep_factors(&m_c);
            let is_left = |i: usize| (i / lc) % lw < lw / 2;
            let left_keep = Array::from_fn(keep.shape(), |i| if is_left(i) { keep.data()[i] } else { 0.0 });
            let right_keep = Array::from_fn(keep.shape(), |i| if is_left(i) { 0.0 } else { keep.data()[i] });
            let support = keep.map(|k| 1.0 - k);
            let count = support.data().iter().filter(|&&v| v > 0.0).count();
            if count == 0 {
                return Err(usage!("correction mask is empty"));
            }
            let lambda = match temperature_params {
                Some(tp) => {
                    let seq = tokenize(&LatentGrid::from_array(keep.clone())?, &LatentGrid::from_array(keep.clone())?, &m_c, params.config.patch, params.config.n_max)?;
                    let counts = TokenCounts { n_infer: seq.n_real, n_train: params.n_train, n_mask: seq.n_mask, n_garment: seq.n_garment };
                    Some(temperature(params.config.head_dim, counts, tp)? as f32)
                }
                None => None,
            };
            Ok(OffLayout { m_c: m_c.into_array(), left_keep, right_keep, support, count, lambda })
        })
        .collect::<Result<Vec<_>>>()?;

    let z_c = codec.encode(&apply_mask(condition, mask)?)?;
    let mut corrector = Corrector {
        params,
        geometry,
        z_c: z_c.into_array(),
        m_c: codec.downsample_mask(mask)?.into_array(),
        task,
        lambda_on: lambda,
        plan: resolved,
        layouts,
        iterations: plan.iterations,
        eta0: plan.eta0,
        max_halvings: plan.max_halvings,
        traces: Vec::new(),
    };
    let (latent, steps) = integrate(&mut field, z_init, schedule, Some(&mut corrector))?;
    let canvas = composite(condition, &codec.decode(&latent)?, mask)?;
    Ok(SampleOutput { canvas, latent, steps, corrections: corrector.traces, lambda })
}
