//! Held-out evaluation: sampled reconstructions scored on their masked
//! region, and attention localization against the synthetic correspondence.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{usage, Result};
use crate::flow::{initial_noise, interpolate, sample, self_corrective_sample, CorrectionPlan, NoiseSchedule, SampleOutput, TemperatureParams};
use crate::layout::{apply_mask, build_mask, concat_pair, tokenize, Canvas, Codec, Image, Mask, MaskCanvas, Mode, TaskToken};
use crate::metrics::{attn_localization, masked_error, oracle_region, ssim, EvalReport, SampleMetrics};
use crate::model::{forward_batch, ModelParams, ParamVars, SampleInput};
use crate::numerics::{Array, Tape};
use crate::synthwear::SamplePair;

/// One held-out problem: what the model sees and what it should produce.
pub struct EvalCase {
    pub truth: Canvas,
    pub condition: Canvas,
    pub mask: MaskCanvas,
    pub task: TaskToken,
    /// Pixels scored, on the generated half only.
    pub region: Mask,
}

impl EvalCase {
    /// Try-on scores the agnostic region of the person; try-off scores the
    /// whole garment image.
    pub fn new(pair: &SamplePair, mode: Mode) -> Result<Self> {
        let truth = concat_pair(&pair.garment, &pair.person)?;
        let task = TaskToken::new(mode, pair.category);
        let (h, w) = (pair.height(), pair.width());
        let (mask, region) = match mode {
            Mode::On => {
                let m = pair.require_person_mask()?;
                (build_mask(task, h, w, Some(m))?, m.clone())
            }
            Mode::Off => (build_mask(task, h, w, None)?, Mask::filled(h, w, true)),
        };
        let condition = apply_mask(&truth, &mask)?;
        Ok(Self { truth, condition, mask, task, region })
    }

    fn half(&self, canvas: &Canvas) -> Image {
        match self.task.mode {
            Mode::On => canvas.person(),
            Mode::Off => canvas.garment(),
        }
    }

    pub fn score(&self, index: usize, generated: &Canvas) -> Result<SampleMetrics> {
        let (out, truth) = (self.half(generated), self.half(&self.truth));
        let err = masked_error(&out, &truth, &self.region)?;
        Ok(SampleMetrics { index, task: self.task.mode.to_string(), ssim: ssim(&out, &truth)?, psnr: err.psnr, masked_mse: err.mse })
    }
}

/// How each held-out case is sampled.
#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub schedule: NoiseSchedule,
    pub temperature: Option<TemperatureParams>,
    /// Self-corrective sampling for try-on cases.
    pub correction: Option<CorrectionPlan>,
    /// Case `i` samples with seed `seed + i`.
    pub seed: u64,
}

/// Samples one case; try-on with a plan runs self-correction.
pub fn run_case(params: &ModelParams, pair: &SamplePair, case: &EvalCase, opts: &EvalOptions, seed: u64) -> Result<SampleOutput> {
    let temp = opts.temperature.as_ref();
    match (&opts.correction, case.task.mode) {
        (Some(plan), Mode::On) => self_corrective_sample(
            params,
            &case.condition,
            &case.mask,
            case.task,
            Some(&pair.garment_mask),
            plan,
            &opts.schedule,
            temp,
            seed,
        ),
        _ => sample(params, &case.condition, &case.mask, case.task, &opts.schedule, temp, seed),
    }
}

pub fn evaluate(params: &ModelParams, pairs: &[SamplePair], mode: Mode, opts: &EvalOptions) -> Result<EvalReport> {
    if pairs.is_empty() {
        return Err(usage!("no evaluation pairs"));
    }
    let mut samples = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let case = EvalCase::new(pair, mode)?;
        let out = run_case(params, pair, &case, opts, opts.seed.wrapping_add(i as u64))?;
        samples.push(case.score(i, &out.canvas)?);
    }
    Ok(EvalReport::new(samples, None))
}

/// Copy of `params` whose output head is zero, so it predicts zero velocity
/// everywhere.
pub fn zero_head(params: &ModelParams) -> ModelParams {
    let mut p = params.clone();
    for t in &mut p.tensors {
        if t.label == "head" {
            t.value = Array::zeros(t.value.shape());
        }
    }
    p
}

/// Noise level at which attention is probed.
pub const PROBE_T: f32 = 0.5;
/// Chebyshev growth, in tokens, of each oracle region.
pub const PROBE_DILATION: usize = 1;

#[derive(Clone, Debug, Serialize)]
pub struct LocalizationReport {
    pub queries: usize,
    pub block: usize,
    /// Mean attention mass on the dilated oracle region.
    pub mean: f64,
    /// Same quantity for attention spread evenly over all keys.
    pub uniform: f64,
    pub per_query: Vec<f64>,
}

/// Person-half token whose pixels come from the garment, with the garment
/// tokens they come from.
pub struct Probe {
    pub pair: usize,
    pub query: (usize, usize),
    pub region: Vec<(usize, usize)>,
}

/// Up to `count` probe queries drawn evenly across `pairs`, which must carry
/// ground truth.
pub fn select_probes(params: &ModelParams, pairs: &[SamplePair], count: usize, seed: u64) -> Result<Vec<Probe>> {
    let ppt = params.config.codec_factor * params.config.patch;
    let mut per_pair = Vec::with_capacity(pairs.len());
    for (i, pair) in pairs.iter().enumerate() {
        let truth = pair.truth.as_ref().ok_or_else(|| usage!("pair {i} has no correspondence ground truth"))?;
        let g = params.config.geometry_for(pair.height(), pair.width())?;
        let mut found = Vec::new();
        for r in 0..g.token_rows() {
            for c in g.split_col()..g.token_cols() {
                if let Ok(region) = oracle_region(&truth.correspondence, pair.width(), &g, ppt, (r, c)) {
                    found.push(Probe { pair: i, query: (r, c), region });
                }
            }
        }
        per_pair.push(found);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in &mut per_pair {
        v.shuffle(&mut rng);
    }
    let mut probes = Vec::with_capacity(count);
    while probes.len() < count {
        let before = probes.len();
        for v in &mut per_pair {
            if probes.len() < count {
                probes.extend(v.pop());
            }
        }
        if probes.len() == before {
            break;
        }
    }
    if probes.is_empty() {
        return Err(usage!("no person token has a garment correspondence"));
    }
    Ok(probes)
}

/// Head-mean attention of `block` (last block by default) over the try-on
/// canvas of each probed pair at noise level [`PROBE_T`].
pub fn attention_localization(
    params: &ModelParams,
    pairs: &[SamplePair],
    probes: &[Probe],
    block: Option<usize>,
    seed: u64,
) -> Result<LocalizationReport> {
    let block = block.unwrap_or(params.config.block_count - 1);
    if block >= params.config.block_count {
        return Err(usage!("block {block} out of {}", params.config.block_count));
    }
    let mut per_query = Vec::with_capacity(probes.len());
    let mut uniform = 0.0;
    let mut maps = BTreeMap::new();
    for p in probes {
        if let std::collections::btree_map::Entry::Vacant(e) = maps.entry(p.pair) {
            let pair = pairs.get(p.pair).ok_or_else(|| usage!("probe refers to pair {}", p.pair))?;
            e.insert(attention_map(params, pair, block, None, seed.wrapping_add(p.pair as u64))?);
        }
        let (map, keys) = &maps[&p.pair];
        let qi = keys.iter().position(|&k| k == p.query).ok_or_else(|| usage!("query {:?} is not a valid token", p.query))?;
        per_query.push(attn_localization(map.row(qi), keys, &p.region, PROBE_DILATION)?);
        let near = keys
            .iter()
            .filter(|&&(y, x)| p.region.iter().any(|&(ry, rx)| y.abs_diff(ry) <= PROBE_DILATION && x.abs_diff(rx) <= PROBE_DILATION))
            .count();
        uniform += near as f64 / keys.len() as f64;
    }
    let n = per_query.len() as f64;
    Ok(LocalizationReport { queries: per_query.len(), block, mean: per_query.iter().sum::<f64>() / n, uniform: uniform / n, per_query })
}

/// Attention `[N x N]` of one block on the try-on canvas of `pair`, for one
/// head or averaged over heads, with the token position of each row.
pub fn attention_map(
    params: &ModelParams,
    pair: &SamplePair,
    block: usize,
    head: Option<usize>,
    seed: u64,
) -> Result<(Array, Vec<(usize, usize)>)> {
    let case = EvalCase::new(pair, Mode::On)?;
    let cfg = &params.config;
    let codec = Codec::new(cfg.codec_factor)?;
    let z0 = codec.encode(&case.truth)?;
    let z1 = initial_noise(z0.height(), z0.width(), z0.channels(), seed);
    let z_t = interpolate(&z0, &z1, PROBE_T)?;
    let z_c = codec.encode(&case.condition)?;
    let m_c = codec.downsample_mask(&case.mask)?;
    let seq = tokenize(&z_t, &z_c, &m_c, cfg.patch, cfg.n_max)?;
    let mut tape = Tape::new();
    let pv = ParamVars::bind(&mut tape, params, false);
    let input = SampleInput::from_sequence(&mut tape, &seq, case.task, PROBE_T);
    let keys = input.positions.as_ref().clone();
    let out = forward_batch(&mut tape, params, &pv, &[input], None, Some(block))?;
    let mut heads = out.attention.and_then(|mut a| a.pop()).ok_or_else(|| usage!("attention was not captured"))?;
    if let Some(h) = head {
        if h >= heads.len() {
            return Err(usage!("head {h} out of {}", heads.len()));
        }
        return Ok((heads.swap_remove(h), keys));
    }
    let mut acc = heads[0].clone();
    for h in &heads[1..] {
        acc.add_assign(h);
    }
    let n = heads.len() as f32;
    Ok((acc.map(|v| v / n), keys))
}
