//! Training loop: task mixing, mask augmentation, AdamW updates and running
//! per-direction losses.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, usage, Result};
use crate::flow::{training_loss, AdamW, LossSupport, OptimizerConfig, TrainItem};
use crate::layout::{build_mask, build_tryoff_mask, concat_pair, Mask, MaskCanvas, Mode, TaskToken};
use crate::model::{ModelParams, Strategy};
use crate::synthwear::{augment_mask, AugmentMode, SamplePair};

/// Which directions a run trains on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskSelection {
    On,
    Off,
    /// Each example is try-on or try-off with equal probability.
    Both,
    /// Random rectangles on one half; used to build a generic base model.
    Inpaint,
}

impl std::str::FromStr for TaskSelection {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on" => Ok(Self::On),
            "off" => Ok(Self::Off),
            "both" => Ok(Self::Both),
            "inpaint" => Ok(Self::Inpaint),
            other => Err(usage!("unknown task `{other}` (expected on, off, both or inpaint)")),
        }
    }
}

fn default_augment() -> f64 {
    0.5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub strategy: Strategy,
    pub task: TaskSelection,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub loss_support: LossSupport,
    pub seed: u64,
    /// Probability that a training mask is augmented rather than exact.
    #[serde(default = "default_augment")]
    pub augment_probability: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 8,
            strategy: Strategy::AttentionOnly,
            task: TaskSelection::Both,
            optimizer: OptimizerConfig::toy(),
            loss_support: LossSupport::All,
            seed: 0,
            augment_probability: default_augment(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(config_err!("train.batch_size must be positive"));
        }
        if !(0.0..=1.0).contains(&self.augment_probability) {
            return Err(config_err!("train.augment_probability must lie in [0, 1]"));
        }
        self.optimizer.validate()
    }
}

/// Try-on mask of a pair, augmented with probability `p`.
fn tryon_mask(pair: &SamplePair, rng: &mut impl Rng, p: f64) -> Result<MaskCanvas> {
    let m_on = pair.require_person_mask()?;
    let m = if rng.gen_bool(p) { augment_mask(m_on, &pair.preserved, rng.gen(), AugmentMode::On, 0.0)? } else { m_on.clone() };
    build_mask(TaskToken::new(Mode::On, pair.category), pair.height(), pair.width(), Some(&m))
}

/// Try-off mask: the full garment half, or with probability `p` the
/// garment region grown by a random amount.
fn tryoff_mask(pair: &SamplePair, rng: &mut impl Rng, p: f64) -> Result<MaskCanvas> {
    if rng.gen_bool(p) {
        let growth = rng.gen_range(0.0..=1.0);
        build_tryoff_mask(&augment_mask(&pair.garment_mask, &pair.preserved, rng.gen(), AugmentMode::Off, growth)?)
    } else {
        build_mask(TaskToken::new(Mode::Off, pair.category), pair.height(), pair.width(), None)
    }
}

/// One random rectangle covering 10% to 100% of a random half.
fn inpaint_mask(pair: &SamplePair, rng: &mut impl Rng) -> Result<(MaskCanvas, Mode)> {
    let (h, w) = (pair.height(), pair.width());
    let rh = rng.gen_range((h / 3).max(1)..=h);
    let rw = rng.gen_range((w / 3).max(1)..=w);
    let (y0, x0) = (rng.gen_range(0..=h - rh), rng.gen_range(0..=w - rw));
    let rect = Mask::from_fn(h, w, |y, x| (y0..y0 + rh).contains(&y) && (x0..x0 + rw).contains(&x));
    let empty = Mask::filled(h, w, false);
    if rng.gen_bool(0.5) {
        Ok((MaskCanvas::from_halves(&empty, &rect)?, Mode::On))
    } else {
        Ok((MaskCanvas::from_halves(&rect, &empty)?, Mode::Off))
    }
}

/// Builds the training example for `pair` under `task`.
pub fn make_item(pair: &SamplePair, task: TaskSelection, rng: &mut impl Rng, augment_probability: f64) -> Result<TrainItem> {
    let canvas = concat_pair(&pair.garment, &pair.person)?;
    let mode = match task {
        TaskSelection::On => Mode::On,
        TaskSelection::Off => Mode::Off,
        TaskSelection::Both => {
            if rng.gen_bool(0.5) {
                Mode::On
            } else {
                Mode::Off
            }
        }
        TaskSelection::Inpaint => {
            let (mask, mode) = inpaint_mask(pair, rng)?;
            return Ok(TrainItem { canvas, mask, task: TaskToken::new(mode, pair.category) });
        }
    };
    let mask = match mode {
        Mode::On => tryon_mask(pair, rng, augment_probability)?,
        Mode::Off => tryoff_mask(pair, rng, augment_probability)?,
    };
    Ok(TrainItem { canvas, mask, task: TaskToken::new(mode, pair.category) })
}

/// Mean token count of the canvases a dataset produces.
pub fn mean_token_count(params: &ModelParams, pairs: &[SamplePair]) -> Result<usize> {
    if pairs.is_empty() {
        return Err(usage!("empty training set"));
    }
    let mut total = 0usize;
    for p in pairs {
        total += params.config.geometry_for(p.height(), p.width())?.token_count();
    }
    Ok(((total as f64) / pairs.len() as f64).round() as usize)
}

#[derive(Clone, Debug, Serialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f32,
    /// Exponential moving averages of per-example loss by direction.
    pub running_on: Option<f32>,
    pub running_off: Option<f32>,
    pub grad_norm: f64,
}

const RUNNING_DECAY: f32 = 0.98;

fn update_running(slot: &mut Option<f32>, v: f32) {
    *slot = Some(match *slot {
        None => v,
        Some(r) => RUNNING_DECAY * r + (1.0 - RUNNING_DECAY) * v,
    });
}

/// Trains `params` in place. `log` sees every step.
pub fn train(params: &mut ModelParams, pairs: &[SamplePair], cfg: &TrainConfig, mut log: impl FnMut(&StepLog)) -> Result<Vec<StepLog>> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(usage!("empty training set"));
    }
    params.select_trainable(cfg.strategy);
    params.n_train = mean_token_count(params, pairs)?;
    let mut opt = AdamW::new(cfg.optimizer, params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut running = (None, None);
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let pair = &pairs[rng.gen_range(0..pairs.len())];
            batch.push(make_item(pair, cfg.task, &mut rng, cfg.augment_probability)?);
        }
        let out = training_loss(params, &batch, &mut rng, cfg.loss_support)?;
        let grad_norm = opt.step(params, &out.grads)?;
        for (item, &l) in batch.iter().zip(&out.per_sample) {
            match item.task.mode {
                Mode::On => update_running(&mut running.0, l),
                Mode::Off => update_running(&mut running.1, l),
            }
        }
        let entry = StepLog { step, loss: out.loss, running_on: running.0, running_off: running.1, grad_norm };
        log(&entry);
        history.push(entry);
    }
    Ok(history)
}
