//! Run configuration: one JSON document, patched by `--dot.path value` flags.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flow::{CorrectionPlan, LossSupport, NoiseSchedule, OptimizerConfig, TemperatureParams};
use crate::model::{ModelConfig, Strategy};
use crate::synthwear::DatasetSpec;
use crate::train::{TaskSelection, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct DataConfig {
    /// Procedural pairs, used unless `dir` is set.
    pub spec: DatasetSpec,
    /// Directory of `<stem>.garment.png` / `<stem>.person.png` pairs.
    pub dir: Option<PathBuf>,
}


#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub strategy: Strategy,
    pub task: TaskSelection,
    /// `toy` or `reference`; the fields below override single values.
    pub preset: String,
    pub lr: Option<f32>,
    pub weight_decay: Option<f32>,
    pub grad_clip: Option<f32>,
    pub loss_support: LossSupport,
    pub augment_probability: f64,
    /// Checkpoint to start from instead of a fresh initialization.
    pub init: Option<PathBuf>,
    /// Progress line on stderr every this many steps; 0 disables.
    pub report_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            strategy: t.strategy,
            task: t.task,
            preset: "toy".into(),
            lr: None,
            weight_decay: None,
            grad_clip: None,
            loss_support: t.loss_support,
            augment_probability: t.augment_probability,
            init: None,
            report_every: 100,
        }
    }
}

impl TrainSection {
    pub fn optimizer(&self) -> Result<OptimizerConfig> {
        let mut o = OptimizerConfig::preset(&self.preset)?;
        if let Some(v) = self.lr {
            o.lr = v;
        }
        if let Some(v) = self.weight_decay {
            o.weight_decay = v;
        }
        if let Some(v) = self.grad_clip {
            o.grad_clip = v;
        }
        o.validate()?;
        Ok(o)
    }

    pub fn to_train_config(&self, seed: u64) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            steps: self.steps,
            batch_size: self.batch_size,
            strategy: self.strategy,
            task: self.task,
            optimizer: self.optimizer()?,
            loss_support: self.loss_support,
            seed,
            augment_probability: self.augment_probability,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self { steps: NoiseSchedule::default().steps() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemperatureConfig {
    /// Apply the token-count-aware attention temperature at inference.
    pub enabled: bool,
    pub params: TemperatureParams,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub train: u64,
    pub sample: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SampleSection {
    /// Pairs of the data source to process.
    pub indices: Vec<usize>,
}

impl Default for SampleSection {
    fn default() -> Self {
        Self { indices: vec![0] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttentionSection {
    pub pair: usize,
    /// `[row, col]` token coordinates on the canvas grid. When empty, probe
    /// queries are drawn from the correspondence ground truth.
    pub queries: Vec<[usize; 2]>,
    /// Defaults to the last block.
    pub block: Option<usize>,
    /// Defaults to the mean over heads.
    pub head: Option<usize>,
    pub probes: usize,
}

impl Default for AttentionSection {
    fn default() -> Self {
        Self { pair: 0, queries: Vec::new(), block: None, head: None, probes: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Evaluate only the first `limit` pairs.
    pub limit: Option<usize>,
    /// Try-on cases use self-corrective sampling.
    pub self_correct: bool,
    /// Oracle queries for attention localization; 0 skips it.
    pub localization_queries: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self { limit: None, self_correct: false, localization_queries: 64 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LayerReportSection {
    pub before: Option<PathBuf>,
    pub after: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainSection,
    pub schedule: ScheduleConfig,
    pub temperature: TemperatureConfig,
    pub correction: CorrectionPlan,
    pub seeds: Seeds,
    pub output: PathBuf,
    /// Model to sample or evaluate with.
    pub checkpoint: Option<PathBuf>,
    pub sample: SampleSection,
    pub attention: AttentionSection,
    pub eval: EvalSection,
    pub layer_report: LayerReportSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            data: DataConfig::default(),
            train: TrainSection::default(),
            schedule: ScheduleConfig::default(),
            temperature: TemperatureConfig::default(),
            correction: CorrectionPlan::default(),
            seeds: Seeds::default(),
            output: PathBuf::from("out"),
            checkpoint: None,
            sample: SampleSection::default(),
            attention: AttentionSection::default(),
            eval: EvalSection::default(),
            layer_report: LayerReportSection::default(),
        }
    }
}

impl RunConfig {
    /// Checks every section up front.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.data.dir.is_none() {
            self.data.spec.validate(self.model.pixel_multiple())?;
        }
        self.train.to_train_config(self.seeds.train)?;
        NoiseSchedule::linear(self.schedule.steps)?;
        self.temperature.params.validate()?;
        self.correction.resolve(self.schedule.steps)?;
        if let Some(h) = self.attention.head {
            if h >= self.model.head_count {
                return Err(Error::Config(format!("attention.head {h} out of {} heads", self.model.head_count)));
            }
        }
        if let Some(b) = self.attention.block {
            if b >= self.model.block_count {
                return Err(Error::Config(format!("attention.block {b} out of {} blocks", self.model.block_count)));
            }
        }
        Ok(())
    }

    pub fn schedule(&self) -> NoiseSchedule {
        NoiseSchedule::linear(self.schedule.steps).expect("validated")
    }

    pub fn temperature_params(&self) -> Option<TemperatureParams> {
        self.temperature.enabled.then_some(self.temperature.params)
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(&serde_json::to_value(self).expect("serializable")).expect("serializable");
        hex(&Sha256::digest(&bytes))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Sets `path` (dot-separated) in `root`, creating objects on the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    if path.is_empty() || path.split('.').any(str::is_empty) {
        return Err(Error::Usage(format!("malformed override key `{path}`")));
    }
    let mut cur = root;
    let mut parts = path.split('.').peekable();
    while let Some(key) = parts.next() {
        let obj = match cur {
            Value::Object(m) => m,
            Value::Null => {
                *cur = Value::Object(Default::default());
                cur.as_object_mut().expect("just set")
            }
            _ => return Err(Error::InvalidConfig { path: path.into(), message: format!("`{key}` is inside a non-object value") }),
        };
        if parts.peek().is_none() {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(key.to_string()).or_insert(Value::Null);
    }
    unreachable!("path has at least one segment")
}

/// A flag value: JSON when it parses as JSON, a plain string otherwise.
pub fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Deserializes with the offending field path in the error.
pub fn from_value(value: Value) -> Result<RunConfig> {
    let text = value.to_string();
    let de = &mut serde_json::Deserializer::from_str(&text);
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::InvalidConfig { path, message: e.into_inner().to_string() }
    })?;
    Ok(cfg)
}
