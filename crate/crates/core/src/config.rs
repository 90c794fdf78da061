//! Run configuration: JSON sections, ablation flags and dotted-path overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::aft::{AftConfig, Partition};
use crate::encoder::{EncoderConfig, Refinement};
use crate::error::{invalid, Error, Result};
use crate::fer::FerConfig;
use crate::imaging::AugmentSpec;
use crate::objectives::LossConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurveSource {
    PerSample,
    DatasetMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Paired manifest (`pairs.json`) for pretraining.
    pub pairs: Option<String>,
    /// Classification manifest (`classes.json`) for fine-tuning and evaluation.
    pub classes: Option<String>,
    /// Number of fixed rings in the discrepancy curve.
    pub bands: usize,
    pub curve_source: CurveSource,
    pub augment: AugmentSpec,
    pub old_classes: Vec<usize>,
    pub label_fraction: f64,
    /// Total classes assumed at fine-tuning; defaults to the split's count.
    pub num_classes: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            pairs: None,
            classes: None,
            bands: 25,
            curve_source: CurveSource::PerSample,
            augment: AugmentSpec::default(),
            old_classes: vec![0, 1, 2],
            label_fraction: 0.5,
            num_classes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StageSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// Only used by the SGD fine-tuner.
    pub momentum: f64,
}

impl Default for StageSchedule {
    fn default() -> Self {
        StageSchedule { epochs: 20, batch_size: 16, lr: 1e-4, lr_min: 1e-6, weight_decay: 0.01, momentum: 0.0 }
    }
}

fn finetune_defaults() -> StageSchedule {
    StageSchedule { epochs: 30, batch_size: 32, lr: 1e-3, lr_min: 0.0, weight_decay: 0.0, momentum: 0.9 }
}

/// Partial `finetune` sections fill missing fields from the fine-tuning defaults.
fn de_finetune<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<StageSchedule, D::Error> {
    let mut base = serde_json::to_value(finetune_defaults()).map_err(serde::de::Error::custom)?;
    let given = Value::deserialize(d)?;
    let Value::Object(fields) = given else {
        return Err(serde::de::Error::custom("schedule.finetune must be an object"));
    };
    for (k, v) in fields {
        match base.get_mut(&k) {
            Some(slot) => *slot = v,
            None => return Err(serde::de::Error::custom(format!("unknown field `{k}` in schedule.finetune"))),
        }
    }
    serde_json::from_value(base).map_err(serde::de::Error::custom)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub pretrain: StageSchedule,
    #[serde(deserialize_with = "de_finetune")]
    pub finetune: StageSchedule,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { pretrain: StageSchedule::default(), finetune: finetune_defaults() }
    }
}

impl ScheduleConfig {
    /// The full-scale settings: 150/200 epochs, batches of 64/128.
    pub fn full_scale() -> Self {
        let mut s = Self::default();
        s.pretrain.epochs = 150;
        s.pretrain.batch_size = 64;
        s.finetune.epochs = 200;
        s.finetune.batch_size = 128;
        s
    }
}

/// Component switches; each requires the one before it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub mcpt: bool,
    pub fer: bool,
    pub fce: bool,
    pub mdc: bool,
    pub ape: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation { mcpt: true, fer: true, fce: true, mdc: true, ape: true }
    }
}

impl Ablation {
    pub fn validate(&self) -> Result<()> {
        let chain = [("mcpt", self.mcpt), ("fer", self.fer), ("fce", self.fce), ("mdc", self.mdc), ("ape", self.ape)];
        for w in chain.windows(2) {
            if w[1].1 && !w[0].1 {
                return Err(invalid(format!("ablation flag `{}` requires `{}`", w[1].0, w[0].0)));
            }
        }
        Ok(())
    }

    /// Rows (a)–(f): each row switches on one more component.
    pub fn row(label: char) -> Result<Self> {
        let on = match label {
            'a' => 0,
            'b' => 1,
            'c' => 2,
            'd' => 3,
            'e' => 4,
            'f' => 5,
            other => return Err(invalid(format!("unknown ablation row `{other}`"))),
        };
        Ok(Ablation { mcpt: on >= 1, fer: on >= 2, fce: on >= 3, mdc: on >= 4, ape: on >= 5 })
    }

    pub fn refinement(&self) -> Refinement {
        match (self.fer, self.fce) {
            (false, _) => Refinement::None,
            (true, false) => Refinement::SelfAttention,
            (true, true) => Refinement::Experts,
        }
    }

    /// Tokenizer settings after applying the `mdc` and `ape` switches.
    pub fn effective_aft(&self, base: &AftConfig) -> AftConfig {
        let mut a = base.clone();
        if !self.mdc {
            a.partition = Partition::Uniform;
        }
        if !self.ape {
            a.perturb_scale = 0.0;
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub encoder: EncoderConfig,
    pub aft: AftConfig,
    pub fer: FerConfig,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub ablation: Ablation,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: DataConfig::default(),
            encoder: EncoderConfig::default(),
            aft: AftConfig::default(),
            fer: FerConfig::default(),
            loss: LossConfig::default(),
            schedule: ScheduleConfig::default(),
            ablation: Ablation::default(),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.ablation.validate()?;
        self.encoder.validate()?;
        self.aft.validate()?;
        self.loss.validate()?;
        if self.data.bands < 2 {
            return Err(invalid("data.bands must be at least 2"));
        }
        if self.aft.bands > self.data.bands {
            return Err(invalid(format!("aft.bands ({}) exceeds data.bands ({})", self.aft.bands, self.data.bands)));
        }
        if !(self.data.label_fraction > 0.0 && self.data.label_fraction <= 1.0) {
            return Err(invalid("data.label_fraction must lie in (0, 1]"));
        }
        for (name, s) in [("pretrain", &self.schedule.pretrain), ("finetune", &self.schedule.finetune)] {
            if s.batch_size == 0 {
                return Err(invalid(format!("schedule.{name}.batch_size must be positive")));
            }
            if !(s.lr >= 0.0 && s.lr_min >= 0.0 && s.weight_decay >= 0.0 && (0.0..1.0).contains(&s.momentum)) {
                return Err(invalid(format!("schedule.{name} has an out-of-range value")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Apply `path=value` overrides (dotted paths, JSON or bare-string values)
    /// and re-validate.
    pub fn with_overrides(&self, overrides: &[(String, String)]) -> Result<Self> {
        let mut v = serde_json::to_value(self)?;
        for (path, raw) in overrides {
            let val: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.clone()));
            set_path(&mut v, path, val)?;
        }
        let cfg: RunConfig = serde_json::from_value(v)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Replace the value at a dotted path; the path must already exist.
pub fn set_path(root: &mut Value, path: &str, val: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur.as_object_mut().ok_or_else(|| Error::InvalidArgument(format!("`{path}` is not a config path")))?;
        let slot = obj.get_mut(*p).ok_or_else(|| Error::InvalidArgument(format!("unknown config path `{path}`")))?;
        if i + 1 == parts.len() {
            *slot = val;
            return Ok(());
        }
        cur = slot;
    }
    Err(invalid("empty config path"))
}
