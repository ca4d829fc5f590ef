//! Run configuration. Every field has a default, so a config file only
//! needs the values it changes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::{LongTailSpec, SamplingMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "dcq")]
    Dcq,
    #[serde(rename = "cosface-full")]
    CosfaceFull,
    #[serde(rename = "cosface-head-only")]
    CosfaceHeadOnly,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Dcq => "dcq",
            Method::CosfaceFull => "cosface-full",
            Method::CosfaceHeadOnly => "cosface-head-only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dcq" => Ok(Method::Dcq),
            "cosface-full" => Ok(Method::CosfaceFull),
            "cosface-head-only" => Ok(Method::CosfaceHeadOnly),
            other => Err(Error::config(format!("unknown method {other:?}"))),
        }
    }

    pub fn default_scale(self) -> f64 {
        match self {
            Method::Dcq => 50.0,
            _ => 64.0,
        }
    }

    pub fn default_margin(self) -> f64 {
        match self {
            Method::Dcq => 0.3,
            _ => 0.35,
        }
    }

    pub fn default_lr(self) -> f64 {
        match self {
            Method::Dcq => 0.06,
            _ => 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    /// Logit scale `s`; defaults by method when absent.
    pub scale: Option<f64>,
    /// Cosine margin `m`; defaults by method when absent.
    pub margin: Option<f64>,
    /// EMA momentum of the weight generator.
    pub alpha: f64,
    pub queue_size: usize,
    pub batch_size: usize,
    /// Initial learning rate; defaults by method when absent.
    pub lr0: Option<f64>,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub epochs: usize,
    pub sgd_momentum: f64,
    pub weight_decay: f64,
    pub sampling: SamplingMode,
    /// Head-only baseline keeps classes with at least this many instances.
    pub min_instances: usize,
    pub seed: u64,
    /// Fill the `wall_seconds` metrics column with measured time. Off by
    /// default so repeated runs produce identical files.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Dcq,
            scale: None,
            margin: None,
            alpha: 0.999,
            queue_size: 200,
            batch_size: 16,
            lr0: None,
            decay_epochs: vec![15, 25, 28],
            decay_factor: 0.1,
            epochs: 30,
            sgd_momentum: 0.9,
            weight_decay: 1e-4,
            sampling: SamplingMode::Instance,
            min_instances: 9,
            seed: 0,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn scale(&self) -> f64 {
        self.scale.unwrap_or_else(|| self.method.default_scale())
    }

    pub fn margin(&self) -> f64 {
        self.margin.unwrap_or_else(|| self.method.default_margin())
    }

    pub fn lr0(&self) -> f64 {
        self.lr0.unwrap_or_else(|| self.method.default_lr())
    }

    /// Copy with every method-dependent default written out.
    pub fn resolved(&self) -> Self {
        Self {
            scale: Some(self.scale()),
            margin: Some(self.margin()),
            lr0: Some(self.lr0()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.margin();
        if !(0.0..1.0).contains(&m) {
            return Err(Error::config(format!("margin must lie in [0, 1), got {m}")));
        }
        if !(self.scale() > 0.0) {
            return Err(Error::config("scale must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config(format!("alpha must lie in [0, 1], got {}", self.alpha)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch_size and epochs must be positive"));
        }
        if self.method == Method::Dcq && self.queue_size < self.batch_size {
            return Err(Error::config(format!(
                "queue size {} must be at least the batch size {}",
                self.queue_size, self.batch_size
            )));
        }
        if !(self.lr0() > 0.0) || !(self.decay_factor > 0.0) {
            return Err(Error::config("learning rate and decay factor must be > 0"));
        }
        if self.min_instances == 0 {
            return Err(Error::config("min_instances must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub d_in: usize,
    /// Intra-identity noise scale.
    pub sigma: f64,
    pub zipf_exponent: f64,
    pub min_count: usize,
    pub max_count: usize,
    /// Identities reserved for distractors; defaults to `classes`.
    pub reserved: Option<usize>,
    /// Data seed; defaults to the training seed.
    pub seed: Option<u64>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 2000,
            d_in: 32,
            sigma: 0.1,
            zipf_exponent: 0.75,
            min_count: 2,
            max_count: 200,
            reserved: None,
            seed: None,
        }
    }
}

impl DataConfig {
    pub fn longtail(&self) -> LongTailSpec {
        LongTailSpec {
            zipf_exponent: self.zipf_exponent,
            min_count: self.min_count,
            max_count: self.max_count,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64],
            embed_dim: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate every `interval` epochs and after the last one; 0 disables.
    pub interval: usize,
    pub pairs: usize,
    pub probes: usize,
    pub distractors: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            interval: 5,
            pairs: 2000,
            probes: 500,
            distractors: 1000,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.train.seed)
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.data.d_in];
        dims.extend(&self.model.hidden);
        dims.push(self.model.embed_dim);
        dims
    }

    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.train = c.train.resolved();
        c.data.reserved = Some(c.data.reserved.unwrap_or(c.data.classes));
        c.data.seed = Some(self.data_seed());
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.data.longtail().validate()?;
        if self.model.hidden.is_empty() {
            return Err(Error::config("extractor needs at least one hidden layer"));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Applies a `key=value` override. Keys are either dotted paths
    /// (`train.lr0`), bare field names unique across sections (`lr0`), or the
    /// short aliases `C`, `K`, `D`, `B`, `s`, `m`.
    pub fn apply_override(&mut self, assignment: &str) -> Result<String> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
        let path = resolve_key(key.trim())?;
        let value: serde_json::Value = serde_json::from_str(raw.trim())
            .unwrap_or_else(|_| serde_json::Value::String(raw.trim().to_string()));
        let mut tree = serde_json::to_value(&*self)?;
        tree[path.0][path.1.as_str()] = value;
        *self = serde_json::from_value(tree)
            .map_err(|e| Error::config(format!("override {key}: {e}")))?;
        Ok(format!("{}.{}", path.0, path.1))
    }
}

fn resolve_key(key: &str) -> Result<(&'static str, String)> {
    let alias = match key {
        "C" => Some(("data", "classes")),
        "K" => Some(("train", "queue_size")),
        "D" => Some(("model", "embed_dim")),
        "B" => Some(("train", "batch_size")),
        "s" => Some(("train", "scale")),
        "m" => Some(("train", "margin")),
        "seed" => Some(("train", "seed")),
        _ => None,
    };
    if let Some((sec, field)) = alias {
        return Ok((sec, field.to_string()));
    }
    let defaults = serde_json::to_value(RunConfig::default())?;
    let sections = ["train", "data", "model", "eval"];
    if let Some((sec, field)) = key.split_once('.') {
        if let Some(&s) = sections.iter().find(|&&s| s == sec) {
            if defaults[s].get(field).is_some() {
                return Ok((s, field.to_string()));
            }
        }
        return Err(Error::config(format!("unknown config key {key:?}")));
    }
    let hits: Vec<&'static str> = sections
        .iter()
        .copied()
        .filter(|s| defaults[*s].get(key).is_some())
        .collect();
    match hits.as_slice() {
        [one] => Ok((one, key.to_string())),
        [] => Err(Error::config(format!("unknown config key {key:?}"))),
        _ => Err(Error::config(format!(
            "config key {key:?} is ambiguous, use one of {}",
            hits.iter().map(|s| format!("{s}.{key}")).collect::<Vec<_>>().join(", ")
        ))),
    }
}
