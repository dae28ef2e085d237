//! Flat `key = value` configuration files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::data::WeatherMix;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::scalar::Dtype;

/// Parses `key = value` lines; `#` starts a comment. Later duplicates are rejected.
pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid("config", format!("line {}: expected `key = value`", n + 1)))?;
        let key = key.trim();
        if key.is_empty() {
            return Err(Error::invalid("config", format!("line {}: empty key", n + 1)));
        }
        if map.insert(key.to_string(), value.trim().to_string()).is_some() {
            return Err(Error::invalid(
                "config",
                format!("line {}: duplicate key `{key}`", n + 1),
            ));
        }
    }
    Ok(map)
}

/// Dataset settings for a training run.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub train_count: usize,
    pub val_count: usize,
    pub size: usize,
    pub severity_min: f64,
    pub severity_max: f64,
    pub mix: WeatherMix,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_count: 200,
            val_count: 50,
            size: 64,
            severity_min: 0.3,
            severity_max: 0.9,
            mix: WeatherMix::uniform(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub lambda_perc: f64,
    pub charbonnier_eps: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub precision: Dtype,
    pub model: ModelConfig,
    pub data: DataConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            total_steps: 2000,
            lr_start: 2e-4,
            lr_end: 1e-6,
            lambda_perc: crate::loss::LAMBDA_PERC,
            charbonnier_eps: crate::loss::CHARBONNIER_EPS,
            clip_norm: 1.0,
            seed: 0,
            precision: Dtype::F32,
            model: ModelConfig::default(),
            data: DataConfig::default(),
        }
    }
}

fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::invalid("config", format!("bad value for `{key}`: {value:?}")))
}

impl TrainConfig {
    /// Reads a config file; keys not present keep their defaults.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (key, value) in parse_pairs(text)? {
            cfg.set(&key, &value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "batch_size" => self.batch_size = parse(key, v)?,
            "total_steps" => self.total_steps = parse(key, v)?,
            "lr_start" => self.lr_start = parse(key, v)?,
            "lr_end" => self.lr_end = parse(key, v)?,
            "lambda_perc" => self.lambda_perc = parse(key, v)?,
            "charbonnier_eps" => self.charbonnier_eps = parse(key, v)?,
            "clip_norm" => self.clip_norm = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "precision" => {
                self.precision =
                    Dtype::parse(v).ok_or_else(|| Error::invalid("config", format!("bad value for `{key}`: {v:?}")))?
            }
            "model.patch_size" => self.model.patch_size = parse(key, v)?,
            "model.feat_dim" => self.model.feat_dim = parse(key, v)?,
            "model.key_dim" => self.model.key_dim = parse(key, v)?,
            "model.ffn_dim" => self.model.ffn_dim = parse(key, v)?,
            "model.encoder_blocks" => self.model.encoder_blocks = parse(key, v)?,
            "model.decoder_blocks" => self.model.decoder_blocks = parse(key, v)?,
            "prior.enabled" => self.model.use_prior = parse(key, v)?,
            "prior.tokens" => self.model.prior.tokens = parse(key, v)?,
            "prior.channels" => self.model.prior.channels = parse(key, v)?,
            "prior.hidden" => self.model.projection_hidden = parse(key, v)?,
            "imb.enabled" => self.model.use_imb = parse(key, v)?,
            "imb.capacity" => self.model.imb_capacity = parse(key, v)?,
            "imb.topk" => self.model.imb_topk = parse(key, v)?,
            "data.train_count" => self.data.train_count = parse(key, v)?,
            "data.val_count" => self.data.val_count = parse(key, v)?,
            "data.size" => self.data.size = parse(key, v)?,
            "data.severity_min" => self.data.severity_min = parse(key, v)?,
            "data.severity_max" => self.data.severity_max = parse(key, v)?,
            "data.mix" => self.data.mix = v.parse()?,
            _ => return Err(Error::invalid("config", format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size", "must be positive"));
        }
        if self.total_steps == 0 {
            return Err(Error::invalid("total_steps", "must be positive"));
        }
        if !(self.lr_start > self.lr_end && self.lr_end > 0.0) {
            return Err(Error::invalid(
                "learning rate",
                format!("need lr_start > lr_end > 0, got {} and {}", self.lr_start, self.lr_end),
            ));
        }
        if !(self.lambda_perc >= 0.0 && self.lambda_perc.is_finite()) {
            return Err(Error::invalid("lambda_perc", "must be finite and non-negative"));
        }
        if !(self.charbonnier_eps > 0.0) {
            return Err(Error::invalid("charbonnier_eps", "must be positive"));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::invalid("clip_norm", "must be positive"));
        }
        self.model.validate()?;
        let d = &self.data;
        if d.train_count == 0 || d.val_count == 0 {
            return Err(Error::invalid(
                "dataset size",
                "need at least one training and one validation pair",
            ));
        }
        if d.size < 11 || d.size % self.model.patch_size != 0 {
            return Err(Error::invalid(
                "data.size",
                format!(
                    "{} must be at least 11 and divisible by the patch size {}",
                    d.size, self.model.patch_size
                ),
            ));
        }
        if !(0.0 <= d.severity_min && d.severity_min <= d.severity_max && d.severity_max <= 1.0) {
            return Err(Error::invalid(
                "severity range",
                format!("[{}, {}]", d.severity_min, d.severity_max),
            ));
        }
        Ok(())
    }

    /// Serializes every key, so `from_text(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let d = &self.data;
        let mut s = String::new();
        let mut put = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("writing to a string");
        put("batch_size", self.batch_size.to_string());
        put("total_steps", self.total_steps.to_string());
        put("lr_start", format!("{:e}", self.lr_start));
        put("lr_end", format!("{:e}", self.lr_end));
        put("lambda_perc", self.lambda_perc.to_string());
        put("charbonnier_eps", format!("{:e}", self.charbonnier_eps));
        put("clip_norm", self.clip_norm.to_string());
        put("seed", self.seed.to_string());
        put("precision", self.precision.name().to_string());
        put("model.patch_size", m.patch_size.to_string());
        put("model.feat_dim", m.feat_dim.to_string());
        put("model.key_dim", m.key_dim.to_string());
        put("model.ffn_dim", m.ffn_dim.to_string());
        put("model.encoder_blocks", m.encoder_blocks.to_string());
        put("model.decoder_blocks", m.decoder_blocks.to_string());
        put("prior.enabled", m.use_prior.to_string());
        put("prior.tokens", m.prior.tokens.to_string());
        put("prior.channels", m.prior.channels.to_string());
        put("prior.hidden", m.projection_hidden.to_string());
        put("imb.enabled", m.use_imb.to_string());
        put("imb.capacity", m.imb_capacity.to_string());
        put("imb.topk", m.imb_topk.to_string());
        put("data.train_count", d.train_count.to_string());
        put("data.val_count", d.val_count.to_string());
        put("data.size", d.size.to_string());
        put("data.severity_min", d.severity_min.to_string());
        put("data.severity_max", d.severity_max.to_string());
        put("data.mix", d.mix.to_string());
        s
    }
}
